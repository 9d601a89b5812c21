//! Event stream recorded by the simulator and the report computed from it.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::adversary::SabotageAction;
use crate::haps::messages::WarningReason;
use crate::primitives::{Hash, Millis, NodeId};

/// One reading as seen by the metrics: who sent it, when, and the secret
/// ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadingRef {
    pub sensor: NodeId,
    pub timestamp: Millis,
    pub malicious: bool,
}

/// Timestamps are simulated microseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SimEvent {
    ReadingGenerated {
        at_us: u64,
        reading: ReadingRef,
    },
    PacketDiscarded {
        at_us: u64,
        gateway: NodeId,
        malicious_readings: u32,
        reason: String,
    },
    BlockProposed {
        at_us: u64,
        height: u64,
        seq: u32,
        creator: NodeId,
    },
    /// The decision instant at the block's creator.
    BlockConfirmed {
        at_us: u64,
        height: u64,
        creator: NodeId,
        hash: Hash,
        transactions: u32,
        readings: Vec<ReadingRef>,
    },
    BlockRejected {
        at_us: u64,
        height: u64,
        seq: u32,
    },
    BlockAppended {
        at_us: u64,
        station: NodeId,
        height: u64,
        hash: Hash,
    },
    Escalated {
        at_us: u64,
        height: u64,
    },
    DisputeDropped {
        at_us: u64,
        tx: Hash,
    },
    Sabotage {
        at_us: u64,
        gateway: NodeId,
        height: u64,
    },
    Warning {
        at_us: u64,
        reporter: NodeId,
        reason: WarningReason,
        suspects: Vec<NodeId>,
    },
    GatewayFixed {
        at_us: u64,
        gateway: NodeId,
        replacement: Option<NodeId>,
    },
}

impl SimEvent {
    pub fn at_us(&self) -> u64 {
        match self {
            SimEvent::ReadingGenerated { at_us, .. }
            | SimEvent::PacketDiscarded { at_us, .. }
            | SimEvent::BlockProposed { at_us, .. }
            | SimEvent::BlockConfirmed { at_us, .. }
            | SimEvent::BlockRejected { at_us, .. }
            | SimEvent::BlockAppended { at_us, .. }
            | SimEvent::Escalated { at_us, .. }
            | SimEvent::DisputeDropped { at_us, .. }
            | SimEvent::Sabotage { at_us, .. }
            | SimEvent::Warning { at_us, .. }
            | SimEvent::GatewayFixed { at_us, .. } => *at_us,
        }
    }

    pub(crate) fn at_us_mut(&mut self) -> &mut u64 {
        match self {
            SimEvent::ReadingGenerated { at_us, .. }
            | SimEvent::PacketDiscarded { at_us, .. }
            | SimEvent::BlockProposed { at_us, .. }
            | SimEvent::BlockConfirmed { at_us, .. }
            | SimEvent::BlockRejected { at_us, .. }
            | SimEvent::BlockAppended { at_us, .. }
            | SimEvent::Escalated { at_us, .. }
            | SimEvent::DisputeDropped { at_us, .. }
            | SimEvent::Sabotage { at_us, .. }
            | SimEvent::Warning { at_us, .. }
            | SimEvent::GatewayFixed { at_us, .. } => at_us,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            SimEvent::ReadingGenerated { .. } => "reading_generated",
            SimEvent::PacketDiscarded { .. } => "packet_discarded",
            SimEvent::BlockProposed { .. } => "block_proposed",
            SimEvent::BlockConfirmed { .. } => "block_confirmed",
            SimEvent::BlockRejected { .. } => "block_rejected",
            SimEvent::BlockAppended { .. } => "block_appended",
            SimEvent::Escalated { .. } => "escalated",
            SimEvent::DisputeDropped { .. } => "dispute_dropped",
            SimEvent::Sabotage { .. } => "sabotage",
            SimEvent::Warning { .. } => "warning",
            SimEvent::GatewayFixed { .. } => "gateway_fixed",
        }
    }

    /// Node most associated with the event.
    pub fn node(&self) -> Option<NodeId> {
        match self {
            SimEvent::ReadingGenerated { reading, .. } => Some(reading.sensor),
            SimEvent::PacketDiscarded { gateway, .. }
            | SimEvent::Sabotage { gateway, .. }
            | SimEvent::GatewayFixed { gateway, .. } => Some(*gateway),
            SimEvent::BlockProposed { creator, .. } | SimEvent::BlockConfirmed { creator, .. } => Some(*creator),
            SimEvent::BlockAppended { station, .. } => Some(*station),
            SimEvent::Warning { reporter, .. } => Some(*reporter),
            SimEvent::BlockRejected { .. } | SimEvent::Escalated { .. } | SimEvent::DisputeDropped { .. } => None,
        }
    }

    pub fn detail(&self) -> String {
        match self {
            SimEvent::ReadingGenerated { reading, .. } => format!("t={} malicious={}", reading.timestamp, reading.malicious),
            SimEvent::PacketDiscarded {
                malicious_readings, reason, ..
            } => format!("{reason} malicious={malicious_readings}"),
            SimEvent::BlockProposed { height, seq, .. } => format!("height={height} seq={seq}"),
            SimEvent::BlockConfirmed {
                height,
                transactions,
                readings,
                ..
            } => format!("height={height} txs={transactions} readings={}", readings.len()),
            SimEvent::BlockRejected { height, seq, .. } => format!("height={height} seq={seq}"),
            SimEvent::BlockAppended { height, .. } => format!("height={height}"),
            SimEvent::Escalated { height, .. } => format!("height={height}"),
            SimEvent::DisputeDropped { tx, .. } => format!("tx={}", &tx.to_hex()[..16]),
            SimEvent::Sabotage { height, .. } => format!("height={height}"),
            SimEvent::Warning { reason, suspects, .. } => {
                let names: Vec<String> = suspects.iter().map(|s| s.to_string()).collect();
                format!("{reason:?} suspects={}", names.join(" "))
            }
            SimEvent::GatewayFixed { replacement, .. } => match replacement {
                Some(r) => format!("replacement={r}"),
                None => "replacement=none".into(),
            },
        }
    }
}

/// Counters that are not worth an event each.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTotals {
    /// Sent, forwarded and received message counts at network nodes up to
    /// the end of the measured period.
    pub data_packet_events: u64,
    pub control_packet_events: u64,
    pub network_nodes: u64,
    /// Energy spent by each sensor, in Joules.
    pub sensor_energy_used: Vec<f64>,
    pub max_link_delay_us: u64,
    pub station_chains: Vec<Vec<Hash>>,
    pub sabotage_actions: Vec<SabotageAction>,
    pub false_positives: u64,
    pub events_processed: u64,
    pub completed_early: bool,
}

/// What `finalize` needs from the scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportContext {
    pub mode: String,
    pub seed: u64,
    pub sim_time: Millis,
    pub t_th: Millis,
    pub t_w: Millis,
    pub blockchain_enabled: bool,
    pub tx_payload_size: u32,
    pub pmn: f64,
    pub stations: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: String,
    pub seed: u64,
    pub sim_time_ms: Millis,
    pub blockchain_enabled: bool,
    pub tx_payload_size: u32,
    pub pmn: f64,
    pub completed_early: bool,
    pub events_processed: u64,

    pub readings_generated: u64,
    pub malicious_readings_generated: u64,
    pub readings_confirmed: u64,
    pub malicious_readings_confirmed: u64,
    pub transactions_confirmed: u64,
    pub blocks_confirmed: u64,
    pub blocks_rejected: u64,

    /// Transactions added to the chain per second.
    pub bth: f64,
    /// Sensor readings added to the chain per second.
    pub bth_readings: f64,
    pub tla_mean: Option<f64>,
    pub tla_p50: Option<f64>,
    pub tla_p95: Option<f64>,
    /// `t_th + t_w + 4 * max_link_delay_ms`.
    pub tla_bound_ms: f64,
    /// Share of generated readings confirmed within `tla_bound_ms`.
    pub confirmed_within_bound: Option<f64>,
    pub ct_mean: Option<f64>,
    pub adr: Option<f64>,
    pub mgdr: Option<f64>,
    pub nt_data: f64,
    pub nt_control: f64,
    pub energy_per_sensor: f64,
    pub false_positive_count: u64,
    pub sabotage_actions: u64,
    pub detected_actions: u64,
    pub warnings: u64,
    pub max_link_delay_ms: f64,

    pub chain_height: u64,
    pub chains_identical: bool,
    pub max_confirms_per_height: u32,
}

fn percentile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Some(sorted[rank - 1])
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// One minus the mean, over blocks in confirmation order, of the share of
/// malicious readings generated since the previous block that made it into
/// the chain. Blocks whose window generated no malicious reading are
/// skipped. `None` when no malicious reading was generated.
pub fn compute_adr(events: &[SimEvent]) -> Option<f64> {
    let mut generated: Vec<(u64, NodeId, Millis)> = Vec::new();
    let mut on_chain: BTreeSet<(NodeId, Millis)> = BTreeSet::new();
    let mut confirms: Vec<u64> = Vec::new();
    for e in events {
        match e {
            SimEvent::ReadingGenerated { at_us, reading } if reading.malicious => {
                generated.push((*at_us, reading.sensor, reading.timestamp));
            }
            SimEvent::BlockConfirmed { at_us, readings, .. } => {
                confirms.push(*at_us);
                on_chain.extend(readings.iter().filter(|r| r.malicious).map(|r| (r.sensor, r.timestamp)));
            }
            _ => {}
        }
    }
    if generated.is_empty() {
        return None;
    }
    generated.sort_unstable();
    confirms.sort_unstable();
    let mut ratios = Vec::new();
    let mut window_start = None;
    for at in confirms {
        let lo = window_start.map_or(0, |s| generated.partition_point(|g| g.0 <= s));
        let hi = generated.partition_point(|g| g.0 <= at);
        window_start = Some(at);
        if hi > lo {
            let added = generated[lo..hi]
                .iter()
                .filter(|g| on_chain.contains(&(g.1, g.2)))
                .count();
            ratios.push(added as f64 / (hi - lo) as f64);
        }
    }
    let m = mean(&ratios)?;
    Some((1.0 - m).clamp(0.0, 1.0))
}

/// Detected sabotage actions over all sabotage actions.
pub fn compute_mgdr(actions: &[SabotageAction]) -> Option<f64> {
    if actions.is_empty() {
        return None;
    }
    Some(actions.iter().filter(|a| a.detected).count() as f64 / actions.len() as f64)
}

pub fn finalize(events: &[SimEvent], totals: &RunTotals, ctx: &ReportContext) -> MetricsReport {
    let sim_us = ctx.sim_time * 1000;
    let secs = ctx.sim_time as f64 / 1000.0;
    let per_sec = |n: u64| if secs > 0.0 { n as f64 / secs } else { 0.0 };

    let mut readings_generated = 0u64;
    let mut malicious_generated = 0u64;
    let mut confirm_of: BTreeMap<(NodeId, Millis), u64> = BTreeMap::new();
    let mut readings_confirmed = 0u64;
    let mut malicious_confirmed = 0u64;
    let mut txs_in_period = 0u64;
    let mut readings_in_period = 0u64;
    let mut blocks_confirmed = 0u64;
    let mut blocks_rejected = 0u64;
    let mut confirms_per_height: BTreeMap<u64, u32> = BTreeMap::new();
    let mut first_proposal: BTreeMap<u64, u64> = BTreeMap::new();
    let mut appends: BTreeMap<u64, (u32, u64)> = BTreeMap::new();
    let mut latencies = Vec::new();
    let mut warnings = 0u64;

    for e in events {
        match e {
            SimEvent::ReadingGenerated { reading, .. } => {
                readings_generated += 1;
                if reading.malicious {
                    malicious_generated += 1;
                }
            }
            SimEvent::BlockProposed { at_us, height, .. } => {
                first_proposal.entry(*height).or_insert(*at_us);
            }
            SimEvent::BlockConfirmed {
                at_us,
                height,
                transactions,
                readings,
                ..
            } => {
                blocks_confirmed += 1;
                *confirms_per_height.entry(*height).or_default() += 1;
                if *at_us <= sim_us {
                    txs_in_period += *transactions as u64;
                    readings_in_period += readings.len() as u64;
                }
                for r in readings {
                    readings_confirmed += 1;
                    malicious_confirmed += u64::from(r.malicious);
                    let ms = *at_us as f64 / 1000.0 - r.timestamp as f64;
                    latencies.push(ms);
                    confirm_of.entry((r.sensor, r.timestamp)).or_insert(*at_us);
                }
            }
            SimEvent::BlockRejected { .. } => blocks_rejected += 1,
            SimEvent::BlockAppended { at_us, height, .. } => {
                let entry = appends.entry(*height).or_insert((0, 0));
                entry.0 += 1;
                entry.1 = entry.1.max(*at_us);
            }
            SimEvent::Warning { .. } => warnings += 1,
            _ => {}
        }
    }

    latencies.sort_by(f64::total_cmp);
    let max_link_delay_ms = totals.max_link_delay_us as f64 / 1000.0;
    let tla_bound_ms = (ctx.t_th + ctx.t_w) as f64 + 4.0 * max_link_delay_ms;
    let confirmed_within_bound = (readings_generated > 0).then(|| {
        let within = confirm_of
            .iter()
            .filter(|((_, ts), at)| **at as f64 / 1000.0 - *ts as f64 <= tla_bound_ms)
            .count();
        within as f64 / readings_generated as f64
    });

    let cts: Vec<f64> = appends
        .iter()
        .filter(|(_, (count, _))| *count >= ctx.stations)
        .filter_map(|(h, (_, last))| first_proposal.get(h).map(|first| (*last - *first) as f64 / 1000.0))
        .collect();

    let station_chains = &totals.station_chains;
    let chains_identical = station_chains.windows(2).all(|w| w[0] == w[1]);
    let chain_height = station_chains.iter().map(|c| c.len() as u64).max().unwrap_or(0);
    let nodes = totals.network_nodes.max(1) as f64;
    let nt = |n: u64| if secs > 0.0 { n as f64 / (nodes * secs) } else { 0.0 };
    let energy_per_sensor = mean(&totals.sensor_energy_used).unwrap_or(0.0);

    MetricsReport {
        mode: ctx.mode.clone(),
        seed: ctx.seed,
        sim_time_ms: ctx.sim_time,
        blockchain_enabled: ctx.blockchain_enabled,
        tx_payload_size: ctx.tx_payload_size,
        pmn: ctx.pmn,
        completed_early: totals.completed_early,
        events_processed: totals.events_processed,
        readings_generated,
        malicious_readings_generated: malicious_generated,
        readings_confirmed,
        malicious_readings_confirmed: malicious_confirmed,
        transactions_confirmed: txs_in_period,
        blocks_confirmed,
        blocks_rejected,
        bth: per_sec(txs_in_period),
        bth_readings: per_sec(readings_in_period),
        tla_mean: mean(&latencies),
        tla_p50: percentile(&latencies, 0.5),
        tla_p95: percentile(&latencies, 0.95),
        tla_bound_ms,
        confirmed_within_bound,
        ct_mean: mean(&cts),
        adr: compute_adr(events),
        mgdr: compute_mgdr(&totals.sabotage_actions),
        nt_data: nt(totals.data_packet_events),
        nt_control: nt(totals.control_packet_events),
        energy_per_sensor,
        false_positive_count: totals.false_positives,
        sabotage_actions: totals.sabotage_actions.len() as u64,
        detected_actions: totals.sabotage_actions.iter().filter(|a| a.detected).count() as u64,
        warnings,
        max_link_delay_ms,
        chain_height,
        chains_identical,
        max_confirms_per_height: confirms_per_height.values().copied().max().unwrap_or(0),
    }
}
