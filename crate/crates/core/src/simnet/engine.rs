//! Event loop: node CPUs, links, protocol handlers and the adversary.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap, VecDeque};
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::adversary::{sabotage_vote, AdversaryState};
use crate::codec::Canonical;
use crate::config::{ConsensusMode, CpuCost, ScenarioConfig};
use crate::crypto::{keygen, KeyPair, KeyRegistry, SignatureChecker};
use crate::gateway::{transaction_signatures_valid, GatewayParams, GatewayState, IngestOutcome, Vote};
use crate::haps::baseline::GatewayVoter;
use crate::haps::messages::ConsensusMessage;
use crate::haps::{ConsensusParams, HapsState, Outbox, ProtocolEvent, Timer};
use crate::metrics::{finalize, MetricsReport, ReadingRef, ReportContext, RunTotals, SimEvent};
use crate::primitives::{Block, Millis, NodeId, Reading, Role};
use crate::wsn::{endorse, generate_reading, validate_and_endorse, DataPacket, EndorseOutcome, EnvModel};

use super::energy::EnergyLedger;
use super::link::{LinkClass, LinkModel};
use super::topology::{build_topology, Topology};
use super::SimError;

/// Report plus the full event stream of one run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: MetricsReport,
    pub events: Vec<SimEvent>,
}

pub fn run(cfg: &ScenarioConfig) -> Result<MetricsReport, SimError> {
    Ok(run_with_events(cfg)?.report)
}

pub fn run_with_events(cfg: &ScenarioConfig) -> Result<RunOutput, SimError> {
    cfg.validate()?;
    let mut sim = Sim::new(cfg)?;
    sim.start();
    sim.event_loop()?;
    Ok(sim.finish())
}

#[derive(Debug)]
enum Payload {
    Data(DataPacket),
    Raw(Vec<Reading>),
    Consensus(ConsensusMessage),
}

#[derive(Debug)]
struct Msg {
    payload: Payload,
    size: u64,
    data: bool,
}

impl Msg {
    fn new(payload: Payload) -> Rc<Self> {
        let (size, data) = match &payload {
            Payload::Data(p) => (p.wire_len(), true),
            Payload::Raw(rs) => (rs.iter().map(|r| r.canonical_bytes().len() as u64 + r.padding()).sum(), true),
            Payload::Consensus(m) => (m.wire_len(), !m.is_control()),
        };
        Rc::new(Self { payload, size, data })
    }
}

#[derive(Debug)]
enum Job {
    Deliver { from: NodeId, msg: Rc<Msg> },
    Timer(Timer),
    Report,
    Aggregate,
}

#[derive(Debug)]
enum Ev {
    /// A transmission reached `node`; `dests` are the final recipients it
    /// still has to reach from here, possibly including `node`.
    Hop {
        node: NodeId,
        origin: NodeId,
        msg: Rc<Msg>,
        dests: Vec<NodeId>,
    },
    Job { node: NodeId, job: Job },
    CpuRun { node: NodeId },
    AttackTick,
    Fix { gateway: NodeId },
}

struct Queued {
    at: u64,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    /// Reversed so the max-heap pops the earliest event first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

#[derive(Default)]
struct Cpu {
    busy: bool,
    queue: VecDeque<Job>,
}

/// What a handler asks for once its CPU time has elapsed.
#[derive(Default)]
struct Effects {
    sends: Vec<(Vec<NodeId>, Rc<Msg>, bool)>,
    timers: Vec<(Millis, Timer)>,
    events: Vec<SimEvent>,
    signs: u64,
}

impl Effects {
    fn send(&mut self, to: Vec<NodeId>, payload: Payload) {
        self.sends.push((to, Msg::new(payload), false));
    }

    fn forward(&mut self, to: NodeId, payload: Payload) {
        self.sends.push((vec![to], Msg::new(payload), true));
    }
}

fn readings_of(block: &Block) -> Vec<ReadingRef> {
    block
        .body
        .iter()
        .flat_map(|t| t.readings.iter())
        .map(|r| ReadingRef {
            sensor: r.sensor,
            timestamp: r.timestamp,
            malicious: r.secret_malicious_flag,
        })
        .collect()
}

struct Sim<'a> {
    cfg: &'a ScenarioConfig,
    topo: Topology,
    link: LinkModel,
    now: u64,
    seq: u64,
    heap: BinaryHeap<Queued>,
    net_rng: ChaCha20Rng,
    data_rng: ChaCha20Rng,
    adv_rng: ChaCha20Rng,
    checker: SignatureChecker,
    sensor_keys: Vec<KeyPair>,
    gateways: Vec<GatewayState>,
    voters: Vec<GatewayVoter>,
    stations: Vec<HapsState>,
    station_ids: Vec<NodeId>,
    gateway_ids: Vec<NodeId>,
    params: ConsensusParams,
    adversary: AdversaryState,
    env: EnvModel,
    energy: EnergyLedger,
    cpus: Vec<Cpu>,
    tx_free: HashMap<(NodeId, LinkClass), u64>,
    link_last: HashMap<(NodeId, NodeId), u64>,
    events: Vec<SimEvent>,
    data_events: u64,
    control_events: u64,
    max_link_delay_us: u64,
    processed: u64,
    sim_us: u64,
    /// No creator fires or aggregation ticks after this instant, so the
    /// remaining rounds can finish before the run ends.
    propose_until_us: u64,
    end_us: u64,
}

impl<'a> Sim<'a> {
    fn new(cfg: &'a ScenarioConfig) -> Result<Self, SimError> {
        let mut master = ChaCha20Rng::seed_from_u64(cfg.seed);
        let mut topo_rng = ChaCha20Rng::from_seed(master.gen());
        let net_rng = ChaCha20Rng::from_seed(master.gen());
        let data_rng = ChaCha20Rng::from_seed(master.gen());
        let mut adv_rng = ChaCha20Rng::from_seed(master.gen());
        let key_seed: [u8; 32] = master.gen();

        let topo = build_topology(cfg, &mut topo_rng)?;
        let mut registry = KeyRegistry::default();
        let mut key = |node: NodeId| {
            let k = keygen(&key_seed, node);
            registry.insert(node, k.public_key());
            k
        };
        let sensor_keys: Vec<KeyPair> = topo.sensors.iter().map(|s| key(s.node)).collect();
        let gateway_ids: Vec<NodeId> = topo.gateways.iter().map(|g| g.node).collect();
        let station_ids: Vec<NodeId> = topo.stations.iter().map(|s| s.node).collect();
        let gateway_keys: Vec<KeyPair> = gateway_ids.iter().map(|g| key(*g)).collect();
        let station_keys: Vec<KeyPair> = station_ids.iter().map(|s| key(*s)).collect();

        let p = &cfg.protocol;
        let params = ConsensusParams {
            x: station_ids.len(),
            y: gateway_ids.len(),
            t_th: p.t_th,
            t_w: p.t_w,
            max_retry_rounds: p.max_retry_rounds,
        };
        let gw_params = GatewayParams {
            neighbor_window: p.neighbor_window,
            tolerance: p.tolerance,
            near_radius_km: p.near_radius_km,
            expiry_horizon: p.expiry_horizon,
            max_deferred_ticks: p.max_deferred_ticks,
            data_validation: cfg.consensus == ConsensusMode::Quico,
            service_id: 1,
        };
        let sensor_ids: Vec<NodeId> = topo.sensors.iter().map(|s| s.node).collect();
        let adversary = AdversaryState::new(cfg.adversary.clone(), &sensor_ids, &gateway_ids, &mut adv_rng);

        let mut gateways: Vec<GatewayState> = gateway_keys
            .into_iter()
            .map(|k| GatewayState::new(k, gw_params.clone()))
            .collect();
        for (i, s) in topo.sensors.iter().enumerate() {
            let g = topo.sensor_gateway[i] as usize;
            let route = &topo.sensor_routes[i];
            gateways[g].add_sensor(s.node, (s.x_km, s.y_km), route[..route.len() - 1].to_vec());
        }
        for g in &mut gateways {
            g.malicious = adversary.is_malicious(g.id);
        }
        let stations: Vec<HapsState> = station_keys
            .into_iter()
            .map(|k| HapsState::new(k, station_ids.clone(), gateway_ids.clone(), params))
            .collect();

        let sim_us = cfg.sim_time * 1000;
        let drain_us = cfg.drain_time * 1000;
        let nodes = topo.network_nodes() + 1;
        Ok(Self {
            cfg,
            link: LinkModel::from(&cfg.network),
            now: 0,
            seq: 0,
            heap: BinaryHeap::new(),
            net_rng,
            data_rng,
            adv_rng,
            checker: SignatureChecker::new(registry),
            sensor_keys,
            voters: (0..gateways.len()).map(|_| GatewayVoter::default()).collect(),
            gateways,
            stations,
            station_ids,
            gateway_ids,
            params,
            adversary,
            env: EnvModel::constant(cfg.env.value, cfg.env.noise_sigma, cfg.env.noise_band),
            energy: EnergyLedger::new(&cfg.energy, topo.sensors.len()),
            cpus: (0..nodes).map(|_| Cpu::default()).collect(),
            tx_free: HashMap::new(),
            link_last: HashMap::new(),
            events: Vec::new(),
            data_events: 0,
            control_events: 0,
            max_link_delay_us: 0,
            processed: 0,
            sim_us,
            propose_until_us: sim_us + drain_us / 2,
            end_us: sim_us + drain_us,
            topo,
        })
    }

    fn push(&mut self, at: u64, ev: Ev) {
        self.seq += 1;
        self.heap.push(Queued { at, seq: self.seq, ev });
    }

    fn cpu_index(&self, node: NodeId) -> usize {
        let s = self.topo.sensors.len();
        let g = self.gateways.len();
        match node.role {
            Role::Sensor | Role::ClusterHead => node.index as usize,
            Role::Gateway => s + node.index as usize,
            Role::HapsStation => s + g + node.index as usize,
            _ => self.cpus.len() - 1,
        }
    }

    fn start(&mut self) {
        if self.sim_us == 0 {
            return;
        }
        let interval = self.cfg.protocol.report_interval.max(1);
        for i in 0..self.topo.sensors.len() {
            let phase = self.data_rng.gen_range(0..interval) * 1000;
            if phase < self.sim_us {
                let node = NodeId::sensor(i as u32);
                self.push(phase, Ev::Job { node, job: Job::Report });
            }
        }
        if self.cfg.blockchain_enabled {
            let period = self.cfg.protocol.aggregation_period.max(1) * 1000;
            for g in self.gateway_ids.clone() {
                self.push(period, Ev::Job {
                    node: g,
                    job: Job::Aggregate,
                });
            }
            for i in 0..self.stations.len() {
                if let Some((at, timer)) = self.stations[i].initial_timer() {
                    let node = self.station_ids[i];
                    self.push(at * 1000, Ev::Job {
                        node,
                        job: Job::Timer(timer),
                    });
                }
            }
            let interval = self.cfg.adversary.attack_interval * 1000;
            if self.adversary.malicious_gateway_count() > 0 && interval > 0 && interval < self.sim_us {
                self.push(interval, Ev::AttackTick);
            }
        }
    }

    fn event_loop(&mut self) -> Result<(), SimError> {
        while let Some(q) = self.heap.pop() {
            if q.at > self.end_us {
                break;
            }
            debug_assert!(q.at >= self.now);
            self.now = q.at;
            self.processed += 1;
            match q.ev {
                Ev::Job { node, job } => self.enqueue(node, job),
                Ev::CpuRun { node } => self.cpu_run(node)?,
                Ev::Hop {
                    node,
                    origin,
                    msg,
                    dests,
                } => self.on_hop(node, origin, msg, dests)?,
                Ev::AttackTick => {
                    self.adversary.attack_tick();
                    let next = self.now + self.cfg.adversary.attack_interval * 1000;
                    if next < self.sim_us {
                        self.push(next, Ev::AttackTick);
                    }
                }
                Ev::Fix { gateway } => self.apply_fix(gateway),
            }
        }
        Ok(())
    }

    fn finish(mut self) -> RunOutput {
        let completed_early = self.sim_us > 0 && self.now < self.sim_us && self.heap.is_empty();
        self.events.sort_by_key(SimEvent::at_us);
        let totals = RunTotals {
            data_packet_events: self.data_events,
            control_packet_events: self.control_events,
            network_nodes: self.topo.network_nodes() as u64,
            sensor_energy_used: self.energy.used(),
            max_link_delay_us: self.max_link_delay_us,
            station_chains: self.stations.iter().map(HapsState::chain_hashes).collect(),
            sabotage_actions: self.adversary.actions().to_vec(),
            false_positives: self.adversary.false_positives,
            events_processed: self.processed,
            completed_early,
        };
        let ctx = ReportContext {
            mode: self.cfg.consensus.as_str().to_string(),
            seed: self.cfg.seed,
            sim_time: self.cfg.sim_time,
            t_th: self.cfg.protocol.t_th,
            t_w: self.cfg.protocol.t_w,
            blockchain_enabled: self.cfg.blockchain_enabled,
            tx_payload_size: self.cfg.tx_payload_size,
            pmn: self.cfg.adversary.pmn,
            stations: self.stations.len() as u32,
        };
        let report = finalize(&self.events, &totals, &ctx);
        RunOutput {
            report,
            events: self.events,
        }
    }

    fn count(&mut self, msg: &Msg, n: usize) {
        if self.now <= self.sim_us {
            if msg.data {
                self.data_events += n as u64;
            } else {
                self.control_events += n as u64;
            }
        }
    }

    fn enqueue(&mut self, node: NodeId, job: Job) {
        let i = self.cpu_index(node);
        let cpu = &mut self.cpus[i];
        cpu.queue.push_back(job);
        if !cpu.busy {
            cpu.busy = true;
            let now = self.now;
            self.push(now, Ev::CpuRun { node });
        }
    }

    fn cpu_run(&mut self, node: NodeId) -> Result<(), SimError> {
        let i = self.cpu_index(node);
        let Some(job) = self.cpus[i].queue.pop_front() else {
            self.cpus[i].busy = false;
            return Ok(());
        };
        let checks_before = self.checker.checks;
        let mut fx = Effects::default();
        let (cost_model, in_bytes) = self.execute(node, job, &mut fx);
        let verifies = self.checker.checks - checks_before;
        let cost = cost_model.per_message
            + verifies * cost_model.verify
            + fx.signs * cost_model.sign
            + in_bytes * cost_model.hash_per_kb / 1024;
        let done = self.now + cost;
        for mut e in fx.events.drain(..) {
            *e.at_us_mut() = done;
            self.events.push(e);
        }
        for (at_ms, timer) in fx.timers.drain(..) {
            self.push((at_ms * 1000).max(done), Ev::Job {
                node,
                job: Job::Timer(timer),
            });
        }
        for (dests, msg, forwarded) in std::mem::take(&mut fx.sends) {
            let _ = forwarded;
            self.count(&msg, dests.len());
            self.transmit(node, node, msg, dests, done)?;
        }
        self.push(done, Ev::CpuRun { node });
        Ok(())
    }

    /// Sends one message towards `dests`, grouping recipients that share a
    /// next hop. A station reaches all of its gateways with one transmission.
    fn transmit(
        &mut self,
        from: NodeId,
        origin: NodeId,
        msg: Rc<Msg>,
        dests: Vec<NodeId>,
        ready: u64,
    ) -> Result<(), SimError> {
        if from.role == Role::Sensor && !self.energy.debit_tx(from.index as usize, msg.size) {
            return Ok(());
        }
        let mut groups: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for d in dests {
            let next = if from.role == Role::Sensor {
                d
            } else {
                self.topo.route(from, d)?[0]
            };
            groups.entry(next).or_default().push(d);
        }
        let from_site = self.topo.site(from).expect("sender is placed");
        let mut broadcast: Option<(u64, u64)> = None;
        for (next, group) in groups {
            let class = match (from.role, next.role) {
                (Role::Sensor, _) => LinkClass::Sensor,
                (Role::Gateway, _) => LinkClass::GatewayUplink,
                (Role::HapsStation, Role::Gateway) => LinkClass::StationAccess,
                _ => LinkClass::StationPeer,
            };
            let ser = self.link.serialization_us(msg.size, class);
            let start = match (class, broadcast) {
                (LinkClass::StationAccess, Some((start, _))) => start,
                _ => {
                    let free = self.tx_free.entry((from, class)).or_insert(0);
                    let start = ready.max(*free);
                    *free = start + ser;
                    if class == LinkClass::StationAccess {
                        broadcast = Some((start, ser));
                    }
                    start
                }
            };
            let to_site = self.topo.site(next).expect("next hop is placed");
            let base = ser + self.link.propagation_us(from_site.distance_km(&to_site));
            let delay = self.link.jittered(base, &mut self.net_rng);
            self.max_link_delay_us = self.max_link_delay_us.max(delay);
            let last = self.link_last.entry((from, next)).or_insert(0);
            let arrival = (start + delay).max(*last);
            *last = arrival;
            self.push(arrival, Ev::Hop {
                node: next,
                origin,
                msg: msg.clone(),
                dests: group,
            });
        }
        Ok(())
    }

    fn on_hop(&mut self, node: NodeId, origin: NodeId, msg: Rc<Msg>, mut dests: Vec<NodeId>) -> Result<(), SimError> {
        if node.role == Role::Sensor && !self.energy.debit_rx(node.index as usize, msg.size) {
            return Ok(());
        }
        let here = dests.iter().position(|d| *d == node);
        if let Some(pos) = here {
            dests.remove(pos);
            self.count(&msg, 1);
            if node.role == Role::Admin {
                self.on_admin(&msg);
            } else {
                self.enqueue(node, Job::Deliver { from: origin, msg: msg.clone() });
            }
        }
        if !dests.is_empty() {
            self.count(&msg, dests.len());
            let now = self.now;
            self.transmit(node, origin, msg, dests, now)?;
        }
        Ok(())
    }

    fn execute(&mut self, node: NodeId, job: Job, fx: &mut Effects) -> (CpuCost, u64) {
        match node.role {
            Role::Sensor | Role::ClusterHead => {
                let bytes = self.sensor_job(node, job, fx);
                (self.cfg.cpu.sensor, bytes)
            }
            Role::Gateway => {
                let bytes = self.gateway_job(node, job, fx);
                (self.cfg.cpu.gateway, bytes)
            }
            _ => {
                let bytes = self.station_job(node, job, fx);
                (self.cfg.cpu.station, bytes)
            }
        }
    }

    fn now_ms(&self) -> Millis {
        self.now / 1000
    }

    fn next_hop(&self, sender: NodeId, at: NodeId) -> Option<NodeId> {
        let route = &self.topo.sensor_routes[sender.index as usize];
        if at == sender {
            return route.first().copied();
        }
        let pos = route.iter().position(|n| *n == at)?;
        route.get(pos + 1).copied()
    }

    fn sensor_job(&mut self, node: NodeId, job: Job, fx: &mut Effects) -> u64 {
        let i = node.index as usize;
        match job {
            Job::Report => {
                if self.now >= self.sim_us || !self.energy.is_alive(i) {
                    return 0;
                }
                let next = self.now + self.cfg.protocol.report_interval.max(1) * 1000;
                if next < self.sim_us {
                    self.push(next, Ev::Job { node, job: Job::Report });
                }
                let site = self.topo.sensors[i];
                let malicious = self.adversary.is_malicious(node);
                let Ok(reading) = generate_reading(
                    &site,
                    self.now_ms(),
                    &self.env,
                    malicious,
                    self.cfg.adversary.falsification_offset,
                    self.cfg.tx_payload_size,
                    &mut self.data_rng,
                ) else {
                    return 0;
                };
                self.events.push(SimEvent::ReadingGenerated {
                    at_us: self.now,
                    reading: ReadingRef {
                        sensor: node,
                        timestamp: reading.timestamp,
                        malicious,
                    },
                });
                let Some(hop) = self.next_hop(node, node) else {
                    return 0;
                };
                if self.cfg.blockchain_enabled {
                    fx.signs += 1;
                    fx.send(vec![hop], Payload::Data(DataPacket::new(vec![reading], &self.sensor_keys[i])));
                } else {
                    fx.send(vec![hop], Payload::Raw(vec![reading]));
                }
                0
            }
            Job::Deliver { msg, .. } => {
                let size = msg.size;
                match &msg.payload {
                    Payload::Raw(rs) => {
                        if let Some(hop) = rs.first().and_then(|r| self.next_hop(r.sensor, node)) {
                            fx.forward(hop, Payload::Raw(rs.clone()));
                        }
                    }
                    Payload::Data(pkt) => {
                        let Some(hop) = self.next_hop(pkt.sender, node) else {
                            return size;
                        };
                        let key = &self.sensor_keys[i];
                        let out = if self.cfg.consensus != ConsensusMode::Quico {
                            Some(pkt.clone())
                        } else if self.adversary.is_malicious(node) {
                            fx.signs += 1;
                            Some(endorse(pkt.clone(), key))
                        } else {
                            let site = self.topo.sensors[i];
                            let local = self.env.sample(site.x_km, site.y_km, &mut self.data_rng);
                            match validate_and_endorse(pkt.clone(), key, local, self.cfg.protocol.tolerance, &mut self.checker) {
                                Ok(EndorseOutcome::Endorsed(p)) => {
                                    fx.signs += 1;
                                    Some(p)
                                }
                                Ok(EndorseOutcome::ForwardUnendorsed(p)) => Some(p),
                                Ok(EndorseOutcome::Reject) | Err(_) => None,
                            }
                        };
                        if let Some(p) = out {
                            fx.forward(hop, Payload::Data(p));
                        }
                    }
                    Payload::Consensus(_) => {}
                }
                size
            }
            Job::Timer(_) | Job::Aggregate => 0,
        }
    }

    /// Pulls headers the gateway missed from its station.
    fn sync_headers(&mut self, g: usize, height: u64) {
        let home = self.topo.home_station[g] as usize;
        let gw = &mut self.gateways[g];
        let chain = &self.stations[home].chain;
        while gw.headers.height() + 1 < height {
            let next = gw.headers.height() as usize + 1;
            let Some(block) = chain.get(next) else {
                break;
            };
            if gw.headers.append(block.header.clone()).is_err() {
                break;
            }
            for tx in &block.body {
                gw.pending.remove(&tx.id);
            }
        }
    }

    fn gateway_job(&mut self, node: NodeId, job: Job, fx: &mut Effects) -> u64 {
        let g = node.index as usize;
        let now_ms = self.now_ms();
        let home = self.topo.home_of(node);
        match job {
            Job::Aggregate => {
                let next = self.now + self.cfg.protocol.aggregation_period.max(1) * 1000;
                if next < self.propose_until_us {
                    self.push(next, Ev::Job {
                        node,
                        job: Job::Aggregate,
                    });
                }
                let outcome = self.gateways[g].aggregate(now_ms);
                for (verdict, pkt) in &outcome.resolved {
                    if let IngestOutcome::Discarded(reason) = verdict {
                        fx.events.push(SimEvent::PacketDiscarded {
                            at_us: 0,
                            gateway: node,
                            malicious_readings: pkt.readings.iter().filter(|r| r.secret_malicious_flag).count() as u32,
                            reason: format!("{reason:?}"),
                        });
                    }
                }
                if let Some(tx) = outcome.transaction {
                    fx.signs += 1;
                    fx.send(vec![home], Payload::Consensus(ConsensusMessage::Transaction(tx)));
                }
                0
            }
            Job::Deliver { msg, .. } => {
                let size = msg.size;
                match &msg.payload {
                    Payload::Raw(rs) => fx.forward(home, Payload::Raw(rs.clone())),
                    Payload::Data(pkt) => {
                        let malicious = pkt.readings.iter().filter(|r| r.secret_malicious_flag).count() as u32;
                        if let IngestOutcome::Discarded(reason) =
                            self.gateways[g].ingest_packet(pkt.clone(), now_ms, &mut self.checker)
                        {
                            fx.events.push(SimEvent::PacketDiscarded {
                                at_us: 0,
                                gateway: node,
                                malicious_readings: malicious,
                                reason: format!("{reason:?}"),
                            });
                        }
                    }
                    Payload::Consensus(m) => self.gateway_consensus(g, m, fx),
                }
                size
            }
            Job::Timer(_) | Job::Report => 0,
        }
    }

    fn gateway_consensus(&mut self, g: usize, m: &ConsensusMessage, fx: &mut Effects) {
        let node = self.gateway_ids[g];
        let now_ms = self.now_ms();
        match m {
            ConsensusMessage::NewBlock(nb) => {
                if !nb.verify(&mut self.checker) {
                    return;
                }
                let height = nb.block.header.height;
                self.sync_headers(g, height);
                let Ok(Some(mut vote)) = self.gateways[g].on_new_block(&nb.block) else {
                    return;
                };
                if self.adversary.is_armed(node) {
                    if let Some(err) = sabotage_vote(&self.gateways[g].key, &nb.block, &mut self.checker, &mut self.adv_rng) {
                        self.adversary.take_sabotage(node, now_ms, height);
                        fx.events.push(SimEvent::Sabotage {
                            at_us: 0,
                            gateway: node,
                            height,
                        });
                        vote = Vote::Error(err);
                    }
                }
                fx.signs += 1;
                let msg = match vote {
                    Vote::Ack(a) => ConsensusMessage::BlockAck(a),
                    Vote::Error(e) => ConsensusMessage::BlockError(e),
                };
                fx.send(vec![nb.creator], Payload::Consensus(msg));
            }
            ConsensusMessage::BlockConfirm(c) => {
                let quorum = self.params.confirm_quorum();
                if c.header.height > self.gateways[g].headers.height() + 1 {
                    self.sync_headers(g, c.header.height);
                }
                let _ = self.gateways[g].on_block_confirm(c, quorum, &mut self.checker);
            }
            ConsensusMessage::ErrorCheck(check) => {
                if !check.verify(&mut self.checker) {
                    return;
                }
                fx.signs += 1;
                let res = self.gateways[g].on_error_check(check);
                fx.send(vec![check.creator], Payload::Consensus(ConsensusMessage::ErrorResolve(res)));
            }
            ConsensusMessage::ErrorDecision(d) => {
                let _ = d.verify(&mut self.checker);
            }
            ConsensusMessage::PrePrepare(pp) => {
                let height = pp.block.header.height;
                self.sync_headers(g, height);
                let mut sabotage = false;
                if self.adversary.is_armed(node)
                    && height == self.gateways[g].headers.height() + 1
                    && pp.block.body.iter().any(|t| transaction_signatures_valid(t, &mut self.checker))
                {
                    sabotage = self.adversary.take_sabotage(node, now_ms, height);
                    fx.events.push(SimEvent::Sabotage {
                        at_us: 0,
                        gateway: node,
                        height,
                    });
                }
                let out = self.voters[g].on_preprepare(
                    &mut self.gateways[g],
                    pp,
                    &self.station_ids,
                    &self.gateway_ids,
                    sabotage,
                    &mut self.checker,
                );
                self.absorb_outbox(node, out, fx);
            }
            ConsensusMessage::Commit(c) => {
                let n = self.station_ids.len() + self.gateway_ids.len();
                self.voters[g].on_commit(&mut self.gateways[g], c, n, &mut self.checker);
            }
            _ => {}
        }
    }

    fn station_job(&mut self, node: NodeId, job: Job, fx: &mut Effects) -> u64 {
        let s = node.index as usize;
        let now_ms = self.now_ms();
        let baseline = self.cfg.consensus == ConsensusMode::PbftBaseline;
        match job {
            Job::Timer(timer) => {
                if matches!(timer, Timer::CreatorFire { .. }) && self.now >= self.propose_until_us {
                    return 0;
                }
                let out = if baseline {
                    self.stations[s].baseline_on_timer(timer, now_ms)
                } else {
                    self.stations[s].quico_on_timer(timer, now_ms, &mut self.checker)
                };
                self.absorb_outbox(node, out, fx);
                0
            }
            Job::Deliver { from, msg } => {
                let Payload::Consensus(m) = &msg.payload else {
                    return msg.size;
                };
                let st = &mut self.stations[s];
                let c = &mut self.checker;
                let out = match m {
                    ConsensusMessage::Transaction(tx) => st.on_transaction(tx.clone(), from, now_ms, c),
                    ConsensusMessage::NewBlock(nb) => st.quico_on_new_block(nb, c),
                    ConsensusMessage::BlockAck(a) => st.on_block_ack(a, now_ms, c),
                    ConsensusMessage::BlockError(e) => st.on_block_error(e, now_ms, c),
                    ConsensusMessage::ErrorResolve(r) => st.on_error_resolve(r, now_ms, c),
                    ConsensusMessage::BlockConfirm(bc) => st.quico_on_block_confirm(bc, now_ms, c),
                    ConsensusMessage::PrePrepare(pp) => st.baseline_on_preprepare(pp, now_ms, c),
                    ConsensusMessage::Commit(cm) => st.baseline_on_commit(cm, now_ms, c),
                    _ => Outbox::default(),
                };
                self.absorb_outbox(node, out, fx);
                msg.size
            }
            Job::Report | Job::Aggregate => 0,
        }
    }

    fn absorb_outbox(&mut self, node: NodeId, out: Outbox, fx: &mut Effects) {
        for (to, m) in out.sends {
            if !matches!(m, ConsensusMessage::Transaction(_)) {
                fx.signs += 1;
            }
            fx.send(to, Payload::Consensus(m));
        }
        fx.timers.extend(out.timers);
        for e in out.events {
            let ev = match e {
                ProtocolEvent::BlockProposed { height, seq } => SimEvent::BlockProposed {
                    at_us: 0,
                    height,
                    seq,
                    creator: node,
                },
                ProtocolEvent::BlockAppended { station, height, hash } => SimEvent::BlockAppended {
                    at_us: 0,
                    station,
                    height,
                    hash,
                },
                ProtocolEvent::BlockConfirmed { block } => SimEvent::BlockConfirmed {
                    at_us: 0,
                    height: block.header.height,
                    creator: node,
                    hash: block.hash(),
                    transactions: block.body.len() as u32,
                    readings: readings_of(&block),
                },
                ProtocolEvent::BlockRejected { height, seq } => SimEvent::BlockRejected { at_us: 0, height, seq },
                ProtocolEvent::Escalated { height } => SimEvent::Escalated { at_us: 0, height },
                ProtocolEvent::DisputeDropped { id } => SimEvent::DisputeDropped { at_us: 0, tx: id },
                ProtocolEvent::TransactionInvalid { .. } | ProtocolEvent::TransactionExpired { .. } => continue,
            };
            fx.events.push(ev);
        }
    }

    fn on_admin(&mut self, msg: &Msg) {
        let Payload::Consensus(ConsensusMessage::WarningReport(report)) = &msg.payload else {
            return;
        };
        if !report.verify(&mut self.checker) {
            return;
        }
        let response = self.adversary.admin_respond(report);
        self.events.push(SimEvent::Warning {
            at_us: self.now,
            reporter: report.reporter,
            reason: report.reason,
            suspects: report.suspects.clone(),
        });
        let at = self.now + self.cfg.adversary.fix_delay * 1000;
        for gateway in response.fixes {
            self.push(at, Ev::Fix { gateway });
        }
    }

    fn apply_fix(&mut self, gateway: NodeId) {
        let replacement = self.adversary.apply_fix(gateway, &mut self.adv_rng);
        self.gateways[gateway.index as usize].malicious = false;
        if let Some(r) = replacement {
            self.gateways[r.index as usize].malicious = true;
        }
        self.events.push(SimEvent::GatewayFixed {
            at_us: self.now,
            gateway,
            replacement,
        });
    }
}
