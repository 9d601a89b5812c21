//! Sensor and cluster-head behaviour: sampling, packet signing, in-path
//! validation/endorsement, and cluster construction.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical_struct;
use crate::codec::Canonical;
use crate::crypto::{sign, KeyPair, Signature, SignatureChecker};
use crate::primitives::{Endorsement, Millis, NodeId, Reading, Role};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WsnError {
    #[error("packet carries no readings")]
    MalformedPacket,
    #[error("sensor {0} cannot reach any cluster head within range")]
    DisconnectedSensor(NodeId),
    #[error("no sensor positions given")]
    NoSensors,
    #[error("duplicate sensor position or id: {0}")]
    DuplicateSensor(NodeId),
    #[error("{0} is not a sensor")]
    NotASensor(NodeId),
}

/// Scalar quantity being monitored, as a function of position (km) and time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Field {
    Constant { value: f64 },
    /// `base + amplitude * sin(2πx/λ) * cos(2πy/λ)`, static in time.
    Sinusoid {
        base: f64,
        amplitude: f64,
        wavelength_km: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvModel {
    pub field: Field,
    /// Standard deviation of per-sample sensor noise.
    pub noise_sigma: f64,
    /// Noise is truncated to `±noise_band`.
    pub noise_band: f64,
}

impl EnvModel {
    pub fn constant(value: f64, noise_sigma: f64, noise_band: f64) -> Self {
        Self {
            field: Field::Constant { value },
            noise_sigma,
            noise_band,
        }
    }

    pub fn value_at(&self, x_km: f64, y_km: f64) -> f64 {
        match self.field {
            Field::Constant { value } => value,
            Field::Sinusoid {
                base,
                amplitude,
                wavelength_km,
            } => {
                let k = std::f64::consts::TAU / wavelength_km;
                base + amplitude * (k * x_km).sin() * (k * y_km).cos()
            }
        }
    }

    /// Draws truncated Gaussian noise by rejection.
    pub fn noise<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.noise_sigma <= 0.0 || self.noise_band <= 0.0 {
            return 0.0;
        }
        let normal = Normal::new(0.0, self.noise_sigma).expect("positive sigma");
        loop {
            let n: f64 = normal.sample(rng);
            if n.abs() <= self.noise_band {
                return n;
            }
        }
    }

    /// What an honest sensor at `(x, y)` measures.
    pub fn sample<R: Rng>(&self, x_km: f64, y_km: f64, rng: &mut R) -> f64 {
        self.value_at(x_km, y_km) + self.noise(rng)
    }
}

/// Where a sensor sits and what it sends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorSite {
    pub node: NodeId,
    pub x_km: f64,
    pub y_km: f64,
}

/// Produces one reading. Malicious sensors displace the true value by
/// `falsification_offset` and carry the secret ground-truth flag.
#[allow(clippy::too_many_arguments)]
pub fn generate_reading<R: Rng>(
    site: &SensorSite,
    now: Millis,
    env: &EnvModel,
    malicious: bool,
    falsification_offset: f64,
    wire_size: u32,
    rng: &mut R,
) -> Result<Reading, WsnError> {
    if site.node.role != Role::Sensor {
        return Err(WsnError::NotASensor(site.node));
    }
    let honest = env.sample(site.x_km, site.y_km, rng);
    let value = if malicious {
        honest + falsification_offset
    } else {
        honest
    };
    let mut payload = value.to_be_bytes().to_vec();
    payload.extend_from_slice(&site.node.index.to_be_bytes());
    let wire_size = wire_size.max(payload.len() as u32);
    Ok(Reading {
        sensor: site.node,
        timestamp: now,
        payload,
        wire_size,
        value,
        secret_malicious_flag: malicious,
    })
}

/// Readings plus the sender; this is what the sender and every endorser sign.
#[derive(Debug, Clone, PartialEq)]
struct PacketContent {
    readings: Vec<Reading>,
    sender: NodeId,
}

canonical_struct!(PacketContent { readings, sender });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPacket {
    pub readings: Vec<Reading>,
    pub sender: NodeId,
    pub sender_signature: Signature,
    pub endorsements: Vec<Endorsement>,
    /// Nodes that have handled the packet after the sender, in order.
    pub hop_trace: Vec<NodeId>,
}

canonical_struct!(DataPacket {
    readings,
    sender,
    sender_signature,
    endorsements,
    hop_trace,
});

impl DataPacket {
    pub fn new(readings: Vec<Reading>, key: &KeyPair) -> Self {
        let content = PacketContent {
            readings,
            sender: key.owner,
        };
        let sender_signature = sign(&content.canonical_bytes(), key);
        Self {
            readings: content.readings,
            sender: content.sender,
            sender_signature,
            endorsements: Vec::new(),
            hop_trace: Vec::new(),
        }
    }

    pub fn signed_bytes(&self) -> Vec<u8> {
        // Borrowing encoder: avoids cloning the readings.
        let mut out = Vec::new();
        self.readings.encode_to(&mut out);
        self.sender.encode_to(&mut out);
        out
    }

    pub fn sender_signature_valid(&self, checker: &mut SignatureChecker) -> bool {
        self.sender_signature.signer == self.sender
            && checker.check(&self.signed_bytes(), &self.sender_signature)
    }

    /// Every endorsement verifies and was made by a node in the hop trace.
    pub fn endorsements_valid(&self, checker: &mut SignatureChecker) -> bool {
        let content = self.signed_bytes();
        self.endorsements.iter().all(|e| {
            e.signature.signer == e.endorser
                && self.hop_trace.contains(&e.endorser)
                && checker.check(&content, &e.signature)
        })
    }

    pub fn endorsers(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.endorsements.iter().map(|e| e.endorser)
    }

    pub fn wire_len(&self) -> u64 {
        self.canonical_bytes().len() as u64 + self.readings.iter().map(Reading::padding).sum::<u64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EndorseOutcome {
    Endorsed(DataPacket),
    ForwardUnendorsed(DataPacket),
    Reject,
}

/// Relative deviation `|observed - reference| / |reference|`; absolute when
/// the reference is zero.
pub fn relative_deviation(observed: f64, reference: f64) -> f64 {
    let diff = (observed - reference).abs();
    if reference == 0.0 {
        diff
    } else {
        diff / reference.abs()
    }
}

/// Checks a packet at an intermediate hop and endorses it when the data agrees
/// with the hop's own contemporaneous reading.
pub fn validate_and_endorse(
    mut packet: DataPacket,
    at: &KeyPair,
    local_value: f64,
    tolerance: f64,
    checker: &mut SignatureChecker,
) -> Result<EndorseOutcome, WsnError> {
    if packet.readings.is_empty() {
        return Err(WsnError::MalformedPacket);
    }
    if !packet.sender_signature_valid(checker) {
        return Ok(EndorseOutcome::Reject);
    }
    packet.hop_trace.push(at.owner);
    let consistent = packet
        .readings
        .iter()
        .all(|r| relative_deviation(r.value, local_value) <= tolerance);
    if !consistent {
        return Ok(EndorseOutcome::ForwardUnendorsed(packet));
    }
    Ok(EndorseOutcome::Endorsed(endorse(packet, at)))
}

/// Appends `at`'s endorsement without checking the data.
pub fn endorse(mut packet: DataPacket, at: &KeyPair) -> DataPacket {
    if packet.hop_trace.last() != Some(&at.owner) {
        packet.hop_trace.push(at.owner);
    }
    let signature = sign(&packet.signed_bytes(), at);
    packet.endorsements.push(Endorsement {
        endorser: at.owner,
        signature,
    });
    packet
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub id: u32,
    pub head: NodeId,
    pub members: Vec<NodeId>,
    /// Path from each member to the head, excluding the member, ending at the head.
    /// The head's own route is empty.
    pub intra_routes: BTreeMap<NodeId, Vec<NodeId>>,
    /// First hop from the head towards its gateway, filled in by the topology builder.
    pub uplink: Option<NodeId>,
}

pub fn distance_km(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// BFS shortest hop path inside `nodes` from `from` to `to` under `range_km`.
/// Returned path excludes `from` and ends with `to`.
pub fn hop_path(
    nodes: &[SensorSite],
    from: usize,
    to: usize,
    range_km: f64,
) -> Option<Vec<usize>> {
    if from == to {
        return Some(Vec::new());
    }
    let mut prev = vec![usize::MAX; nodes.len()];
    let mut queue = VecDeque::from([to]);
    prev[to] = to;
    // Search backwards from the destination so ties break towards low indices near `to`.
    while let Some(cur) = queue.pop_front() {
        for next in 0..nodes.len() {
            if prev[next] != usize::MAX {
                continue;
            }
            let d = distance_km(
                (nodes[cur].x_km, nodes[cur].y_km),
                (nodes[next].x_km, nodes[next].y_km),
            );
            if d <= range_km {
                prev[next] = cur;
                if next == from {
                    let mut path = Vec::new();
                    let mut at = from;
                    while at != to {
                        at = prev[at];
                        path.push(at);
                    }
                    return Some(path);
                }
                queue.push_back(next);
            }
        }
    }
    None
}

/// Greedy geographic clustering.
///
/// The lowest-index unassigned sensor seeds a cluster that takes every
/// unassigned sensor within `cluster_radius_km` of it. The head is the member
/// nearest the cluster centroid (ties to the lowest index), and member routes
/// are shortest hop paths inside the cluster under `range_km`.
pub fn build_cluster_topology(
    sites: &[SensorSite],
    cluster_radius_km: f64,
    range_km: f64,
) -> Result<Vec<Cluster>, WsnError> {
    if sites.is_empty() {
        return Err(WsnError::NoSensors);
    }
    let mut order: Vec<usize> = (0..sites.len()).collect();
    order.sort_by_key(|&i| sites[i].node);
    for w in order.windows(2) {
        let (a, b) = (&sites[w[0]], &sites[w[1]]);
        if a.node == b.node || (a.x_km == b.x_km && a.y_km == b.y_km) {
            return Err(WsnError::DuplicateSensor(b.node));
        }
    }
    for s in sites {
        if s.node.role != Role::Sensor {
            return Err(WsnError::NotASensor(s.node));
        }
    }

    let mut assigned = vec![false; sites.len()];
    let mut clusters = Vec::new();
    for &seed in &order {
        if assigned[seed] {
            continue;
        }
        let seed_pos = (sites[seed].x_km, sites[seed].y_km);
        let member_idx: Vec<usize> = order
            .iter()
            .copied()
            .filter(|&i| {
                !assigned[i] && distance_km(seed_pos, (sites[i].x_km, sites[i].y_km)) <= cluster_radius_km
            })
            .collect();
        for &i in &member_idx {
            assigned[i] = true;
        }
        let n = member_idx.len() as f64;
        let cx = member_idx.iter().map(|&i| sites[i].x_km).sum::<f64>() / n;
        let cy = member_idx.iter().map(|&i| sites[i].y_km).sum::<f64>() / n;
        let head_local = (0..member_idx.len())
            .min_by(|&a, &b| {
                let da = distance_km((cx, cy), (sites[member_idx[a]].x_km, sites[member_idx[a]].y_km));
                let db = distance_km((cx, cy), (sites[member_idx[b]].x_km, sites[member_idx[b]].y_km));
                da.total_cmp(&db)
                    .then(sites[member_idx[a]].node.cmp(&sites[member_idx[b]].node))
            })
            .expect("cluster has its seed");

        let local: Vec<SensorSite> = member_idx.iter().map(|&i| sites[i]).collect();
        let mut intra_routes = BTreeMap::new();
        for (li, site) in local.iter().enumerate() {
            let path = hop_path(&local, li, head_local, range_km)
                .ok_or(WsnError::DisconnectedSensor(site.node))?;
            intra_routes.insert(site.node, path.into_iter().map(|p| local[p].node).collect());
        }
        clusters.push(Cluster {
            id: clusters.len() as u32,
            head: local[head_local].node,
            members: local.iter().map(|s| s.node).collect(),
            intra_routes,
            uplink: None,
        });
    }
    Ok(clusters)
}
