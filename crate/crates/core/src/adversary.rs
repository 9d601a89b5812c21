//! Fault injection: which nodes are compromised, when compromised gateways
//! strike, and how the administrator reacts to warning reports.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::crypto::{KeyPair, SignatureChecker};
use crate::gateway::transaction_signatures_valid;
use crate::haps::messages::{BlockError, Commit, CommitContent, ErrorContent, WarningReport};
use crate::primitives::{Block, Millis, NodeId, Role};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdversaryConfig {
    /// Fraction of sensors and of gateways that start compromised.
    pub pmn: f64,
    /// Period of the sabotage schedule.
    pub attack_interval: Millis,
    /// Displacement applied to readings of compromised sensors.
    pub falsification_offset: f64,
    /// Compromise a fresh gateway for every one that is fixed.
    pub reselect: bool,
    /// Delay between a warning and the fix of the named gateway.
    pub fix_delay: Millis,
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        Self {
            pmn: 0.30,
            attack_interval: 10_000,
            falsification_offset: 75.0,
            reselect: true,
            fix_delay: 500,
        }
    }
}

/// `floor(pmn * n)`, tolerant of binary rounding such as `0.57 * 100`.
pub fn malicious_count(pmn: f64, n: usize) -> usize {
    ((pmn * n as f64) + 1e-9).floor() as usize
}

/// Uniform choice without replacement of `floor(pmn * n)` sensors and
/// `floor(pmn * n)` gateways.
pub fn select_malicious<R: Rng>(
    sensors: &[NodeId],
    gateways: &[NodeId],
    pmn: f64,
    rng: &mut R,
) -> BTreeSet<NodeId> {
    let mut chosen = BTreeSet::new();
    for group in [sensors, gateways] {
        let k = malicious_count(pmn, group.len());
        chosen.extend(group.choose_multiple(rng, k).copied());
    }
    chosen
}

/// A Block ERROR against a valid transaction of `block`, carrying a
/// fabricated "pending" version of it. `None` for blocks without a valid
/// transaction.
pub fn sabotage_vote<R: Rng>(
    key: &KeyPair,
    block: &Block,
    checker: &mut SignatureChecker,
    rng: &mut R,
) -> Option<BlockError> {
    let valid: Vec<_> = block
        .body
        .iter()
        .filter(|t| transaction_signatures_valid(t, checker))
        .collect();
    let target = (*valid.choose(rng)?).clone();
    let mut fake = target.clone();
    if let Some(r) = fake.readings.first_mut() {
        r.value += 1.0;
        r.payload = r.value.to_be_bytes().to_vec();
    }
    Some(
        ErrorContent {
            height: block.header.height,
            seq: block.header.sequence_number,
            block_hash: block.hash(),
            voter: key.owner,
            structural: false,
            disputed: vec![target.id],
            claimed_versions: vec![fake],
        }
        .sign(key),
    )
}

/// A baseline REJECT vote against an otherwise acceptable block.
pub fn sabotage_commit(key: &KeyPair, block: &Block) -> Commit {
    CommitContent {
        height: block.header.height,
        seq: block.header.sequence_number,
        block_hash: block.hash(),
        voter: key.owner,
        accept: false,
    }
    .sign(key)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SabotageAction {
    pub gateway: NodeId,
    pub at: Millis,
    pub height: u64,
    pub detected: bool,
}

/// What one warning report led to.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AdminResponse {
    /// Compromised gateways scheduled for a fix.
    pub fixes: Vec<NodeId>,
    /// Sabotage actions newly attributed to their authors.
    pub detections: usize,
    pub false_positives: usize,
}

/// Ground-truth adversary bookkeeping and the administrator's loop.
#[derive(Debug, Clone)]
pub struct AdversaryState {
    pub cfg: AdversaryConfig,
    gateways: Vec<NodeId>,
    malicious: BTreeSet<NodeId>,
    armed: BTreeSet<NodeId>,
    fixing: BTreeSet<NodeId>,
    actions: Vec<SabotageAction>,
    by_gateway: BTreeMap<NodeId, Vec<usize>>,
    pub false_positives: u64,
}

impl AdversaryState {
    pub fn new<R: Rng>(cfg: AdversaryConfig, sensors: &[NodeId], gateways: &[NodeId], rng: &mut R) -> Self {
        let malicious = select_malicious(sensors, gateways, cfg.pmn, rng);
        Self {
            cfg,
            gateways: gateways.to_vec(),
            malicious,
            armed: BTreeSet::new(),
            fixing: BTreeSet::new(),
            actions: Vec::new(),
            by_gateway: BTreeMap::new(),
            false_positives: 0,
        }
    }

    pub fn is_malicious(&self, node: NodeId) -> bool {
        self.malicious.contains(&node)
    }

    pub fn malicious_gateways(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.malicious.iter().copied().filter(|n| n.role == Role::Gateway)
    }

    pub fn malicious_gateway_count(&self) -> usize {
        self.malicious_gateways().count()
    }

    pub fn actions(&self) -> &[SabotageAction] {
        &self.actions
    }

    /// Arms every compromised gateway for one sabotage.
    pub fn attack_tick(&mut self) {
        self.armed = self.malicious_gateways().collect();
    }

    pub fn is_armed(&self, gateway: NodeId) -> bool {
        self.armed.contains(&gateway)
    }

    /// Consumes `gateway`'s sabotage, if armed, and records the action.
    pub fn take_sabotage(&mut self, gateway: NodeId, now: Millis, height: u64) -> bool {
        if !self.armed.remove(&gateway) {
            return false;
        }
        self.by_gateway.entry(gateway).or_default().push(self.actions.len());
        self.actions.push(SabotageAction {
            gateway,
            at: now,
            height,
            detected: false,
        });
        true
    }

    /// Reacts to a warning: attributes the named gateways' undetected
    /// actions, schedules compromised suspects for a fix, and counts
    /// suspects that did nothing wrong at that height.
    pub fn admin_respond(&mut self, report: &WarningReport) -> AdminResponse {
        let mut response = AdminResponse::default();
        for &g in &report.suspects {
            if g.role != Role::Gateway {
                continue;
            }
            let mut acted_here = false;
            for &i in self.by_gateway.get(&g).into_iter().flatten() {
                let a = &mut self.actions[i];
                if a.height == report.height {
                    acted_here = true;
                }
                if !a.detected {
                    a.detected = true;
                    response.detections += 1;
                    acted_here = true;
                }
            }
            if self.malicious.contains(&g) {
                if self.fixing.insert(g) {
                    response.fixes.push(g);
                }
            } else if !acted_here {
                self.false_positives += 1;
                response.false_positives += 1;
            }
        }
        response
    }

    /// Applies a scheduled fix; with reselection on, compromises a
    /// uniformly chosen honest gateway in its place. Returns the new
    /// compromised gateway, if any.
    pub fn apply_fix<R: Rng>(&mut self, gateway: NodeId, rng: &mut R) -> Option<NodeId> {
        self.fixing.remove(&gateway);
        if !self.malicious.remove(&gateway) {
            return None;
        }
        self.armed.remove(&gateway);
        if !self.cfg.reselect {
            return None;
        }
        let honest: Vec<NodeId> = self
            .gateways
            .iter()
            .copied()
            .filter(|g| *g != gateway && !self.malicious.contains(g))
            .collect();
        let pick = *honest.choose(rng)?;
        self.malicious.insert(pick);
        Some(pick)
    }

    /// Fraction of sabotage actions attributed to their author; `None`
    /// without any action.
    pub fn mgdr(&self) -> Option<f64> {
        if self.actions.is_empty() {
            return None;
        }
        let detected = self.actions.iter().filter(|a| a.detected).count();
        Some(detected as f64 / self.actions.len() as f64)
    }
}
