//! HAPS station behaviour: transaction replication, round-robin block
//! creation, the QUICO coordinator and voter, and the PBFT-style baseline.

pub mod baseline;
pub mod messages;
pub mod quico;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::crypto::{KeyPair, SignatureChecker};
use crate::gateway::{transaction_signatures_valid, ConfirmQuorum};
use crate::primitives::{body_root, sort_body, Block, BlockHeader, Hash, Millis, NodeId, Transaction};

use messages::{BlockConfirm, ConsensusMessage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusParams {
    /// Stations hosting the service.
    pub x: usize,
    /// Participating gateways.
    pub y: usize,
    pub t_th: Millis,
    pub t_w: Millis,
    pub max_retry_rounds: u32,
}

impl ConsensusParams {
    pub fn hack_quorum(&self) -> usize {
        hack_quorum(self.x)
    }

    pub fn gack_quorum(&self) -> usize {
        gack_quorum(self.y)
    }

    pub fn confirm_quorum(&self) -> ConfirmQuorum {
        ConfirmQuorum {
            station_acks: self.hack_quorum(),
            gateway_acks: self.gack_quorum(),
        }
    }
}

/// Acknowledgements needed from the other stations: X - 1.
pub fn hack_quorum(x: usize) -> usize {
    x.saturating_sub(1)
}

/// Gateway acknowledgements needed: floor(Y/2 + 1).
pub fn gack_quorum(y: usize) -> usize {
    y / 2 + 1
}

pub fn quorum_reached(hacks: usize, gacks: usize, params: &ConsensusParams) -> bool {
    hacks >= params.hack_quorum() && gacks >= params.gack_quorum()
}

/// Commits needed in the baseline over `n` voters: ceil(2n/3).
pub fn baseline_quorum(n: usize) -> usize {
    (2 * n).div_ceil(3)
}

/// Station after `creator` in cyclic id order and the instant it fires.
pub fn schedule_next_creator(
    stations: &[NodeId],
    creator: NodeId,
    t_b: Millis,
    t_th: Millis,
) -> (NodeId, Millis) {
    let pos = stations.iter().position(|s| *s == creator).unwrap_or(0);
    (stations[(pos + 1) % stations.len()], t_b + t_th)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Timer {
    /// The scheduled creator builds the block for `height`.
    CreatorFire { height: u64 },
    /// The waiting period of a QUICO round ran out.
    WaitExpired { height: u64, seq: u32, round: u32 },
    /// ERROR Resolve replies did not all arrive in time.
    ResolveExpired { height: u64, seq: u32 },
}

/// Observable protocol outcomes the simulator records.
#[derive(Debug, Clone, PartialEq)]
pub enum ProtocolEvent {
    BlockProposed { height: u64, seq: u32 },
    BlockAppended { station: NodeId, height: u64, hash: Hash },
    BlockConfirmed { block: Block },
    BlockRejected { height: u64, seq: u32 },
    TransactionInvalid { id: Hash },
    TransactionExpired { id: Hash },
    DisputeDropped { id: Hash },
    Escalated { height: u64 },
}

/// Everything a handler wants done: messages, timers and recorded events.
#[derive(Debug, Default)]
pub struct Outbox {
    pub sends: Vec<(Vec<NodeId>, ConsensusMessage)>,
    pub timers: Vec<(Millis, Timer)>,
    pub events: Vec<ProtocolEvent>,
}

impl Outbox {
    pub fn send(&mut self, to: Vec<NodeId>, msg: ConsensusMessage) {
        if !to.is_empty() {
            self.sends.push((to, msg));
        }
    }

    pub fn messages_to(&self, node: NodeId) -> impl Iterator<Item = &ConsensusMessage> {
        self.sends
            .iter()
            .filter(move |(to, _)| to.contains(&node))
            .map(|(_, m)| m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Idle,
    Collecting,
    Resolving,
    Confirmed,
}

/// One dispute under arbitration.
#[derive(Debug, Clone, PartialEq)]
pub struct Dispute {
    pub reporters: BTreeSet<NodeId>,
    pub claimed: Option<Transaction>,
    pub targets: BTreeSet<NodeId>,
    pub verdicts: BTreeMap<NodeId, messages::Verdict>,
}

/// Creator-side state of one QUICO round.
#[derive(Debug, Clone)]
pub struct RoundState {
    pub phase: Phase,
    pub block: Block,
    pub hacks: BTreeSet<NodeId>,
    pub gacks: BTreeSet<NodeId>,
    pub ack_signatures: BTreeMap<NodeId, crate::crypto::Signature>,
    /// Errors not yet handled, by voter.
    pub errors: BTreeMap<NodeId, messages::ErrorContent>,
    /// Gateways that raised an error at any point in this round.
    pub error_gateways: BTreeSet<NodeId>,
    pub disputes: BTreeMap<Hash, Dispute>,
    pub retry_round: u32,
    pub broadcast_at: Millis,
    /// End of the current waiting period.
    pub deadline: Millis,
    /// Counts waiting periods, so stale timers are ignored.
    pub wait_round: u32,
    pub escalated: bool,
}

impl RoundState {
    pub fn new(block: Block, now: Millis, t_w: Millis) -> Self {
        Self {
            phase: Phase::Collecting,
            block,
            hacks: BTreeSet::new(),
            gacks: BTreeSet::new(),
            ack_signatures: BTreeMap::new(),
            errors: BTreeMap::new(),
            error_gateways: BTreeSet::new(),
            disputes: BTreeMap::new(),
            retry_round: 0,
            broadcast_at: now,
            deadline: now + t_w,
            wait_round: 0,
            escalated: false,
        }
    }
}

/// Full-node state shared by both consensus modes.
#[derive(Debug)]
pub struct HapsState {
    pub id: NodeId,
    pub key: KeyPair,
    pub stations: Vec<NodeId>,
    pub gateways: Vec<NodeId>,
    pub params: ConsensusParams,
    pub pool: BTreeMap<Hash, Transaction>,
    pub chain: Vec<Block>,
    pub round: Option<RoundState>,
    pub next_creator: NodeId,
    pub next_fire: Millis,
    pub invalid_transactions: u64,
    candidates: BTreeMap<Hash, Block>,
    voted: Option<(u64, u32)>,
    on_chain: BTreeSet<Hash>,
    baseline: baseline::Tally,
}

impl HapsState {
    pub fn new(key: KeyPair, stations: Vec<NodeId>, gateways: Vec<NodeId>, params: ConsensusParams) -> Self {
        let mut stations = stations;
        stations.sort();
        let first = stations[0];
        Self {
            id: key.owner,
            key,
            stations,
            gateways,
            params,
            pool: BTreeMap::new(),
            chain: vec![Block::genesis()],
            round: None,
            next_creator: first,
            next_fire: params.t_th,
            invalid_transactions: 0,
            candidates: BTreeMap::new(),
            voted: None,
            on_chain: BTreeSet::new(),
            baseline: baseline::Tally::default(),
        }
    }

    pub fn tip(&self) -> &BlockHeader {
        &self.chain.last().expect("genesis").header
    }

    pub fn height(&self) -> u64 {
        self.tip().height
    }

    pub fn peers(&self) -> Vec<NodeId> {
        self.stations.iter().copied().filter(|s| *s != self.id).collect()
    }

    /// Peers first, then gateways.
    pub fn everyone_else(&self) -> Vec<NodeId> {
        let mut v = self.peers();
        v.extend(self.gateways.iter().copied());
        v
    }

    /// Timer to arm right after start-up.
    pub fn initial_timer(&self) -> Option<(Millis, Timer)> {
        (self.next_creator == self.id).then_some((self.next_fire, Timer::CreatorFire { height: 1 }))
    }

    pub fn on_transaction(
        &mut self,
        tx: Transaction,
        from: NodeId,
        now: Millis,
        checker: &mut SignatureChecker,
    ) -> Outbox {
        let mut out = Outbox::default();
        if self.pool.contains_key(&tx.id) || self.on_chain.contains(&tx.id) {
            return out;
        }
        if !transaction_signatures_valid(&tx, checker) {
            self.invalid_transactions += 1;
            out.events.push(ProtocolEvent::TransactionInvalid { id: tx.id });
            return out;
        }
        if tx.is_expired(now) {
            out.events.push(ProtocolEvent::TransactionExpired { id: tx.id });
            return out;
        }
        if from.role == crate::primitives::Role::Gateway {
            out.send(self.peers(), ConsensusMessage::Transaction(tx.clone()));
        }
        self.pool.insert(tx.id, tx);
        out
    }

    /// Block over every unexpired pooled transaction in canonical order.
    pub fn create_block(&mut self, now: Millis, out: &mut Outbox) -> Block {
        let expired: Vec<Hash> = self
            .pool
            .values()
            .filter(|t| t.is_expired(now))
            .map(|t| t.id)
            .collect();
        for id in expired {
            self.pool.remove(&id);
            out.events.push(ProtocolEvent::TransactionExpired { id });
        }
        let mut body: Vec<Transaction> = self.pool.values().cloned().collect();
        sort_body(&mut body);
        let tip = self.tip();
        Block {
            header: BlockHeader {
                height: tip.height + 1,
                sequence_number: 0,
                previous_hash: tip.hash(),
                merkle_root: body_root(&body),
                timestamp: now,
                creator: self.id,
            },
            body,
        }
    }

    /// Full validation of a proposal: header linkage, and every transaction
    /// byte-identical to the pooled copy or, when not pooled yet, correctly
    /// signed and not already on the chain. Returns the ids that fail.
    pub fn validate_full(&self, block: &Block, checker: &mut SignatureChecker) -> (bool, Vec<Hash>) {
        let structural = block.header.height != self.height() + 1
            || block.header.previous_hash != self.tip().hash()
            || !block.is_well_formed();
        let mismatched = block
            .body
            .iter()
            .filter(|tx| match self.pool.get(&tx.id) {
                Some(local) => local.core_bytes() != tx.core_bytes(),
                None => self.on_chain.contains(&tx.id) || !transaction_signatures_valid(tx, checker),
            })
            .map(|tx| tx.id)
            .collect();
        (structural, mismatched)
    }

    fn append(&mut self, block: Block, now: Millis, out: &mut Outbox) {
        let _ = now;
        for tx in &block.body {
            self.pool.remove(&tx.id);
            self.on_chain.insert(tx.id);
        }
        out.events.push(ProtocolEvent::BlockAppended {
            station: self.id,
            height: block.header.height,
            hash: block.hash(),
        });
        self.chain.push(block);
        self.candidates.clear();
        self.voted = None;
    }

    /// Records the rotation that follows a decision at `t_b` and arms the
    /// creator timer if this station is next.
    fn rotate(&mut self, creator: NodeId, t_b: Millis, out: &mut Outbox) {
        let (next, fire_at) = schedule_next_creator(&self.stations, creator, t_b, self.params.t_th);
        self.next_creator = next;
        self.next_fire = fire_at;
        if next == self.id {
            out.timers.push((
                fire_at,
                Timer::CreatorFire {
                    height: self.height() + 1,
                },
            ));
        }
    }

    pub fn chain_hashes(&self) -> Vec<Hash> {
        self.chain.iter().map(Block::hash).collect()
    }
}

/// Confirm and creator rotation computed identically by every station.
pub fn rotation_from_confirm(stations: &[NodeId], confirm: &BlockConfirm, t_th: Millis) -> (NodeId, Millis) {
    schedule_next_creator(stations, confirm.header.creator, confirm.t_b, t_th)
}
