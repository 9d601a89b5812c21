//! PBFT-style two-phase baseline: the leader broadcasts PRE-PREPARE, every
//! station and gateway broadcasts COMMIT or REJECT to all others, and a block
//! is appended once ceil(2N/3) commits are seen. A block that can no longer
//! reach that quorum is rejected and its transactions wait for the next one.

use std::collections::{BTreeMap, BTreeSet};

use super::messages::{Commit, CommitContent, ConsensusMessage, PrePrepare, PrePrepareContent, WarningContent, WarningReason};
use super::{baseline_quorum, HapsState, Outbox, ProtocolEvent, RoundState, Timer};
use crate::crypto::{KeyPair, SignatureChecker};
use crate::gateway::{transaction_signatures_valid, GatewayState, Vote};
use crate::primitives::{Block, Hash, Millis, NodeId, Role};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineDecision {
    Accept,
    Reject,
}

/// Accepted with at least `q` commits, rejected once more than `n - q`
/// voters rejected, undecided otherwise.
pub fn baseline_outcome(commits: usize, rejects: usize, n: usize) -> Option<BaselineDecision> {
    let q = baseline_quorum(n);
    if commits >= q {
        Some(BaselineDecision::Accept)
    } else if rejects > n - q {
        Some(BaselineDecision::Reject)
    } else {
        None
    }
}

/// Votes a node has seen per proposal.
#[derive(Debug, Clone, Default)]
pub struct Tally {
    votes: BTreeMap<(u64, Hash), (BTreeSet<NodeId>, BTreeSet<NodeId>)>,
    decided: BTreeSet<(u64, Hash)>,
    blocks: BTreeMap<Hash, Block>,
}

impl Tally {
    /// Records a vote; returns the decision the first time one is reached,
    /// together with the votes seen at that instant.
    pub fn record(
        &mut self,
        height: u64,
        block_hash: Hash,
        voter: NodeId,
        accept: bool,
        n: usize,
    ) -> Option<(BaselineDecision, BTreeSet<NodeId>, BTreeSet<NodeId>)> {
        let key = (height, block_hash);
        if self.decided.contains(&key) {
            return None;
        }
        let (commits, rejects) = self.votes.entry(key).or_default();
        commits.remove(&voter);
        rejects.remove(&voter);
        if accept {
            commits.insert(voter);
        } else {
            rejects.insert(voter);
        }
        let decision = baseline_outcome(commits.len(), rejects.len(), n)?;
        let (commits, rejects) = self.votes.remove(&key).expect("present");
        self.decided.insert(key);
        Some((decision, commits, rejects))
    }

    pub fn is_decided(&self, height: u64, block_hash: Hash) -> bool {
        self.decided.contains(&(height, block_hash))
    }

    /// Drops bookkeeping for heights at or below `height`.
    pub fn prune(&mut self, height: u64) {
        self.votes.retain(|(h, _), _| *h > height);
        self.decided.retain(|(h, _)| *h > height);
        self.blocks.retain(|_, b| b.header.height > height);
    }
}

fn commit_msg(key: &KeyPair, block: &Block, accept: bool) -> Commit {
    CommitContent {
        height: block.header.height,
        seq: block.header.sequence_number,
        block_hash: block.hash(),
        voter: key.owner,
        accept,
    }
    .sign(key)
}

/// Every consensus node except `me`: stations first, then gateways.
pub fn all_voters_except(stations: &[NodeId], gateways: &[NodeId], me: NodeId) -> Vec<NodeId> {
    stations
        .iter()
        .chain(gateways.iter())
        .copied()
        .filter(|n| *n != me)
        .collect()
}

impl HapsState {
    fn voter_count(&self) -> usize {
        self.stations.len() + self.gateways.len()
    }

    pub fn baseline_on_timer(&mut self, timer: Timer, now: Millis) -> Outbox {
        let mut out = Outbox::default();
        let Timer::CreatorFire { height } = timer else {
            return out;
        };
        if self.next_creator != self.id || height != self.height() + 1 || self.round.is_some() {
            return out;
        }
        let block = self.create_block(now, &mut out);
        let pp = PrePrepareContent {
            block: block.clone(),
            leader: self.id,
        }
        .sign(&self.key);
        out.events.push(ProtocolEvent::BlockProposed {
            height: block.header.height,
            seq: block.header.sequence_number,
        });
        out.send(
            all_voters_except(&self.stations, &self.gateways, self.id),
            ConsensusMessage::PrePrepare(pp),
        );
        let hash = block.hash();
        self.baseline.blocks.insert(hash, block.clone());
        self.round = Some(RoundState::new(block, now, self.params.t_w));
        let n = self.voter_count();
        if let Some(decided) = self.baseline.record(height, hash, self.id, true, n) {
            self.apply_baseline_decision(height, hash, decided, now, &mut out);
        }
        out
    }

    pub fn baseline_on_preprepare(&mut self, pp: &PrePrepare, now: Millis, checker: &mut SignatureChecker) -> Outbox {
        let mut out = Outbox::default();
        let h = &pp.block.header;
        if !pp.verify(checker) || h.creator != pp.leader || h.height != self.height() + 1 {
            return out;
        }
        let hash = pp.block.hash();
        self.baseline.blocks.insert(hash, pp.block.clone());
        let (structural, mismatched) = self.validate_full(&pp.block, checker);
        let accept = !structural && mismatched.is_empty();
        out.send(
            all_voters_except(&self.stations, &self.gateways, self.id),
            ConsensusMessage::Commit(commit_msg(&self.key, &pp.block, accept)),
        );
        let n = self.voter_count();
        for (voter, vote) in [(pp.leader, true), (self.id, accept)] {
            if let Some(decided) = self.baseline.record(h.height, hash, voter, vote, n) {
                self.apply_baseline_decision(h.height, hash, decided, now, &mut out);
            }
        }
        out
    }

    pub fn baseline_on_commit(&mut self, c: &Commit, now: Millis, checker: &mut SignatureChecker) -> Outbox {
        let mut out = Outbox::default();
        if c.height != self.height() + 1 || !c.verify(checker) {
            return out;
        }
        let n = self.voter_count();
        if let Some(decided) = self.baseline.record(c.height, c.block_hash, c.voter, c.accept, n) {
            self.apply_baseline_decision(c.height, c.block_hash, decided, now, &mut out);
        }
        out
    }

    fn apply_baseline_decision(
        &mut self,
        height: u64,
        hash: Hash,
        (decision, commits, rejects): (BaselineDecision, BTreeSet<NodeId>, BTreeSet<NodeId>),
        now: Millis,
        out: &mut Outbox,
    ) {
        let Some(block) = self.baseline.blocks.get(&hash).cloned() else {
            return;
        };
        let creator = block.header.creator;
        let leading = creator == self.id;
        if leading {
            self.round = None;
            let dissenters: Vec<NodeId> = match decision {
                BaselineDecision::Accept => rejects,
                BaselineDecision::Reject => commits,
            }
            .into_iter()
            .filter(|v| v.role == Role::Gateway)
            .collect();
            if !dissenters.is_empty() {
                let report = WarningContent {
                    height,
                    reporter: self.id,
                    suspects: dissenters,
                    evidence: vec![hash],
                    reason: WarningReason::Dissent,
                }
                .sign(&self.key);
                out.send(vec![NodeId::admin()], ConsensusMessage::WarningReport(report));
            }
        }
        match decision {
            BaselineDecision::Accept => {
                if leading {
                    out.events.push(ProtocolEvent::BlockConfirmed { block: block.clone() });
                }
                self.append(block, now, out);
                self.baseline.prune(height);
            }
            BaselineDecision::Reject => {
                if leading {
                    out.events.push(ProtocolEvent::BlockRejected {
                        height,
                        seq: block.header.sequence_number,
                    });
                }
            }
        }
        self.rotate(creator, now, out);
    }
}

/// Baseline behaviour of a gateway: full validation of the proposal, a
/// COMMIT/REJECT broadcast, and header append once the round is decided.
#[derive(Debug, Default)]
pub struct GatewayVoter {
    tally: Tally,
}

impl GatewayVoter {
    pub fn on_preprepare(
        &mut self,
        gw: &mut GatewayState,
        pp: &PrePrepare,
        stations: &[NodeId],
        gateways: &[NodeId],
        sabotage: bool,
        checker: &mut SignatureChecker,
    ) -> Outbox {
        let mut out = Outbox::default();
        if !pp.verify(checker) || pp.block.header.creator != pp.leader {
            return out;
        }
        let vote = match gw.on_new_block(&pp.block) {
            Ok(Some(v)) => v,
            _ => return out,
        };
        let sigs_ok = pp.block.body.iter().all(|t| transaction_signatures_valid(t, checker));
        let accept = matches!(vote, Vote::Ack(_)) && sigs_ok && !sabotage;
        let hash = pp.block.hash();
        self.tally.blocks.insert(hash, pp.block.clone());
        out.send(
            all_voters_except(stations, gateways, gw.id),
            ConsensusMessage::Commit(commit_msg(&gw.key, &pp.block, accept)),
        );
        let n = stations.len() + gateways.len();
        let height = pp.block.header.height;
        for (voter, v) in [(pp.leader, true), (gw.id, accept)] {
            if let Some((decision, _, _)) = self.tally.record(height, hash, voter, v, n) {
                Self::apply(gw, &mut self.tally, hash, decision);
            }
        }
        out
    }

    pub fn on_commit(
        &mut self,
        gw: &mut GatewayState,
        c: &Commit,
        n: usize,
        checker: &mut SignatureChecker,
    ) {
        if c.height != gw.headers.height() + 1 || !c.verify(checker) {
            return;
        }
        if let Some((decision, _, _)) = self.tally.record(c.height, c.block_hash, c.voter, c.accept, n) {
            Self::apply(gw, &mut self.tally, c.block_hash, decision);
        }
    }

    fn apply(gw: &mut GatewayState, tally: &mut Tally, hash: Hash, decision: BaselineDecision) {
        if decision != BaselineDecision::Accept {
            return;
        }
        let Some(block) = tally.blocks.get(&hash).cloned() else {
            return;
        };
        if gw.headers.append(block.header.clone()).is_ok() {
            for tx in &block.body {
                gw.pending.remove(&tx.id);
            }
            tally.prune(block.header.height);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{keygen, KeyRegistry};
    use crate::gateway::GatewayParams;
    use crate::haps::ConsensusParams;

    #[test]
    fn outcome_examples() {
        // 9 of 12 commit: 9 >= ceil(24/3) = 8.
        assert_eq!(baseline_outcome(9, 3, 12), Some(BaselineDecision::Accept));
        // 7 of 12 commit, 5 reject: the quorum is out of reach.
        assert_eq!(baseline_outcome(7, 5, 12), Some(BaselineDecision::Reject));
        assert_eq!(baseline_outcome(7, 4, 12), None);
    }

    #[test]
    fn outcome_is_never_both() {
        for n in 1..=30 {
            for c in 0..=n {
                for r in 0..=(n - c) {
                    let q = baseline_quorum(n);
                    let accept = c >= q;
                    let reject = r > n - q;
                    assert!(!(accept && reject), "n={n} c={c} r={r}");
                }
            }
        }
    }

    const SEED: [u8; 32] = [5u8; 32];

    fn setup(x: u32, y: u32) -> (Vec<HapsState>, Vec<GatewayState>, SignatureChecker) {
        let st: Vec<NodeId> = (0..x).map(NodeId::station).collect();
        let gw: Vec<NodeId> = (0..y).map(NodeId::gateway).collect();
        let mut reg = KeyRegistry::default();
        for id in st.iter().chain(gw.iter()) {
            reg.insert(*id, keygen(&SEED, *id).public_key());
        }
        let params = ConsensusParams {
            x: x as usize,
            y: y as usize,
            t_th: 100,
            t_w: 100,
            max_retry_rounds: 3,
        };
        let stations = st
            .iter()
            .map(|id| HapsState::new(keygen(&SEED, *id), st.clone(), gw.clone(), params))
            .collect();
        let gateways = gw
            .iter()
            .map(|id| GatewayState::new(keygen(&SEED, *id), GatewayParams::default()))
            .collect();
        (stations, gateways, SignatureChecker::new(reg))
    }

    /// Runs one baseline round to completion with the given gateways
    /// sabotaging; returns the number of commit broadcasts and the leader's outbox events.
    fn run_round(x: u32, y: u32, saboteurs: &[u32]) -> (Vec<HapsState>, usize, Vec<ProtocolEvent>) {
        let (mut st, mut gws, mut ck) = setup(x, y);
        let st_ids: Vec<NodeId> = st.iter().map(|s| s.id).collect();
        let gw_ids: Vec<NodeId> = gws.iter().map(|g| g.id).collect();
        let n = st_ids.len() + gw_ids.len();
        let mut voters: Vec<GatewayVoter> = (0..y).map(|_| GatewayVoter::default()).collect();
        let out = st[0].baseline_on_timer(Timer::CreatorFire { height: 1 }, 100);
        let mut events = out.events.clone();
        let pp = match &out.sends[0].1 {
            ConsensusMessage::PrePrepare(p) => p.clone(),
            _ => panic!(),
        };
        let mut commits = Vec::new();
        for s in st[1..].iter_mut() {
            let o = s.baseline_on_preprepare(&pp, 101, &mut ck);
            commits.extend(o.sends.into_iter().map(|(_, m)| m));
        }
        for (i, (g, v)) in gws.iter_mut().zip(voters.iter_mut()).enumerate() {
            let o = v.on_preprepare(g, &pp, &st_ids, &gw_ids, saboteurs.contains(&(i as u32)), &mut ck);
            commits.extend(o.sends.into_iter().map(|(_, m)| m));
        }
        let broadcasts = commits.len();
        for m in &commits {
            let ConsensusMessage::Commit(c) = m else { panic!() };
            for s in st.iter_mut() {
                if s.id != c.voter {
                    let o = s.baseline_on_commit(c, 102, &mut ck);
                    if s.id == st_ids[0] {
                        events.extend(o.events);
                    }
                }
            }
            for (g, v) in gws.iter_mut().zip(voters.iter_mut()) {
                if g.id != c.voter {
                    v.on_commit(g, c, n, &mut ck);
                }
            }
        }
        for g in &gws {
            if events.iter().any(|e| matches!(e, ProtocolEvent::BlockConfirmed { .. })) {
                assert_eq!(g.headers.height(), 1);
            }
        }
        (st, broadcasts, events)
    }

    #[test]
    fn honest_round_accepted_everywhere() {
        let (st, broadcasts, events) = run_round(3, 9, &[]);
        // Phase two: every non-leader broadcasts once.
        assert_eq!(broadcasts, 11);
        assert!(events.iter().any(|e| matches!(e, ProtocolEvent::BlockConfirmed { .. })));
        assert!(st.iter().all(|s| s.height() == 1));
        assert_eq!(st[0].chain_hashes(), st[2].chain_hashes());
    }

    #[test]
    fn five_rejects_of_twelve_reject_the_block() {
        let (st, _, events) = run_round(3, 9, &[0, 1, 2, 3, 4]);
        assert!(events.iter().any(|e| matches!(e, ProtocolEvent::BlockRejected { .. })));
        assert!(st.iter().all(|s| s.height() == 0));
        assert!(st.iter().all(|s| s.next_creator == NodeId::station(1)));
    }

    #[test]
    fn four_rejects_of_twelve_still_accept() {
        let (st, _, _) = run_round(3, 9, &[0, 1, 2, 3]);
        assert!(st.iter().all(|s| s.height() == 1));
    }
}
