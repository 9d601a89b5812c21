//! QUICO: single-broadcast voting with X-1 station acknowledgements plus a
//! gateway majority, and an error check/resolve loop in place of rejection.

use std::collections::{BTreeMap, BTreeSet};

use super::messages::{
    version_hash, AckContent, BlockAck, BlockConfirm, BlockError, ConfirmContent, ConsensusMessage,
    DecisionContent, ErrorCheckContent, ErrorContent, ErrorResolve, NewBlock, NewBlockContent,
    Verdict, WarningContent, WarningReason,
};
use super::{quorum_reached, ConsensusParams, Dispute, HapsState, Outbox, Phase, ProtocolEvent, RoundState, Timer};
use crate::crypto::SignatureChecker;
use crate::gateway::{confirm_has_quorum, transaction_signatures_valid};
use crate::primitives::{body_root, Block, Hash, Millis, NodeId, Role, Transaction};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VoteDecision {
    Confirm,
    Resolve(Vec<Hash>),
    Wait,
    Escalate,
}

/// Decision rule applied whenever the creator's view of a round changes.
pub fn collect_votes(round: &RoundState, now: Millis, params: &ConsensusParams) -> VoteDecision {
    if !round.errors.is_empty() {
        let ids: BTreeSet<Hash> = round
            .errors
            .values()
            .flat_map(|e| e.disputed.iter().copied())
            .collect();
        return VoteDecision::Resolve(ids.into_iter().collect());
    }
    if quorum_reached(round.hacks.len(), round.gacks.len(), params) {
        return VoteDecision::Confirm;
    }
    if now >= round.deadline && round.error_gateways.len() > params.y / 2 {
        return VoteDecision::Escalate;
    }
    VoteDecision::Wait
}

/// Outcome of arbitrating one disputed transaction.
#[derive(Debug, Clone, PartialEq)]
pub enum DisputeOutcome {
    Upheld,
    Replaced(Transaction),
    Dropped,
}

/// Majority over the endorsers' verdicts between the block's copy and the
/// reporter's copy; ties and abstentions drop the transaction.
pub fn decide_dispute(block_copy: &Transaction, dispute: &Dispute) -> DisputeOutcome {
    let Some(claimed) = &dispute.claimed else {
        return DisputeOutcome::Upheld;
    };
    let hb = version_hash(block_copy);
    let hp = version_hash(claimed);
    let count = |h: Hash| {
        dispute
            .verdicts
            .values()
            .filter(|v| **v == Verdict::Version(h))
            .count()
    };
    let (for_block, for_claim) = (count(hb), count(hp));
    match for_block.cmp(&for_claim) {
        std::cmp::Ordering::Greater => DisputeOutcome::Upheld,
        std::cmp::Ordering::Less => DisputeOutcome::Replaced(claimed.clone()),
        std::cmp::Ordering::Equal => DisputeOutcome::Dropped,
    }
}

impl HapsState {
    fn is_creator_of_round(&self, height: u64, seq: u32) -> bool {
        self.round.as_ref().is_some_and(|r| {
            r.block.header.height == height && r.block.header.sequence_number == seq
        })
    }

    pub fn quico_on_timer(&mut self, timer: Timer, now: Millis, checker: &mut SignatureChecker) -> Outbox {
        let mut out = Outbox::default();
        match timer {
            Timer::CreatorFire { height } => {
                if self.next_creator == self.id && height == self.height() + 1 && self.round.is_none() {
                    let block = self.create_block(now, &mut out);
                    self.start_round(block, now, 0, &mut out);
                }
            }
            Timer::WaitExpired { height, seq, round } => {
                let current = self
                    .round
                    .as_ref()
                    .is_some_and(|r| r.wait_round == round && r.phase == Phase::Collecting);
                if current && self.is_creator_of_round(height, seq) {
                    self.on_wait_expired(now, &mut out);
                }
            }
            Timer::ResolveExpired { height, seq } => {
                if self.is_creator_of_round(height, seq)
                    && self.round.as_ref().is_some_and(|r| r.phase == Phase::Resolving)
                {
                    self.finish_resolution(now, checker, &mut out);
                }
            }
        }
        out
    }

    fn start_round(&mut self, block: Block, now: Millis, retry_round: u32, out: &mut Outbox) {
        let mut round = RoundState::new(block, now, self.params.t_w);
        round.retry_round = retry_round;
        let nb = NewBlockContent {
            block: round.block.clone(),
            creator: self.id,
        }
        .sign(&self.key);
        out.events.push(ProtocolEvent::BlockProposed {
            height: round.block.header.height,
            seq: round.block.header.sequence_number,
        });
        out.send(self.everyone_else(), ConsensusMessage::NewBlock(nb));
        out.timers.push((round.deadline, wait_timer(&round)));
        self.round = Some(round);
    }

    /// Station-side validation of a proposal from the creator.
    pub fn quico_on_new_block(&mut self, nb: &NewBlock, checker: &mut SignatureChecker) -> Outbox {
        let mut out = Outbox::default();
        let h = &nb.block.header;
        if !nb.verify(checker) || h.creator != nb.creator || h.height != self.height() + 1 {
            return out;
        }
        if self
            .voted
            .is_some_and(|(height, seq)| height == h.height && seq > h.sequence_number)
        {
            return out;
        }
        self.voted = Some((h.height, h.sequence_number));
        let block_hash = nb.block.hash();
        self.candidates.insert(block_hash, nb.block.clone());
        let (structural, mismatched) = self.validate_full(&nb.block, checker);
        let msg = if structural || !mismatched.is_empty() {
            let claimed_versions = mismatched
                .iter()
                .filter_map(|id| self.pool.get(id).cloned())
                .collect();
            ConsensusMessage::BlockError(
                ErrorContent {
                    height: h.height,
                    seq: h.sequence_number,
                    block_hash,
                    voter: self.id,
                    structural,
                    disputed: mismatched,
                    claimed_versions,
                }
                .sign(&self.key),
            )
        } else {
            ConsensusMessage::BlockAck(
                AckContent {
                    height: h.height,
                    seq: h.sequence_number,
                    block_hash,
                    voter: self.id,
                }
                .sign(&self.key),
            )
        };
        out.send(vec![h.creator], msg);
        out
    }

    fn vote_is_current(&self, height: u64, seq: u32, block_hash: Hash) -> bool {
        self.round.as_ref().is_some_and(|r| {
            r.block.header.height == height
                && r.block.header.sequence_number == seq
                && r.block.hash() == block_hash
                && matches!(r.phase, Phase::Collecting | Phase::Resolving)
        })
    }

    pub fn on_block_ack(&mut self, ack: &BlockAck, now: Millis, checker: &mut SignatureChecker) -> Outbox {
        let mut out = Outbox::default();
        if !ack.verify(checker) || !self.vote_is_current(ack.height, ack.seq, ack.block_hash) {
            return out;
        }
        let voter = ack.voter;
        let round = self.round.as_mut().expect("current round");
        round.errors.remove(&voter);
        match voter.role {
            Role::HapsStation if voter != self.id => {
                round.hacks.insert(voter);
            }
            Role::Gateway => {
                round.gacks.insert(voter);
            }
            _ => return out,
        }
        round.ack_signatures.insert(voter, ack.signature.clone());
        self.advance(now, checker, &mut out);
        out
    }

    pub fn on_block_error(&mut self, err: &BlockError, now: Millis, checker: &mut SignatureChecker) -> Outbox {
        let mut out = Outbox::default();
        if !err.verify(checker) {
            return out;
        }
        if self.vote_is_current(err.height, err.seq, err.block_hash) {
            let round = self.round.as_mut().expect("current round");
            let voter = err.voter;
            round.hacks.remove(&voter);
            round.gacks.remove(&voter);
            round.ack_signatures.remove(&voter);
            if voter.role == Role::Gateway {
                round.error_gateways.insert(voter);
            }
            let mut err = err.content.clone();
            if round.phase == Phase::Resolving {
                err.disputed.retain(|id| match round.disputes.get_mut(id) {
                    Some(d) => {
                        d.reporters.insert(voter);
                        false
                    }
                    None => true,
                });
            }
            if err.structural || !err.disputed.is_empty() {
                round.errors.insert(voter, err);
            }
            self.advance(now, checker, &mut out);
        } else if err.height <= self.height() && err.voter.role == Role::Gateway {
            self.audit_late_error(err, &mut out);
        }
        out
    }

    /// An error against a block that is already on the chain. Every station
    /// validated that block against its own replica, so the claim is false.
    fn audit_late_error(&self, err: &BlockError, out: &mut Outbox) {
        let Some(block) = self.chain.get(err.height as usize) else {
            return;
        };
        if block.hash() != err.block_hash || block.header.creator != self.id {
            return;
        }
        let evidence: Vec<Hash> = err
            .disputed
            .iter()
            .copied()
            .filter(|id| block.body.iter().any(|t| t.id == *id))
            .collect();
        if err.structural || !evidence.is_empty() {
            self.warn(vec![err.voter], evidence, err.height, WarningReason::FalseError, out);
        }
    }

    fn warn(&self, suspects: Vec<NodeId>, evidence: Vec<Hash>, height: u64, reason: WarningReason, out: &mut Outbox) {
        if suspects.is_empty() {
            return;
        }
        let report = WarningContent {
            height,
            reporter: self.id,
            suspects,
            evidence,
            reason,
        }
        .sign(&self.key);
        out.send(vec![NodeId::admin()], ConsensusMessage::WarningReport(report));
    }

    fn advance(&mut self, now: Millis, checker: &mut SignatureChecker, out: &mut Outbox) {
        let Some(round) = self.round.as_ref() else {
            return;
        };
        if round.phase != Phase::Collecting {
            return;
        }
        match collect_votes(round, now, &self.params) {
            VoteDecision::Confirm => self.emit_confirm(now, out),
            VoteDecision::Resolve(_) => self.resolve_disputes(now, checker, out),
            VoteDecision::Wait | VoteDecision::Escalate => {}
        }
    }

    fn on_wait_expired(&mut self, now: Millis, out: &mut Outbox) {
        let decision = collect_votes(self.round.as_ref().expect("round"), now, &self.params);
        let round = self.round.as_mut().expect("round");
        let height = round.block.header.height;
        let missing_gateways: Vec<NodeId> = self
            .gateways
            .iter()
            .copied()
            .filter(|g| !round.gacks.contains(g))
            .collect();
        let missing_stations: Vec<NodeId> = self
            .stations
            .iter()
            .copied()
            .filter(|s| *s != self.id && !round.hacks.contains(s))
            .collect();
        let first_escalation = decision == VoteDecision::Escalate && !round.escalated;
        if decision == VoteDecision::Escalate {
            round.escalated = true;
        }
        let suspects: Vec<NodeId> = round.error_gateways.iter().copied().collect();
        round.wait_round += 1;
        round.deadline = now + self.params.t_w;
        let timer = (round.deadline, wait_timer(round));
        let block = round.block.clone();

        if first_escalation {
            out.events.push(ProtocolEvent::Escalated { height });
            self.warn(suspects, Vec::new(), height, WarningReason::MajorityError, out);
        }
        if !missing_stations.is_empty() {
            self.warn(missing_stations.clone(), Vec::new(), height, WarningReason::StationTimeout, out);
        }
        let mut resend = missing_stations;
        resend.extend(missing_gateways);
        if !resend.is_empty() {
            let nb = NewBlockContent { block, creator: self.id }.sign(&self.key);
            out.send(resend, ConsensusMessage::NewBlock(nb));
        }
        out.timers.push(timer);
    }

    /// Opens arbitration for every disputed transaction in the pending errors.
    pub fn resolve_disputes(&mut self, now: Millis, checker: &mut SignatureChecker, out: &mut Outbox) {
        let max_retry = self.params.max_retry_rounds;
        let round = self.round.as_mut().expect("round");
        let errors = std::mem::take(&mut round.errors);
        let mut false_reporters = BTreeSet::new();
        let mut fresh = Vec::new();
        for (voter, err) in errors {
            if err.structural && round.block.is_well_formed() && voter.role == Role::Gateway {
                false_reporters.insert(voter);
            }
            for id in &err.disputed {
                if !round.block.body.iter().any(|t| t.id == *id) {
                    if voter.role == Role::Gateway {
                        false_reporters.insert(voter);
                    }
                    continue;
                }
                let claimed = err.claimed_versions.iter().find(|c| c.id == *id).cloned();
                let d = round.disputes.entry(*id).or_insert_with(|| {
                    fresh.push(*id);
                    Dispute {
                        reporters: BTreeSet::new(),
                        claimed: None,
                        targets: BTreeSet::new(),
                        verdicts: BTreeMap::new(),
                    }
                });
                d.reporters.insert(voter);
                if d.claimed.is_none() {
                    d.claimed = claimed;
                }
            }
        }
        let height = round.block.header.height;
        let seq = round.block.header.sequence_number;
        let mut checks = Vec::new();
        for id in fresh {
            let tx = round.block.body.iter().find(|t| t.id == id).expect("in body").clone();
            let d = round.disputes.get_mut(&id).expect("inserted");
            let Some(claimed) = d.claimed.clone() else {
                continue;
            };
            if !transaction_signatures_valid(&tx, checker) || round.retry_round >= max_retry {
                continue;
            }
            let mut targets: BTreeSet<NodeId> = BTreeSet::from([tx.origin_gateway]);
            targets.extend(tx.endorsements.iter().map(|e| e.endorser).filter(|n| n.role == Role::Gateway));
            d.targets = targets.clone();
            checks.push((
                targets.into_iter().collect::<Vec<_>>(),
                ErrorCheckContent {
                    height,
                    seq,
                    tx_id: id,
                    version_block: tx,
                    version_pending: claimed,
                    targets: d.targets.iter().copied().collect(),
                    creator: self.id,
                },
            ));
        }
        if !false_reporters.is_empty() {
            let suspects = false_reporters.into_iter().collect();
            self.warn(suspects, Vec::new(), height, WarningReason::FalseError, out);
        }
        let awaiting = !checks.is_empty();
        for (to, check) in checks {
            out.send(to, ConsensusMessage::ErrorCheck(check.sign(&self.key)));
        }
        let round = self.round.as_mut().expect("round");
        if awaiting {
            round.phase = Phase::Resolving;
            out.timers.push((now + self.params.t_w, Timer::ResolveExpired { height, seq }));
        } else {
            self.finish_resolution(now, checker, out);
        }
    }

    pub fn on_error_resolve(&mut self, res: &ErrorResolve, now: Millis, checker: &mut SignatureChecker) -> Outbox {
        let mut out = Outbox::default();
        if !res.verify(checker) {
            return out;
        }
        let Some(round) = self.round.as_mut() else {
            return out;
        };
        if round.phase != Phase::Resolving || round.block.header.height != res.height {
            return out;
        }
        let Some(d) = round.disputes.get_mut(&res.tx_id) else {
            return out;
        };
        if !d.targets.contains(&res.resolver) {
            return out;
        }
        d.verdicts.insert(res.resolver, res.verdict);
        let complete = round
            .disputes
            .values()
            .all(|d| d.targets.iter().all(|t| d.verdicts.contains_key(t)));
        if complete {
            self.finish_resolution(now, checker, &mut out);
        }
        out
    }

    /// Applies every dispute's outcome, informs the reporters, and either
    /// regenerates the block or returns to collecting votes.
    fn finish_resolution(&mut self, now: Millis, checker: &mut SignatureChecker, out: &mut Outbox) {
        let round = self.round.as_mut().expect("round");
        let disputes = std::mem::take(&mut round.disputes);
        let height = round.block.header.height;
        let mut body = round.block.body.clone();
        let mut changed = false;
        let mut false_reporters = BTreeSet::new();
        let mut unresolved = BTreeSet::new();
        let mut decisions = Vec::new();
        let exhausted = round.retry_round >= self.params.max_retry_rounds;

        for (id, d) in &disputes {
            let Some(pos) = body.iter().position(|t| t.id == *id) else {
                continue;
            };
            let block_copy_valid = transaction_signatures_valid(&body[pos], checker);
            let outcome = if !block_copy_valid {
                match &d.claimed {
                    Some(c) if transaction_signatures_valid(c, checker) => DisputeOutcome::Replaced(c.clone()),
                    _ => DisputeOutcome::Dropped,
                }
            } else if exhausted && d.claimed.is_some() {
                DisputeOutcome::Dropped
            } else {
                decide_dispute(&body[pos], d)
            };
            let adopted = match &outcome {
                DisputeOutcome::Upheld => {
                    false_reporters.extend(d.reporters.iter().copied().filter(|r| r.role == Role::Gateway));
                    None
                }
                DisputeOutcome::Replaced(tx) => {
                    body[pos] = tx.clone();
                    changed = true;
                    Some(tx.clone())
                }
                DisputeOutcome::Dropped => {
                    body.remove(pos);
                    changed = true;
                    unresolved.extend(d.reporters.iter().copied().filter(|r| r.role == Role::Gateway));
                    out.events.push(ProtocolEvent::DisputeDropped { id: *id });
                    None
                }
            };
            decisions.push((d.reporters.iter().copied().collect::<Vec<_>>(), *id, adopted));
        }

        for (reporters, tx_id, adopted) in decisions {
            let msg = DecisionContent {
                height,
                tx_id,
                adopted,
                creator: self.id,
            }
            .sign(&self.key);
            out.send(reporters, ConsensusMessage::ErrorDecision(msg));
        }
        let evidence: Vec<Hash> = disputes.keys().copied().collect();
        if !false_reporters.is_empty() {
            self.warn(false_reporters.into_iter().collect(), evidence.clone(), height, WarningReason::FalseError, out);
        }
        if !unresolved.is_empty() {
            self.warn(unresolved.into_iter().collect(), evidence, height, WarningReason::UnresolvedDispute, out);
        }

        let round = self.round.as_mut().expect("round");
        if changed {
            let mut block = round.block.clone();
            block.header.sequence_number += 1;
            block.header.merkle_root = body_root(&body);
            block.header.timestamp = now;
            block.body = body;
            let retry = round.retry_round + 1;
            let error_gateways = round.error_gateways.clone();
            let broadcast_at = round.broadcast_at;
            self.start_round(block, now, retry, out);
            let round = self.round.as_mut().expect("round");
            round.error_gateways = error_gateways;
            round.broadcast_at = broadcast_at;
        } else {
            round.phase = Phase::Collecting;
            self.advance(now, checker, out);
        }
    }

    /// Aggregates the collected acknowledgements, appends the block locally
    /// and broadcasts the confirm.
    pub fn emit_confirm(&mut self, now: Millis, out: &mut Outbox) {
        let mut round = self.round.take().expect("round");
        round.phase = Phase::Confirmed;
        let confirm = ConfirmContent {
            header: round.block.header.clone(),
            votes: round.ack_signatures.values().cloned().collect(),
            t_b: now,
            creator: self.id,
        }
        .sign(&self.key);
        out.send(self.everyone_else(), ConsensusMessage::BlockConfirm(confirm));
        out.events.push(ProtocolEvent::BlockConfirmed {
            block: round.block.clone(),
        });
        self.append(round.block, now, out);
        self.rotate(self.id, now, out);
    }

    pub fn quico_on_block_confirm(
        &mut self,
        confirm: &BlockConfirm,
        now: Millis,
        checker: &mut SignatureChecker,
    ) -> Outbox {
        let mut out = Outbox::default();
        if !confirm.verify(checker)
            || confirm.header.height != self.height() + 1
            || !confirm_has_quorum(confirm, self.params.confirm_quorum(), checker)
        {
            return out;
        }
        let Some(block) = self.candidates.remove(&confirm.header.hash()) else {
            return out;
        };
        self.append(block, now, &mut out);
        self.rotate(confirm.header.creator, confirm.t_b, &mut out);
        out
    }
}

fn wait_timer(round: &RoundState) -> Timer {
    Timer::WaitExpired {
        height: round.block.header.height,
        seq: round.block.header.sequence_number,
        round: round.wait_round,
    }
}
