//! Ground and aerial gateway behaviour.
//!
//! A gateway filters sensor packets, aggregates them into transactions, keeps
//! a pending list and a header-only chain, and votes on new blocks.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::Canonical;
use crate::crypto::{open, seal, sign, Ciphertext, CryptoError, KeyPair, PublicKey, SignatureChecker};
use crate::haps::messages::{
    version_hash, AckContent, BlockAck, BlockConfirm, BlockError, ErrorCheck, ErrorContent,
    ErrorResolve, ErrorResolveContent, Verdict,
};
use crate::merkle::{verify_proof, Side};
use crate::primitives::{
    Block, BlockHeader, Endorsement, Hash, Millis, NodeId, Reading, Role, Transaction,
    TransactionBody,
};
use crate::wsn::{distance_km, relative_deviation, DataPacket};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("block at height {got}, expected {expected}")]
    HeightMismatch { expected: u64, got: u64 },
    #[error("invalid block confirm: {0}")]
    InvalidConfirm(&'static str),
    #[error("no header at height {0}")]
    UnknownHeader(u64),
    #[error("header does not extend the chain tip")]
    BrokenLink,
    #[error("sealed transaction rejected: {0}")]
    Sealed(&'static str),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

/// Transactions created or forwarded by a node and not yet confirmed.
#[derive(Debug, Clone, Default)]
pub struct PendingList {
    entries: BTreeMap<Hash, (Transaction, Millis)>,
}

impl PendingList {
    pub fn insert(&mut self, tx: Transaction, now: Millis) {
        self.entries.entry(tx.id).or_insert((tx, now));
    }

    pub fn get(&self, id: &Hash) -> Option<&Transaction> {
        self.entries.get(id).map(|(t, _)| t)
    }

    pub fn contains(&self, id: &Hash) -> bool {
        self.entries.contains_key(id)
    }

    pub fn remove(&mut self, id: &Hash) -> Option<Transaction> {
        self.entries.remove(id).map(|(t, _)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transaction> {
        self.entries.values().map(|(t, _)| t)
    }

    /// Drops every entry whose deadline has passed and returns their ids.
    pub fn sweep(&mut self, now: Millis) -> Vec<Hash> {
        let expired: Vec<Hash> = self
            .entries
            .iter()
            .filter(|(_, (t, _))| t.is_expired(now))
            .map(|(id, _)| *id)
            .collect();
        for id in &expired {
            self.entries.remove(id);
        }
        expired
    }
}

/// Header-only view of the chain kept by light nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct HeaderChain {
    headers: Vec<BlockHeader>,
}

impl Default for HeaderChain {
    fn default() -> Self {
        Self::new()
    }
}

impl HeaderChain {
    pub fn new() -> Self {
        Self {
            headers: vec![Block::genesis().header],
        }
    }

    pub fn tip(&self) -> &BlockHeader {
        self.headers.last().expect("chain starts at genesis")
    }

    pub fn height(&self) -> u64 {
        self.tip().height
    }

    pub fn get(&self, height: u64) -> Option<&BlockHeader> {
        self.headers.get(usize::try_from(height).ok()?)
    }

    pub fn headers(&self) -> &[BlockHeader] {
        &self.headers
    }

    pub fn append(&mut self, header: BlockHeader) -> Result<(), GatewayError> {
        let tip = self.tip();
        if header.height != tip.height + 1 {
            return Err(GatewayError::HeightMismatch {
                expected: tip.height + 1,
                got: header.height,
            });
        }
        if header.previous_hash != tip.hash() {
            return Err(GatewayError::BrokenLink);
        }
        self.headers.push(header);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiscardReason {
    BadSignature,
    Anomalous,
    /// Deferred too long without comparable neighbour readings.
    NoReference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestOutcome {
    Accepted,
    Discarded(DiscardReason),
    Deferred,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Vote {
    Ack(BlockAck),
    Error(BlockError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum UserReply {
    Endorsed(Transaction),
    Reject,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GatewayParams {
    /// Half-width of the time window for neighbour comparison.
    pub neighbor_window: Millis,
    /// Maximum relative deviation from the neighbour median.
    pub tolerance: f64,
    /// Sensors within this distance count as neighbours.
    pub near_radius_km: f64,
    pub expiry_horizon: Millis,
    pub max_deferred_ticks: u32,
    /// Endorsement and neighbour checks on incoming packets. Without them
    /// only the sender signature is checked.
    pub data_validation: bool,
    pub service_id: u32,
}

impl Default for GatewayParams {
    fn default() -> Self {
        Self {
            neighbor_window: 5_000,
            tolerance: 0.5,
            near_radius_km: 0.1,
            expiry_horizon: 1_000,
            max_deferred_ticks: 3,
            data_validation: true,
            service_id: 1,
        }
    }
}

/// Quorum sizes a gateway checks confirms against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfirmQuorum {
    pub station_acks: usize,
    pub gateway_acks: usize,
}

#[derive(Debug)]
pub struct GatewayState {
    pub id: NodeId,
    pub key: KeyPair,
    pub params: GatewayParams,
    pub pending: PendingList,
    pub headers: HeaderChain,
    /// Compromised nodes skip every data check.
    pub malicious: bool,
    sensor_positions: BTreeMap<NodeId, (f64, f64)>,
    /// Intermediate hops each served sensor's packets traverse.
    routes: BTreeMap<NodeId, Vec<NodeId>>,
    buffer: Vec<Reading>,
    deferred: Vec<(DataPacket, u32)>,
    observations: VecDeque<(Millis, NodeId, f64)>,
    candidates: BTreeMap<Hash, Vec<Hash>>,
    last_vote: Option<(u64, u32)>,
}

impl GatewayState {
    pub fn new(key: KeyPair, params: GatewayParams) -> Self {
        Self {
            id: key.owner,
            key,
            params,
            pending: PendingList::default(),
            headers: HeaderChain::new(),
            malicious: false,
            sensor_positions: BTreeMap::new(),
            routes: BTreeMap::new(),
            buffer: Vec::new(),
            deferred: Vec::new(),
            observations: VecDeque::new(),
            candidates: BTreeMap::new(),
            last_vote: None,
        }
    }

    /// Registers a served sensor with its position and the intermediate hops
    /// of its route (empty for sensors in direct range).
    pub fn add_sensor(&mut self, sensor: NodeId, position: (f64, f64), via: Vec<NodeId>) {
        self.sensor_positions.insert(sensor, position);
        self.routes.insert(sensor, via);
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    pub fn deferred(&self) -> usize {
        self.deferred.len()
    }

    pub fn ingest_packet(
        &mut self,
        packet: DataPacket,
        now: Millis,
        checker: &mut SignatureChecker,
    ) -> IngestOutcome {
        if self.malicious {
            self.accept(packet, now);
            return IngestOutcome::Accepted;
        }
        if packet.readings.is_empty() || !packet.sender_signature_valid(checker) {
            return IngestOutcome::Discarded(DiscardReason::BadSignature);
        }
        if !self.params.data_validation {
            self.accept(packet, now);
            return IngestOutcome::Accepted;
        }
        if !packet.endorsements_valid(checker) {
            return IngestOutcome::Discarded(DiscardReason::BadSignature);
        }
        if self.fully_endorsed(&packet) {
            self.accept(packet, now);
            return IngestOutcome::Accepted;
        }
        match self.compare_with_neighbors(&packet) {
            Some(true) => {
                self.accept(packet, now);
                IngestOutcome::Accepted
            }
            Some(false) => IngestOutcome::Discarded(DiscardReason::Anomalous),
            None => {
                self.deferred.push((packet, 0));
                IngestOutcome::Deferred
            }
        }
    }

    /// Every intermediate hop on the sensor's route endorsed the packet.
    fn fully_endorsed(&self, packet: &DataPacket) -> bool {
        let Some(via) = self.routes.get(&packet.sender) else {
            return false;
        };
        if via.is_empty() {
            return false;
        }
        let endorsers: BTreeSet<NodeId> = packet.endorsers().collect();
        via.iter().all(|hop| endorsers.contains(hop))
    }

    /// `Some(consistent)` when neighbour readings exist for every reading in
    /// the packet, `None` otherwise.
    fn compare_with_neighbors(&self, packet: &DataPacket) -> Option<bool> {
        let mut consistent = true;
        for r in &packet.readings {
            let median = self.neighbor_median(r)?;
            if relative_deviation(r.value, median) > self.params.tolerance {
                consistent = false;
            }
        }
        Some(consistent)
    }

    fn neighbor_median(&self, r: &Reading) -> Option<f64> {
        let origin = *self.sensor_positions.get(&r.sensor)?;
        let w = self.params.neighbor_window;
        let mut values: Vec<f64> = self
            .observations
            .iter()
            .filter(|(t, s, _)| {
                *s != r.sensor
                    && t.abs_diff(r.timestamp) <= w
                    && self
                        .sensor_positions
                        .get(s)
                        .is_some_and(|p| distance_km(*p, origin) <= self.params.near_radius_km)
            })
            .map(|(_, _, v)| *v)
            .collect();
        if values.is_empty() {
            return None;
        }
        values.sort_by(f64::total_cmp);
        let n = values.len();
        Some(if n % 2 == 1 {
            values[n / 2]
        } else {
            (values[n / 2 - 1] + values[n / 2]) / 2.0
        })
    }

    fn accept(&mut self, packet: DataPacket, now: Millis) {
        let horizon = now.saturating_sub(2 * self.params.neighbor_window);
        while self.observations.front().is_some_and(|(t, _, _)| *t < horizon) {
            self.observations.pop_front();
        }
        for r in &packet.readings {
            self.observations.push_back((r.timestamp, r.sensor, r.value));
        }
        self.buffer.extend(packet.readings);
    }

    fn revisit_deferred(&mut self, now: Millis) -> Vec<(IngestOutcome, DataPacket)> {
        let waiting = std::mem::take(&mut self.deferred);
        let mut outcomes = Vec::new();
        for (packet, ticks) in waiting {
            match self.compare_with_neighbors(&packet) {
                Some(true) => {
                    outcomes.push((IngestOutcome::Accepted, packet.clone()));
                    self.accept(packet, now);
                }
                Some(false) => outcomes.push((IngestOutcome::Discarded(DiscardReason::Anomalous), packet)),
                None if ticks + 1 >= self.params.max_deferred_ticks => {
                    outcomes.push((IngestOutcome::Discarded(DiscardReason::NoReference), packet))
                }
                None => self.deferred.push((packet, ticks + 1)),
            }
        }
        outcomes
    }

    /// Periodic aggregation tick: expiry sweep, deferred re-evaluation, then
    /// at most one transaction from the buffer.
    pub fn aggregate(&mut self, now: Millis) -> AggregateOutcome {
        let expired = self.pending.sweep(now);
        let resolved = self.revisit_deferred(now);
        let mut seen = BTreeSet::new();
        let readings: Vec<Reading> = std::mem::take(&mut self.buffer)
            .into_iter()
            .filter(|r| seen.insert((r.sensor, r.timestamp)))
            .collect();
        let transaction = if readings.is_empty() {
            None
        } else {
            let tx = TransactionBody {
                origin_gateway: self.id,
                readings,
                creation_timestamp: now,
                expiry_deadline: now + self.params.expiry_horizon,
                service_id: self.params.service_id,
            }
            .sign(&self.key);
            self.pending.insert(tx.clone(), now);
            Some(tx)
        };
        AggregateOutcome {
            transaction,
            expired,
            resolved,
        }
    }

    /// Light validation of a proposed block against the pending list.
    ///
    /// `Ok(None)` means the proposal is older than one already voted on. A
    /// resend of the same proposal is voted on again.
    pub fn on_new_block(&mut self, block: &Block) -> Result<Option<Vote>, GatewayError> {
        let h = &block.header;
        let expected = self.headers.height() + 1;
        if h.height != expected {
            return Err(GatewayError::HeightMismatch {
                expected,
                got: h.height,
            });
        }
        if self
            .last_vote
            .is_some_and(|(height, seq)| height == h.height && seq > h.sequence_number)
        {
            return Ok(None);
        }
        self.last_vote = Some((h.height, h.sequence_number));
        let block_hash = block.hash();
        self.candidates.insert(block_hash, block.tx_ids());

        let structural = h.previous_hash != self.headers.tip().hash() || !block.is_well_formed();
        let mut disputed = Vec::new();
        let mut claimed_versions = Vec::new();
        for tx in &block.body {
            if let Some(local) = self.pending.get(&tx.id) {
                if local.core_bytes() != tx.core_bytes() {
                    disputed.push(tx.id);
                    claimed_versions.push(local.clone());
                }
            }
        }
        if structural || !disputed.is_empty() {
            return Ok(Some(Vote::Error(
                ErrorContent {
                    height: h.height,
                    seq: h.sequence_number,
                    block_hash,
                    voter: self.id,
                    structural,
                    disputed,
                    claimed_versions,
                }
                .sign(&self.key),
            )));
        }
        Ok(Some(Vote::Ack(self.ack(block))))
    }

    pub fn ack(&self, block: &Block) -> BlockAck {
        AckContent {
            height: block.header.height,
            seq: block.header.sequence_number,
            block_hash: block.hash(),
            voter: self.id,
        }
        .sign(&self.key)
    }

    pub fn on_error_check(&self, check: &ErrorCheck) -> ErrorResolve {
        let verdict = match self.pending.get(&check.tx_id) {
            None => Verdict::Expired,
            Some(local) => {
                let local = local.core_bytes();
                if local == check.version_block.core_bytes() {
                    Verdict::Version(version_hash(&check.version_block))
                } else if local == check.version_pending.core_bytes() {
                    Verdict::Version(version_hash(&check.version_pending))
                } else {
                    Verdict::Unknown
                }
            }
        };
        ErrorResolveContent {
            height: check.height,
            tx_id: check.tx_id,
            verdict,
            resolver: self.id,
        }
        .sign(&self.key)
    }

    /// Verifies the aggregated votes, then appends the header and clears the
    /// confirmed transactions from the pending list.
    pub fn on_block_confirm(
        &mut self,
        confirm: &BlockConfirm,
        quorum: ConfirmQuorum,
        checker: &mut SignatureChecker,
    ) -> Result<(), GatewayError> {
        if !confirm.verify(checker) {
            return Err(GatewayError::InvalidConfirm("creator signature"));
        }
        if !confirm_has_quorum(confirm, quorum, checker) {
            return Err(GatewayError::InvalidConfirm("quorum"));
        }
        let header = confirm.header.clone();
        let block_hash = header.hash();
        self.headers.append(header)?;
        if let Some(ids) = self.candidates.remove(&block_hash) {
            for id in ids {
                self.pending.remove(&id);
            }
        }
        let height = self.headers.height();
        self.candidates.clear();
        if self.last_vote.is_some_and(|(h, _)| h < height) {
            self.last_vote = None;
        }
        Ok(())
    }

    /// Checks a user's inclusion proof against the stored header and, if it
    /// holds, endorses the transaction.
    pub fn endorse_user_reply(
        &self,
        tx: &Transaction,
        proof: &[(Hash, Side)],
        header_height: u64,
        checker: &mut SignatureChecker,
    ) -> Result<UserReply, GatewayError> {
        let header = self
            .headers
            .get(header_height)
            .ok_or(GatewayError::UnknownHeader(header_height))?;
        let leaf = tx.compute_id();
        let endorsement_msg = tx.endorsement_bytes();
        let endorsements_ok = tx.endorsements.iter().all(|e| {
            e.signature.signer == e.endorser && checker.check(&endorsement_msg, &e.signature)
        });
        if leaf != tx.id || !endorsements_ok || !verify_proof(leaf, proof, header.merkle_root) {
            return Ok(UserReply::Reject);
        }
        Ok(UserReply::Endorsed(endorse_transaction(tx.clone(), &self.key)))
    }

    /// Multi-hop forwarding: records and endorses a transaction from another
    /// gateway before passing it on.
    pub fn forward_transaction(&mut self, tx: Transaction, now: Millis) -> Transaction {
        let tx = endorse_transaction(tx, &self.key);
        self.pending.insert(tx.clone(), now);
        tx
    }

    /// Opens a transaction sealed for this gateway, checks it, endorses it
    /// and seals it again for the next hop.
    pub fn forward_sealed<R: RngCore + CryptoRng>(
        &mut self,
        sealed: &Ciphertext,
        next_hop: &PublicKey,
        now: Millis,
        checker: &mut SignatureChecker,
        rng: &mut R,
    ) -> Result<Ciphertext, GatewayError> {
        let tx = open_transaction(sealed, &self.key, checker)?;
        let tx = self.forward_transaction(tx, now);
        Ok(seal(&tx.canonical_bytes(), next_hop, rng)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateOutcome {
    pub transaction: Option<Transaction>,
    pub expired: Vec<Hash>,
    /// Verdicts reached on previously deferred packets.
    pub resolved: Vec<(IngestOutcome, DataPacket)>,
}

pub fn endorse_transaction(mut tx: Transaction, key: &KeyPair) -> Transaction {
    let signature = sign(&tx.endorsement_bytes(), key);
    tx.endorsements.push(Endorsement {
        endorser: key.owner,
        signature,
    });
    tx
}

/// Decrypts and decodes a sealed transaction and checks its signatures.
pub fn open_transaction(
    sealed: &Ciphertext,
    key: &KeyPair,
    checker: &mut SignatureChecker,
) -> Result<Transaction, GatewayError> {
    let bytes = open(sealed, key)?;
    let tx = Transaction::from_canonical(&bytes).map_err(|_| GatewayError::Sealed("malformed"))?;
    if !transaction_signatures_valid(&tx, checker) {
        return Err(GatewayError::Sealed("bad signature"));
    }
    Ok(tx)
}

/// Creator signature, id and every endorsement check out.
pub fn transaction_signatures_valid(tx: &Transaction, checker: &mut SignatureChecker) -> bool {
    if tx.creator_signature.signer != tx.origin_gateway || !tx.id_is_consistent() {
        return false;
    }
    if !checker.check(&tx.signing_bytes(), &tx.creator_signature) {
        return false;
    }
    let msg = tx.endorsement_bytes();
    tx.endorsements
        .iter()
        .all(|e| e.signature.signer == e.endorser && checker.check(&msg, &e.signature))
}

/// Counts distinct valid votes in a confirm by role.
pub fn confirm_has_quorum(
    confirm: &BlockConfirm,
    quorum: ConfirmQuorum,
    checker: &mut SignatureChecker,
) -> bool {
    let header = &confirm.header;
    let block_hash = header.hash();
    let mut stations = BTreeSet::new();
    let mut gateways = BTreeSet::new();
    for sig in &confirm.votes {
        let msg = AckContent {
            height: header.height,
            seq: header.sequence_number,
            block_hash,
            voter: sig.signer,
        }
        .canonical_bytes();
        if !checker.check(&msg, sig) {
            continue;
        }
        match sig.signer.role {
            Role::HapsStation if sig.signer != header.creator => {
                stations.insert(sig.signer);
            }
            Role::Gateway => {
                gateways.insert(sig.signer);
            }
            _ => {}
        }
    }
    stations.len() >= quorum.station_acks && gateways.len() >= quorum.gateway_acks
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{keygen, KeyRegistry};
    use crate::haps::messages::{ConfirmContent, ErrorCheckContent};
    use crate::merkle::{merkle_proof, MerkleProof};
    use crate::primitives::{body_root, sort_body};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    const SEED: [u8; 32] = [7u8; 32];

    fn key(id: NodeId) -> KeyPair {
        keygen(&SEED, id)
    }

    fn checker() -> SignatureChecker {
        let mut reg = KeyRegistry::default();
        for i in 0..8 {
            for id in [NodeId::sensor(i), NodeId::gateway(i), NodeId::station(i)] {
                reg.insert(id, key(id).public_key());
            }
        }
        SignatureChecker::new(reg)
    }

    fn reading(sensor: u32, t: Millis, value: f64) -> Reading {
        Reading {
            sensor: NodeId::sensor(sensor),
            timestamp: t,
            payload: value.to_be_bytes().to_vec(),
            wire_size: 8,
            value,
            secret_malicious_flag: false,
        }
    }

    fn packet(sensor: u32, t: Millis, value: f64) -> DataPacket {
        DataPacket::new(vec![reading(sensor, t, value)], &key(NodeId::sensor(sensor)))
    }

    /// Gateway 0 serving sensors 1..=4 all within a few metres; sensor 1
    /// reaches it through sensor 2, the rest directly.
    fn gateway() -> GatewayState {
        let mut gw = GatewayState::new(key(NodeId::gateway(0)), GatewayParams::default());
        gw.add_sensor(NodeId::sensor(1), (0.0, 0.0), vec![NodeId::sensor(2)]);
        for i in 2..=4 {
            gw.add_sensor(NodeId::sensor(i), (0.01 * i as f64, 0.0), vec![]);
        }
        gw
    }

    fn endorsed_packet(value: f64) -> DataPacket {
        crate::wsn::endorse(packet(1, 100, value), &key(NodeId::sensor(2)))
    }

    #[test]
    fn fully_endorsed_packet_accepted() {
        let mut gw = gateway();
        let mut ck = checker();
        assert_eq!(gw.ingest_packet(endorsed_packet(20.0), 100, &mut ck), IngestOutcome::Accepted);
        assert_eq!(gw.buffered(), 1);
    }

    #[test]
    fn forged_signature_discarded() {
        let mut gw = gateway();
        let mut ck = checker();
        let mut p = packet(3, 100, 20.0);
        p.sender = NodeId::sensor(4);
        assert_eq!(
            gw.ingest_packet(p, 100, &mut ck),
            IngestOutcome::Discarded(DiscardReason::BadSignature)
        );
    }

    #[test]
    fn anomalous_unendorsed_packet_discarded() {
        let mut gw = gateway();
        let mut ck = checker();
        gw.ingest_packet(endorsed_packet(20.0), 100, &mut ck);
        // |95 - 20| / 20 = 3.75 > 0.5
        assert_eq!(
            gw.ingest_packet(packet(3, 150, 95.0), 150, &mut ck),
            IngestOutcome::Discarded(DiscardReason::Anomalous)
        );
        assert_eq!(
            gw.ingest_packet(packet(4, 150, 21.0), 150, &mut ck),
            IngestOutcome::Accepted
        );
    }

    #[test]
    fn unendorsed_without_neighbors_deferred_then_dropped() {
        let mut gw = gateway();
        let mut ck = checker();
        assert_eq!(gw.ingest_packet(packet(3, 100, 20.0), 100, &mut ck), IngestOutcome::Deferred);
        assert_eq!(gw.deferred(), 1);
        gw.aggregate(150);
        gw.aggregate(200);
        let out = gw.aggregate(250);
        assert_eq!(out.resolved[0].0, IngestOutcome::Discarded(DiscardReason::NoReference));
        assert_eq!(out.resolved.len(), 1);
        assert_eq!(gw.deferred(), 0);
    }

    #[test]
    fn deferred_packet_accepted_once_neighbors_arrive() {
        let mut gw = gateway();
        let mut ck = checker();
        gw.ingest_packet(packet(3, 100, 20.0), 100, &mut ck);
        gw.ingest_packet(endorsed_packet(19.0), 120, &mut ck);
        let out = gw.aggregate(150);
        assert_eq!(out.resolved.len(), 1);
        assert_eq!(out.resolved[0].0, IngestOutcome::Accepted);
        assert_eq!(out.transaction.unwrap().readings.len(), 2);
    }

    #[test]
    fn unvalidated_mode_accepts_unendorsed() {
        let mut gw = gateway();
        gw.params.data_validation = false;
        let mut ck = checker();
        assert_eq!(gw.ingest_packet(packet(3, 100, 95.0), 100, &mut ck), IngestOutcome::Accepted);
    }

    #[test]
    fn aggregate_groups_and_dedupes() {
        let mut gw = gateway();
        gw.malicious = false;
        gw.params.data_validation = false;
        let mut ck = checker();
        for (s, t) in [(2, 10), (3, 10), (4, 10), (4, 10)] {
            gw.ingest_packet(packet(s, t, 20.0), 20, &mut ck);
        }
        let out = gw.aggregate(50);
        let tx = out.transaction.unwrap();
        assert_eq!(tx.readings.len(), 3);
        assert_eq!(tx.creation_timestamp, 50);
        assert_eq!(tx.expiry_deadline, 1050);
        assert!(tx.id_is_consistent());
        assert!(transaction_signatures_valid(&tx, &mut ck));
        assert_eq!(gw.pending.len(), 1);
        assert!(gw.aggregate(100).transaction.is_none());
    }

    #[test]
    fn pending_expiry_sweep() {
        let mut gw = gateway();
        gw.params.data_validation = false;
        let mut ck = checker();
        gw.ingest_packet(packet(2, 10, 20.0), 20, &mut ck);
        let tx = gw.aggregate(50).transaction.unwrap();
        assert!(gw.aggregate(1049).expired.is_empty());
        assert_eq!(gw.aggregate(1050).expired, vec![tx.id]);
        assert!(gw.pending.is_empty());
    }

    fn block_with(body: Vec<Transaction>, prev: &BlockHeader) -> Block {
        let mut body = body;
        sort_body(&mut body);
        Block {
            header: BlockHeader {
                height: prev.height + 1,
                sequence_number: 0,
                previous_hash: prev.hash(),
                merkle_root: body_root(&body),
                timestamp: 100,
                creator: NodeId::station(0),
            },
            body,
        }
    }

    fn gateway_with_tx() -> (GatewayState, Transaction) {
        let mut gw = gateway();
        gw.params.data_validation = false;
        let mut ck = checker();
        gw.ingest_packet(packet(2, 10, 20.0), 20, &mut ck);
        let tx = gw.aggregate(50).transaction.unwrap();
        (gw, tx)
    }

    #[test]
    fn matching_block_is_acked() {
        let (mut gw, tx) = gateway_with_tx();
        let block = block_with(vec![tx], gw.headers.tip());
        assert!(matches!(gw.on_new_block(&block), Ok(Some(Vote::Ack(_)))));
    }

    #[test]
    fn flipped_payload_byte_is_disputed() {
        let (mut gw, tx) = gateway_with_tx();
        let mut bad = tx.clone();
        bad.readings[0].payload[0] ^= 1;
        let block = block_with(vec![bad], gw.headers.tip());
        match gw.on_new_block(&block) {
            Ok(Some(Vote::Error(e))) => {
                assert_eq!(e.disputed, vec![tx.id]);
                assert!(!e.structural);
                assert_eq!(e.claimed_versions, vec![tx]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_merkle_root_is_structural_error() {
        let (mut gw, tx) = gateway_with_tx();
        let mut block = block_with(vec![tx], gw.headers.tip());
        block.header.merkle_root = Hash::ZERO;
        match gw.on_new_block(&block) {
            Ok(Some(Vote::Error(e))) => assert!(e.structural),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_height_is_mismatch() {
        let (mut gw, tx) = gateway_with_tx();
        let mut block = block_with(vec![tx], gw.headers.tip());
        block.header.height = 5;
        assert_eq!(
            gw.on_new_block(&block),
            Err(GatewayError::HeightMismatch { expected: 1, got: 5 })
        );
    }

    #[test]
    fn stale_sequence_ignored() {
        let (mut gw, tx) = gateway_with_tx();
        let mut block = block_with(vec![tx], gw.headers.tip());
        block.header.sequence_number = 1;
        assert!(gw.on_new_block(&block).unwrap().is_some());
        block.header.sequence_number = 0;
        assert!(gw.on_new_block(&block).unwrap().is_none());
    }

    fn check_for(tx: &Transaction, other: &Transaction) -> ErrorCheck {
        ErrorCheckContent {
            height: 1,
            seq: 0,
            tx_id: tx.id,
            version_block: other.clone(),
            version_pending: tx.clone(),
            targets: vec![NodeId::gateway(0)],
            creator: NodeId::station(0),
        }
        .sign(&key(NodeId::station(0)))
    }

    #[test]
    fn error_check_verdicts() {
        let (mut gw, tx) = gateway_with_tx();
        let mut other = tx.clone();
        other.readings[0].value = 99.0;

        let r = gw.on_error_check(&check_for(&tx, &other));
        assert_eq!(r.verdict, Verdict::Version(version_hash(&tx)));

        let mut third = tx.clone();
        third.readings[0].value = 1.0;
        let r = gw.on_error_check(&check_for(&third, &other));
        assert_eq!(r.verdict, Verdict::Unknown);

        gw.aggregate(2000);
        let r = gw.on_error_check(&check_for(&tx, &other));
        assert_eq!(r.verdict, Verdict::Expired);
        assert!(r.verify(&mut checker()));
    }

    fn confirm_for(block: &Block, voters: &[NodeId]) -> BlockConfirm {
        let votes = voters
            .iter()
            .map(|v| {
                AckContent {
                    height: block.header.height,
                    seq: block.header.sequence_number,
                    block_hash: block.hash(),
                    voter: *v,
                }
                .sign(&key(*v))
                .signature
            })
            .collect();
        ConfirmContent {
            header: block.header.clone(),
            votes,
            t_b: 200,
            creator: block.header.creator,
        }
        .sign(&key(block.header.creator))
    }

    const QUORUM: ConfirmQuorum = ConfirmQuorum {
        station_acks: 2,
        gateway_acks: 2,
    };

    #[test]
    fn confirm_appends_header_and_clears_pending() {
        let (mut gw, tx) = gateway_with_tx();
        let block = block_with(vec![tx], gw.headers.tip());
        gw.on_new_block(&block).unwrap();
        let voters = [NodeId::station(1), NodeId::station(2), NodeId::gateway(0), NodeId::gateway(1)];
        let confirm = confirm_for(&block, &voters);
        gw.on_block_confirm(&confirm, QUORUM, &mut checker()).unwrap();
        assert_eq!(gw.headers.height(), 1);
        assert_eq!(gw.headers.tip().hash(), block.hash());
        assert!(gw.pending.is_empty());
    }

    #[test]
    fn confirm_without_quorum_rejected() {
        let (mut gw, tx) = gateway_with_tx();
        let block = block_with(vec![tx], gw.headers.tip());
        gw.on_new_block(&block).unwrap();
        // The creator's own vote and a duplicate do not count.
        let voters = [NodeId::station(0), NodeId::station(1), NodeId::gateway(0), NodeId::gateway(0)];
        let confirm = confirm_for(&block, &voters);
        assert_eq!(
            gw.on_block_confirm(&confirm, QUORUM, &mut checker()),
            Err(GatewayError::InvalidConfirm("quorum"))
        );
        assert_eq!(gw.headers.height(), 0);
        assert_eq!(gw.pending.len(), 1);
    }

    fn confirmed_gateway() -> (GatewayState, Vec<Transaction>, Block) {
        let mut gw = gateway();
        gw.params.data_validation = false;
        let mut ck = checker();
        let mut txs = Vec::new();
        for t in 0..5u64 {
            gw.ingest_packet(packet(2, t * 10, 20.0), t * 50, &mut ck);
            txs.push(gw.aggregate(t * 50 + 50).transaction.unwrap());
        }
        let block = block_with(txs.clone(), gw.headers.tip());
        gw.on_new_block(&block).unwrap();
        let voters = [NodeId::station(1), NodeId::station(2), NodeId::gateway(0), NodeId::gateway(1)];
        gw.on_block_confirm(&confirm_for(&block, &voters), QUORUM, &mut ck).unwrap();
        (gw, block.body.clone(), block)
    }

    fn proof_for(block: &Block, i: usize) -> MerkleProof {
        merkle_proof(&block.tx_ids(), i).unwrap()
    }

    #[test]
    fn valid_proof_endorsed() {
        let (gw, body, block) = confirmed_gateway();
        let mut ck = checker();
        let reply = gw.endorse_user_reply(&body[2], &proof_for(&block, 2), 1, &mut ck).unwrap();
        match reply {
            UserReply::Endorsed(tx) => {
                assert_eq!(tx.endorsements.len(), 1);
                assert_eq!(tx.endorsements[0].endorser, gw.id);
            }
            UserReply::Reject => panic!("rejected"),
        }
    }

    #[test]
    fn tampered_sibling_rejected() {
        let (gw, body, block) = confirmed_gateway();
        let mut proof = proof_for(&block, 2);
        proof[1].0 .0[4] ^= 0x10;
        let reply = gw.endorse_user_reply(&body[2], &proof, 1, &mut checker()).unwrap();
        assert_eq!(reply, UserReply::Reject);
    }

    #[test]
    fn proof_against_wrong_height_rejected() {
        let (gw, body, block) = confirmed_gateway();
        let reply = gw.endorse_user_reply(&body[2], &proof_for(&block, 2), 0, &mut checker()).unwrap();
        assert_eq!(reply, UserReply::Reject);
        assert_eq!(
            gw.endorse_user_reply(&body[2], &proof_for(&block, 2), 9, &mut checker()),
            Err(GatewayError::UnknownHeader(9))
        );
    }

    #[test]
    fn sealed_multi_hop_forwarding() {
        // G1 -> G2 -> A1 -> H1, each hop sealed for the next.
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut ck = checker();
        let g1 = key(NodeId::gateway(1));
        let mut g2 = GatewayState::new(key(NodeId::gateway(2)), GatewayParams::default());
        let mut a1 = GatewayState::new(key(NodeId::gateway(3)), GatewayParams::default());
        let h1 = key(NodeId::station(1));

        let tx = TransactionBody {
            origin_gateway: g1.owner,
            readings: vec![reading(1, 5, 20.0)],
            creation_timestamp: 50,
            expiry_deadline: 1050,
            service_id: 1,
        }
        .sign(&g1);
        let c1 = seal(&tx.canonical_bytes(), &g2.key.public_key(), &mut rng).unwrap();
        let c2 = g2.forward_sealed(&c1, &a1.key.public_key(), 60, &mut ck, &mut rng).unwrap();
        // The sealed hop is opaque to anyone but the addressee.
        assert!(open(&c2, &g2.key).is_err());
        let c3 = a1.forward_sealed(&c2, &h1.public_key(), 70, &mut ck, &mut rng).unwrap();
        let delivered = open_transaction(&c3, &h1, &mut ck).unwrap();

        assert_eq!(delivered.id, tx.id);
        let endorsers: Vec<NodeId> = delivered.endorsements.iter().map(|e| e.endorser).collect();
        assert_eq!(endorsers, vec![g2.id, a1.id]);
        assert!(g2.pending.contains(&tx.id));
        assert!(a1.pending.contains(&tx.id));
    }

    #[test]
    fn sealed_tamper_detected() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut ck = checker();
        let g1 = key(NodeId::gateway(1));
        let mut g2 = GatewayState::new(key(NodeId::gateway(2)), GatewayParams::default());
        let tx = TransactionBody {
            origin_gateway: g1.owner,
            readings: vec![reading(1, 5, 20.0)],
            creation_timestamp: 50,
            expiry_deadline: 1050,
            service_id: 1,
        }
        .sign(&g1);
        let mut c1 = seal(&tx.canonical_bytes(), &g2.key.public_key(), &mut rng).unwrap();
        c1.body[3] ^= 1;
        let next = key(NodeId::station(0)).public_key();
        assert!(matches!(
            g2.forward_sealed(&c1, &next, 60, &mut ck, &mut rng),
            Err(GatewayError::Crypto(CryptoError::DecryptionFailure))
        ));
    }

    #[test]
    fn header_chain_linkage() {
        let mut hc = HeaderChain::new();
        let b1 = block_with(vec![], hc.tip());
        hc.append(b1.header.clone()).unwrap();
        let mut b2 = block_with(vec![], hc.tip());
        b2.header.previous_hash = Hash::ZERO;
        assert_eq!(hc.append(b2.header), Err(GatewayError::BrokenLink));
        assert_eq!(hc.height(), 1);
        for w in hc.headers().windows(2) {
            assert_eq!(w[1].previous_hash, w[0].hash());
        }
    }
}
