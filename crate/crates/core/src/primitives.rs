//! Domain types shared by every node role: identities, readings,
//! transactions and blocks.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha3::{Digest, Sha3_256};

use crate::canonical_struct;
use crate::codec::{Canonical, DecodeError, Reader};
use crate::crypto::Signature;
use crate::merkle;

/// Simulated time in milliseconds.
pub type Millis = u64;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Hash(pub [u8; 32]);

impl Hash {
    pub const ZERO: Hash = Hash([0u8; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for Hash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Hash({}..)", &self.to_hex()[..12])
    }
}

impl fmt::Display for Hash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Canonical for Hash {
    fn encode_to(&self, out: &mut Vec<u8>) {
        self.0.encode_to(out);
    }
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Hash(r.take_array()?))
    }
}

/// SHA3-256 digest.
pub fn hash(data: &[u8]) -> Hash {
    Hash(Sha3_256::digest(data).into())
}

/// Hash of the concatenation `a || b`.
pub fn hash_pair(a: &Hash, b: &Hash) -> Hash {
    let mut h = Sha3_256::new();
    h.update(a.0);
    h.update(b.0);
    Hash(h.finalize().into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    Sensor,
    ClusterHead,
    Gateway,
    HapsStation,
    CloudUser,
    Admin,
}

impl Role {
    fn tag(self) -> u8 {
        match self {
            Role::Sensor => 0,
            Role::ClusterHead => 1,
            Role::Gateway => 2,
            Role::HapsStation => 3,
            Role::CloudUser => 4,
            Role::Admin => 5,
        }
    }

    fn short(self) -> &'static str {
        match self {
            Role::Sensor => "S",
            Role::ClusterHead => "CH",
            Role::Gateway => "G",
            Role::HapsStation => "H",
            Role::CloudUser => "U",
            Role::Admin => "ADM",
        }
    }
}

impl Canonical for Role {
    fn encode_to(&self, out: &mut Vec<u8>) {
        out.push(self.tag());
    }
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(match u8::decode_from(r)? {
            0 => Role::Sensor,
            1 => Role::ClusterHead,
            2 => Role::Gateway,
            3 => Role::HapsStation,
            4 => Role::CloudUser,
            5 => Role::Admin,
            tag => return Err(DecodeError::InvalidTag { ty: "Role", tag }),
        })
    }
}

/// Node identity: a role plus an index unique within that role.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId {
    pub role: Role,
    pub index: u32,
}

impl NodeId {
    pub const fn new(role: Role, index: u32) -> Self {
        Self { role, index }
    }
    pub const fn sensor(index: u32) -> Self {
        Self::new(Role::Sensor, index)
    }
    pub const fn gateway(index: u32) -> Self {
        Self::new(Role::Gateway, index)
    }
    pub const fn station(index: u32) -> Self {
        Self::new(Role::HapsStation, index)
    }
    pub const fn admin() -> Self {
        Self::new(Role::Admin, 0)
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.role.short(), self.index)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

canonical_struct!(NodeId { role, index });

/// One sensed sample.
///
/// `payload` holds the bytes actually carried; `wire_size` is the size the
/// sample occupies on the air (payload sizes of many kilobytes are modelled
/// by size, not materialised). `secret_malicious_flag` is ground truth for
/// the metrics and must never be consulted by node logic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reading {
    pub sensor: NodeId,
    pub timestamp: Millis,
    pub payload: Vec<u8>,
    pub wire_size: u32,
    pub value: f64,
    pub secret_malicious_flag: bool,
}

canonical_struct!(Reading {
    sensor,
    timestamp,
    payload,
    wire_size,
    value,
    secret_malicious_flag,
});

impl Reading {
    /// Bytes beyond the encoded form that the sample occupies on a link.
    pub fn padding(&self) -> u64 {
        u64::from(self.wire_size).saturating_sub(self.payload.len() as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Endorsement {
    pub endorser: NodeId,
    pub signature: Signature,
}

canonical_struct!(Endorsement { endorser, signature });

/// The part of a transaction covered by the creator's signature.
#[derive(Debug, Clone, PartialEq)]
pub struct TransactionBody {
    pub origin_gateway: NodeId,
    pub readings: Vec<Reading>,
    pub creation_timestamp: Millis,
    pub expiry_deadline: Millis,
    pub service_id: u32,
}

canonical_struct!(TransactionBody {
    origin_gateway,
    readings,
    creation_timestamp,
    expiry_deadline,
    service_id,
});

impl TransactionBody {
    /// Signs the body as its origin gateway and derives the id.
    pub fn sign(self, key: &crate::crypto::KeyPair) -> Transaction {
        let creator_signature = crate::crypto::sign(&self.canonical_bytes(), key);
        let mut tx = Transaction {
            id: Hash::ZERO,
            origin_gateway: self.origin_gateway,
            readings: self.readings,
            creation_timestamp: self.creation_timestamp,
            expiry_deadline: self.expiry_deadline,
            service_id: self.service_id,
            creator_signature,
            endorsements: Vec::new(),
        };
        tx.id = tx.compute_id();
        tx
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transaction {
    pub id: Hash,
    pub origin_gateway: NodeId,
    pub readings: Vec<Reading>,
    pub creation_timestamp: Millis,
    pub expiry_deadline: Millis,
    pub service_id: u32,
    pub creator_signature: Signature,
    pub endorsements: Vec<Endorsement>,
}

canonical_struct!(Transaction {
    id,
    origin_gateway,
    readings,
    creation_timestamp,
    expiry_deadline,
    service_id,
    creator_signature,
    endorsements,
});

impl Transaction {
    pub fn body(&self) -> TransactionBody {
        TransactionBody {
            origin_gateway: self.origin_gateway,
            readings: self.readings.clone(),
            creation_timestamp: self.creation_timestamp,
            expiry_deadline: self.expiry_deadline,
            service_id: self.service_id,
        }
    }

    /// Bytes the creator signs.
    pub fn signing_bytes(&self) -> Vec<u8> {
        self.body().canonical_bytes()
    }

    /// Identifier over every field except `id` and `endorsements`.
    pub fn compute_id(&self) -> Hash {
        let mut bytes = self.signing_bytes();
        self.creator_signature.encode_to(&mut bytes);
        hash(&bytes)
    }

    /// Canonical bytes of every field except `endorsements`, which forwarding
    /// nodes append in transit.
    pub fn core_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.id.encode_to(&mut out);
        self.body().encode_to(&mut out);
        self.creator_signature.encode_to(&mut out);
        out
    }

    /// Message a forwarding node signs to endorse this transaction.
    pub fn endorsement_bytes(&self) -> Vec<u8> {
        let mut out = b"hapschain/tx-endorse/v1".to_vec();
        self.id.encode_to(&mut out);
        out
    }

    pub fn id_is_consistent(&self) -> bool {
        self.id == self.compute_id()
    }

    pub fn is_expired(&self, now: Millis) -> bool {
        now >= self.expiry_deadline
    }

    /// Size on the wire, including modelled payload bytes.
    pub fn wire_len(&self) -> u64 {
        self.canonical_bytes().len() as u64 + self.readings.iter().map(Reading::padding).sum::<u64>()
    }

    pub fn malicious_readings(&self) -> usize {
        self.readings.iter().filter(|r| r.secret_malicious_flag).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockHeader {
    pub height: u64,
    pub sequence_number: u32,
    pub previous_hash: Hash,
    pub merkle_root: Hash,
    pub timestamp: Millis,
    pub creator: NodeId,
}

canonical_struct!(BlockHeader {
    height,
    sequence_number,
    previous_hash,
    merkle_root,
    timestamp,
    creator,
});

impl BlockHeader {
    pub fn hash(&self) -> Hash {
        hash(&self.canonical_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub header: BlockHeader,
    pub body: Vec<Transaction>,
}

canonical_struct!(Block { header, body });

impl Block {
    pub fn genesis() -> Self {
        Block {
            header: BlockHeader {
                height: 0,
                sequence_number: 0,
                previous_hash: Hash::ZERO,
                merkle_root: body_root(&[]),
                timestamp: 0,
                creator: NodeId::station(0),
            },
            body: Vec::new(),
        }
    }

    pub fn hash(&self) -> Hash {
        self.header.hash()
    }

    pub fn tx_ids(&self) -> Vec<Hash> {
        self.body.iter().map(|t| t.id).collect()
    }

    /// Header root matches the body and the body is in canonical order.
    pub fn is_well_formed(&self) -> bool {
        self.header.merkle_root == body_root(&self.body)
            && self.body.windows(2).all(|w| tx_order_key(&w[0]) < tx_order_key(&w[1]))
    }

    pub fn wire_len(&self) -> u64 {
        self.header.canonical_bytes().len() as u64
            + 4
            + self.body.iter().map(Transaction::wire_len).sum::<u64>()
    }
}

/// Ordering of transactions inside a block body.
pub fn tx_order_key(tx: &Transaction) -> (Millis, Hash) {
    (tx.creation_timestamp, tx.id)
}

/// Sorts transactions into body order.
pub fn sort_body(body: &mut [Transaction]) {
    body.sort_by_key(tx_order_key);
}

/// Merkle root over the ids of a block body; empty bodies map to a fixed marker.
pub fn body_root(body: &[Transaction]) -> Hash {
    if body.is_empty() {
        return empty_body_root();
    }
    let ids: Vec<Hash> = body.iter().map(|t| t.id).collect();
    merkle::merkle_root(&ids).expect("non-empty leaf set")
}

pub fn empty_body_root() -> Hash {
    hash(b"hapschain/empty-body/v1")
}
