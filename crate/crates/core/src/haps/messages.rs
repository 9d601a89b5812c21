//! Wire vocabulary for QUICO and the PBFT-style baseline.
//!
//! Every message carries exactly one signature by its sender over the
//! canonical encoding of the other fields, so a broadcast is signed once no
//! matter how many copies are sent.

use serde::{Deserialize, Serialize};

use crate::canonical_struct;
use crate::codec::{Canonical, DecodeError, Reader};
use crate::crypto::{sign, KeyPair, Signature, SignatureChecker};
use crate::primitives::{hash, Block, BlockHeader, Hash, Millis, NodeId, Transaction};

/// Declares a signed message: `$unsigned` holds the signed fields and `$ty`
/// wraps it with the sender's signature.
macro_rules! signed_message {
    ($(#[$outer:meta])* $ty:ident, $unsigned:ident { $($(#[$fmeta:meta])* $field:ident : $fty:ty),* $(,)? }, sender = $sender:ident) => {
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        pub struct $unsigned {
            $($(#[$fmeta])* pub $field: $fty,)*
        }

        canonical_struct!($unsigned { $($field),* });

        $(#[$outer])*
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        pub struct $ty {
            pub content: $unsigned,
            pub signature: Signature,
        }

        canonical_struct!($ty { content, signature });

        impl $unsigned {
            pub fn sign(self, key: &KeyPair) -> $ty {
                let signature = sign(&self.canonical_bytes(), key);
                $ty { content: self, signature }
            }
        }

        impl $ty {
            pub fn sender(&self) -> NodeId {
                self.content.$sender
            }

            /// Signature present, made by the claimed sender, and valid.
            pub fn verify(&self, checker: &mut SignatureChecker) -> bool {
                self.signature.signer == self.content.$sender
                    && checker.check(&self.content.canonical_bytes(), &self.signature)
            }
        }

        impl std::ops::Deref for $ty {
            type Target = $unsigned;
            fn deref(&self) -> &$unsigned {
                &self.content
            }
        }
    };
}

signed_message!(NewBlock, NewBlockContent { block: Block, creator: NodeId }, sender = creator);

signed_message!(
    BlockAck,
    AckContent {
        height: u64,
        seq: u32,
        block_hash: Hash,
        voter: NodeId,
    },
    sender = voter
);

signed_message!(
    BlockError,
    ErrorContent {
        height: u64,
        seq: u32,
        block_hash: Hash,
        voter: NodeId,
        /// Header failed structural checks (linkage or Merkle root).
        structural: bool,
        disputed: Vec<Hash>,
        /// The reporter's own copy of each disputed transaction it holds.
        claimed_versions: Vec<Transaction>,
    },
    sender = voter
);

signed_message!(
    ErrorCheck,
    ErrorCheckContent {
        height: u64,
        seq: u32,
        tx_id: Hash,
        version_block: Transaction,
        version_pending: Transaction,
        targets: Vec<NodeId>,
        creator: NodeId,
    },
    sender = creator
);

signed_message!(
    ErrorResolve,
    ErrorResolveContent {
        height: u64,
        tx_id: Hash,
        verdict: Verdict,
        resolver: NodeId,
    },
    sender = resolver
);

signed_message!(
    BlockConfirm,
    ConfirmContent {
        header: BlockHeader,
        /// Acknowledgement signatures gathered by the creator, one per voter.
        votes: Vec<Signature>,
        t_b: Millis,
        creator: NodeId,
    },
    sender = creator
);

signed_message!(
    WarningReport,
    WarningContent {
        height: u64,
        reporter: NodeId,
        suspects: Vec<NodeId>,
        evidence: Vec<Hash>,
        reason: WarningReason,
    },
    sender = reporter
);

signed_message!(
    /// Decision forwarded to the nodes that raised a Block ERROR.
    ErrorDecision,
    DecisionContent {
        height: u64,
        tx_id: Hash,
        adopted: Option<Transaction>,
        creator: NodeId,
    },
    sender = creator
);

signed_message!(
    PrePrepare,
    PrePrepareContent { block: Block, leader: NodeId },
    sender = leader
);

signed_message!(
    Commit,
    CommitContent {
        height: u64,
        seq: u32,
        block_hash: Hash,
        voter: NodeId,
        accept: bool,
    },
    sender = voter
);

/// Identifies one version of a disputed transaction by its full encoding.
pub fn version_hash(tx: &Transaction) -> Hash {
    hash(&tx.canonical_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Verdict {
    Version(Hash),
    Unknown,
    Expired,
}

impl Canonical for Verdict {
    fn encode_to(&self, out: &mut Vec<u8>) {
        match self {
            Verdict::Version(h) => {
                out.push(0);
                h.encode_to(out);
            }
            Verdict::Unknown => out.push(1),
            Verdict::Expired => out.push(2),
        }
    }
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(match u8::decode_from(r)? {
            0 => Verdict::Version(Hash::decode_from(r)?),
            1 => Verdict::Unknown,
            2 => Verdict::Expired,
            tag => return Err(DecodeError::InvalidTag { ty: "Verdict", tag }),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WarningReason {
    /// Errors raised against transactions that re-validated correctly.
    FalseError,
    /// More than half the gateways raised errors; the round is on hold.
    MajorityError,
    /// A dispute could not be settled and the transaction was dropped.
    UnresolvedDispute,
    /// Station acknowledgements missing after the waiting period.
    StationTimeout,
    /// Voted against the decided outcome of a baseline round.
    Dissent,
}

impl Canonical for WarningReason {
    fn encode_to(&self, out: &mut Vec<u8>) {
        out.push(match self {
            WarningReason::FalseError => 0,
            WarningReason::MajorityError => 1,
            WarningReason::UnresolvedDispute => 2,
            WarningReason::StationTimeout => 3,
            WarningReason::Dissent => 4,
        });
    }
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(match u8::decode_from(r)? {
            0 => WarningReason::FalseError,
            1 => WarningReason::MajorityError,
            2 => WarningReason::UnresolvedDispute,
            3 => WarningReason::StationTimeout,
            4 => WarningReason::Dissent,
            tag => return Err(DecodeError::InvalidTag { ty: "WarningReason", tag }),
        })
    }
}

/// Every message exchanged between blockchain nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ConsensusMessage {
    Transaction(Transaction),
    NewBlock(NewBlock),
    BlockAck(BlockAck),
    BlockError(BlockError),
    ErrorCheck(ErrorCheck),
    ErrorResolve(ErrorResolve),
    ErrorDecision(ErrorDecision),
    BlockConfirm(BlockConfirm),
    WarningReport(WarningReport),
    PrePrepare(PrePrepare),
    Commit(Commit),
}

impl Canonical for ConsensusMessage {
    fn encode_to(&self, out: &mut Vec<u8>) {
        match self {
            ConsensusMessage::Transaction(m) => {
                out.push(0);
                m.encode_to(out)
            }
            ConsensusMessage::NewBlock(m) => {
                out.push(1);
                m.encode_to(out)
            }
            ConsensusMessage::BlockAck(m) => {
                out.push(2);
                m.encode_to(out)
            }
            ConsensusMessage::BlockError(m) => {
                out.push(3);
                m.encode_to(out)
            }
            ConsensusMessage::ErrorCheck(m) => {
                out.push(4);
                m.encode_to(out)
            }
            ConsensusMessage::ErrorResolve(m) => {
                out.push(5);
                m.encode_to(out)
            }
            ConsensusMessage::ErrorDecision(m) => {
                out.push(6);
                m.encode_to(out)
            }
            ConsensusMessage::BlockConfirm(m) => {
                out.push(7);
                m.encode_to(out)
            }
            ConsensusMessage::WarningReport(m) => {
                out.push(8);
                m.encode_to(out)
            }
            ConsensusMessage::PrePrepare(m) => {
                out.push(9);
                m.encode_to(out)
            }
            ConsensusMessage::Commit(m) => {
                out.push(10);
                m.encode_to(out)
            }
        }
    }

    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(match u8::decode_from(r)? {
            0 => ConsensusMessage::Transaction(Canonical::decode_from(r)?),
            1 => ConsensusMessage::NewBlock(Canonical::decode_from(r)?),
            2 => ConsensusMessage::BlockAck(Canonical::decode_from(r)?),
            3 => ConsensusMessage::BlockError(Canonical::decode_from(r)?),
            4 => ConsensusMessage::ErrorCheck(Canonical::decode_from(r)?),
            5 => ConsensusMessage::ErrorResolve(Canonical::decode_from(r)?),
            6 => ConsensusMessage::ErrorDecision(Canonical::decode_from(r)?),
            7 => ConsensusMessage::BlockConfirm(Canonical::decode_from(r)?),
            8 => ConsensusMessage::WarningReport(Canonical::decode_from(r)?),
            9 => ConsensusMessage::PrePrepare(Canonical::decode_from(r)?),
            10 => ConsensusMessage::Commit(Canonical::decode_from(r)?),
            tag => return Err(DecodeError::InvalidTag { ty: "ConsensusMessage", tag }),
        })
    }
}

impl ConsensusMessage {
    /// Bytes on the link, counting modelled payload sizes of carried readings.
    pub fn wire_len(&self) -> u64 {
        let padding: u64 = match self {
            ConsensusMessage::Transaction(tx) => tx.readings.iter().map(|r| r.padding()).sum(),
            ConsensusMessage::NewBlock(m) => block_padding(&m.block),
            ConsensusMessage::PrePrepare(m) => block_padding(&m.block),
            _ => 0,
        };
        self.canonical_bytes().len() as u64 + padding
    }

    /// Consensus control traffic, as opposed to data transactions.
    pub fn is_control(&self) -> bool {
        !matches!(self, ConsensusMessage::Transaction(_))
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ConsensusMessage::Transaction(_) => "transaction",
            ConsensusMessage::NewBlock(_) => "new_block",
            ConsensusMessage::BlockAck(_) => "block_ack",
            ConsensusMessage::BlockError(_) => "block_error",
            ConsensusMessage::ErrorCheck(_) => "error_check",
            ConsensusMessage::ErrorResolve(_) => "error_resolve",
            ConsensusMessage::ErrorDecision(_) => "error_decision",
            ConsensusMessage::BlockConfirm(_) => "block_confirm",
            ConsensusMessage::WarningReport(_) => "warning_report",
            ConsensusMessage::PrePrepare(_) => "pre_prepare",
            ConsensusMessage::Commit(_) => "commit",
        }
    }
}

fn block_padding(block: &Block) -> u64 {
    block
        .body
        .iter()
        .flat_map(|t| t.readings.iter())
        .map(|r| r.padding())
        .sum()
}
