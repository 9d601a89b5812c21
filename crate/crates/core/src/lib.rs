//! Protocol library and deterministic simulator for a HAPS-hosted
//! environment-monitoring blockchain.
//!
//! Sensors sign and endorse readings on their way to ground gateways, gateways
//! aggregate them into transactions, and HAPS stations order transactions into
//! blocks that are agreed with the QUICO protocol (station ACKs from every peer
//! plus a gateway majority, with an error check/resolve loop instead of block
//! rejection). A two-phase PBFT-style protocol is included as a baseline.

pub mod adversary;
pub mod codec;
pub mod config;
pub mod crypto;
pub mod experiment;
pub mod gateway;
pub mod haps;
pub mod merkle;
pub mod metrics;
pub mod primitives;
pub mod simnet;
pub mod wsn;

pub use primitives::{hash, Block, BlockHeader, Hash, Millis, NodeId, Reading, Role, Transaction};
