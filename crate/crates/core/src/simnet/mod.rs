//! Deterministic discrete-event simulation of the whole system.

mod energy;
mod engine;
mod link;
mod topology;

use thiserror::Error;

use crate::config::ConfigError;
use crate::primitives::NodeId;

pub use energy::EnergyLedger;
pub use engine::{run, run_with_events, RunOutput};
pub use link::{LinkClass, LinkModel};
pub use topology::{build_topology, Site, Topology};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("infeasible topology: {0}")]
    InfeasibleTopology(String),
    #[error("no route from {from} to {to}")]
    Unroutable { from: NodeId, to: NodeId },
    #[error(transparent)]
    Config(#[from] ConfigError),
}
