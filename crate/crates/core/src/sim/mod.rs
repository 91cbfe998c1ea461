//! Seeded discrete-event simulator for empty-container repositioning.
//!
//! Ports hold container pools, vessels sail fixed cyclic routes, trade orders
//! consume empty containers at their source port, and every vessel arrival
//! triggers a repositioning decision. One simulator instance is strictly
//! single-threaded; independent instances may run concurrently.

pub mod engine;
pub mod env;
pub mod event_log;
pub mod orders;
pub mod topology;

pub use engine::{DecisionRequest, SimState, TickReward};
pub use env::{EcrEnv, StepResult};
pub use topology::{OrderMode, Topology};

use serde::{Deserialize, Serialize};

/// Number of repositioning actions: 11 discharge levels (100%..0%) followed
/// by 11 load levels (10%..100%, the last clipped from a nominal 110%).
pub const ACTION_COUNT: usize = 22;

/// The sole no-op action: discharge 0%.
pub const NOOP_ACTION: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PortId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VesselId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RouteId(pub u32);

impl std::fmt::Display for PortId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "P{}", self.0)
    }
}

impl std::fmt::Display for VesselId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "V{}", self.0)
    }
}

impl std::fmt::Display for RouteId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "R{}", self.0)
    }
}

/// Runtime knobs resolved from the run configuration and the topology's
/// order model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimParams {
    pub mode: OrderMode,
    /// Ticks in one episode.
    pub episode_len: u64,
    /// Delay before discharged laden become available empties.
    pub turnaround_ticks: u64,
    /// Positive scale factor applied to consumed-container rewards.
    pub reward_scale: f64,
    /// Travel-noise half-width; a leg's effective length is scaled by a
    /// factor drawn uniformly from [1-eta, 1+eta] when the leg starts.
    pub travel_noise: f64,
}

impl SimParams {
    pub fn for_mode(mode: OrderMode) -> Self {
        SimParams {
            mode,
            episode_len: 224,
            turnaround_ticks: 1,
            reward_scale: 0.01,
            travel_noise: match mode {
                OrderMode::Normal => 0.0,
                OrderMode::Hard => 0.1,
            },
        }
    }
}
