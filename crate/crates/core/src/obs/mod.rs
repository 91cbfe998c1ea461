//! Per-agent heterogeneous observations.
//!
//! Each port agent sees a typed local graph: itself, the ports and vessels
//! sharing at least one route with it, and a lookback window of feature rows
//! per vertex. Edge features (arrival offset for vessels, route distance for
//! ports) are appended to every row of the corresponding neighbor's window.

pub mod builder;
pub mod recorder;

pub use builder::build_observation;
pub use recorder::FeatureRecorder;

use crate::autodiff::Tensor;
use crate::sim::{PortId, VesselId, ACTION_COUNT};

/// Port feature columns: 7 instantaneous quantities, 3 per-tick booking
/// stats, 8 accumulations over the trailing 5-tick window.
pub const PORT_FEATURES: usize = 18;

/// Vessel feature columns: empty, laden, capacity, remaining space, and the
/// 5-tick accumulations of empty, laden, and their difference.
pub const VESSEL_FEATURES: usize = 7;

/// One edge feature is appended per row: ticks-until-arrival for vessels,
/// along-route distance for ports (zero on the center's own window).
pub const EDGE_FEATURES: usize = 1;

pub const PORT_INPUT_WIDTH: usize = PORT_FEATURES + EDGE_FEATURES;
pub const VESSEL_INPUT_WIDTH: usize = VESSEL_FEATURES + EDGE_FEATURES;

/// Lookback window length.
pub const DEFAULT_LOOKBACK: usize = 20;

/// Ticks covered by the accumulated booking stats.
pub const STATS_WINDOW: usize = 5;

/// One agent's typed local view of the simulation.
///
/// Neighbor lists are sorted by id, contain no duplicates, and never include
/// the center vertex. Every window has exactly `n_lookback` rows, zero-padded
/// at episode start.
#[derive(Debug, Clone)]
pub struct HeteroObservation {
    pub center: PortId,
    /// The vessel whose arrival triggered the decision; `None` for
    /// observations built only for value estimation.
    pub current_vessel: Option<VesselId>,
    pub tick: u64,
    /// [n_lookback × PORT_INPUT_WIDTH]; edge-feature column is zero.
    pub center_window: Tensor,
    /// Ports sharing a route with the center.
    pub port_neighbors: Vec<(PortId, Tensor)>,
    /// Vessels assigned to a route through the center.
    pub vessel_neighbors: Vec<(VesselId, Tensor)>,
    /// Feasible-action mask; never all false.
    pub feasible: Vec<bool>,
}

impl HeteroObservation {
    pub fn all_feasible() -> Vec<bool> {
        vec![true; ACTION_COUNT]
    }
}
