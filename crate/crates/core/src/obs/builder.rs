//! Assembles one agent's observation from the recorder and current state.

use crate::autodiff::Tensor;
use crate::error::Result;
use crate::obs::{FeatureRecorder, HeteroObservation, PORT_INPUT_WIDTH, VESSEL_INPUT_WIDTH};
use crate::sim::engine::SimState;
use crate::sim::topology::{TopoIndex, Topology};
use crate::sim::{PortId, VesselId};

/// Scale divisor for tick offsets and route distances.
const EDGE_SCALE: f64 = 100.0;

/// Builds the typed local view of `port`: its own window, all same-route
/// port and vessel neighbors (sorted by id), and edge features appended to
/// each neighbor row — along-route distance for ports, nominal
/// ticks-until-arrival for vessels.
pub fn build_observation(
    topo: &Topology,
    index: &TopoIndex,
    state: &SimState,
    recorder: &FeatureRecorder,
    port: PortId,
    current_vessel: Option<VesselId>,
) -> Result<HeteroObservation> {
    let ppos = FeatureRecorder::port_pos(topo, port)?;
    let n = recorder.n_lookback();

    let center_values = recorder.window_with_edge_feature(recorder.port_windows(), ppos, 0.0);
    let center_window = Tensor::new(vec![n, PORT_INPUT_WIDTH], center_values)?;

    let mut port_neighbors = Vec::new();
    for neighbor in index.port_neighbors.get(&port).into_iter().flatten() {
        let npos = FeatureRecorder::port_pos(topo, *neighbor)?;
        let distance = index
            .route_distance(port, *neighbor)
            .unwrap_or(EDGE_SCALE)
            / EDGE_SCALE;
        let values = recorder.window_with_edge_feature(recorder.port_windows(), npos, distance);
        port_neighbors.push((*neighbor, Tensor::new(vec![n, PORT_INPUT_WIDTH], values)?));
    }

    let mut vessel_neighbors = Vec::new();
    for vessel in index.vessel_neighbors.get(&port).into_iter().flatten() {
        let vpos = FeatureRecorder::vessel_pos(topo, *vessel)?;
        let eta = state
            .ticks_until_arrival(topo, *vessel, port)
            .unwrap_or(EDGE_SCALE)
            / EDGE_SCALE;
        let values = recorder.window_with_edge_feature(recorder.vessel_windows(), vpos, eta);
        vessel_neighbors.push((*vessel, Tensor::new(vec![n, VESSEL_INPUT_WIDTH], values)?));
    }

    Ok(HeteroObservation {
        center: port,
        current_vessel,
        tick: state.tick,
        center_window,
        port_neighbors,
        vessel_neighbors,
        feasible: HeteroObservation::all_feasible(),
    })
}
