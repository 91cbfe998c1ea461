//! Per-vertex lookback windows of normalized feature rows.
//!
//! The recorder derives one row per vertex per tick from simulator state.
//! Rows are pure functions of (topology, state), so replaying the event log
//! and re-recording reproduces every window bit-exactly.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::obs::{PORT_FEATURES, VESSEL_FEATURES};
use crate::sim::engine::SimState;
use crate::sim::topology::Topology;
use crate::sim::{PortId, VesselId};

#[derive(Debug, Clone)]
pub struct FeatureRecorder {
    n_lookback: usize,
    last_tick: Option<u64>,
    /// Windows indexed by port position; each row is `PORT_FEATURES` wide.
    port_windows: Vec<VecDeque<Vec<f64>>>,
    vessel_windows: Vec<VecDeque<Vec<f64>>>,
}

/// Normalized port feature row. Quantities are scaled by the port's own
/// capacity; the capacity column itself becomes the constant 1.
pub fn port_row(topo: &Topology, state: &SimState, ppos: usize) -> Vec<f64> {
    let spec = &topo.ports[ppos];
    let port = &state.ports[ppos];
    let cap = spec.capacity as f64;
    let stats = port.recent.back().copied().unwrap_or_default();
    let inbound = state.laden_inbound(topo, spec.id);

    let acc = |f: fn(&crate::sim::engine::PortTickStats) -> i64| port.recent_sum(f) as f64 / cap;

    vec![
        // 7 instantaneous quantities
        port.empty as f64 / cap,
        port.on_turnaround_total() as f64 / cap,
        port.laden_waiting_total() as f64 / cap,
        inbound as f64 / cap,
        stats.orders as f64 / cap,
        1.0,
        (spec.capacity - port.empty) as f64 / cap,
        // 3 per-tick booking stats
        stats.fulfilled as f64 / cap,
        stats.failed as f64 / cap,
        stats.orders as f64 / cap,
        // 8 accumulations over the stats window
        acc(|s| s.orders),
        acc(|s| s.fulfilled),
        acc(|s| s.failed),
        acc(|s| s.discharged - s.loaded),
        acc(|s| s.discharged),
        acc(|s| s.loaded),
        acc(|s| s.released),
        acc(|s| s.laden_in),
    ]
}

/// Normalized vessel feature row.
pub fn vessel_row(topo: &Topology, state: &SimState, vpos: usize) -> Vec<f64> {
    let spec = &topo.vessels[vpos];
    let vessel = &state.vessels[vpos];
    let cap = spec.capacity as f64;
    let laden = vessel.laden_total();
    let acc_empty: i64 = vessel.recent.iter().map(|(e, _)| e).sum();
    let acc_laden: i64 = vessel.recent.iter().map(|(_, l)| l).sum();

    vec![
        vessel.empty as f64 / cap,
        laden as f64 / cap,
        1.0,
        vessel.remaining_space(spec.capacity) as f64 / cap,
        acc_empty as f64 / cap,
        acc_laden as f64 / cap,
        (acc_empty - acc_laden) as f64 / cap,
    ]
}

impl FeatureRecorder {
    /// Fresh recorder with all-zero windows.
    pub fn new(topo: &Topology, n_lookback: usize) -> FeatureRecorder {
        FeatureRecorder {
            n_lookback,
            last_tick: None,
            port_windows: topo
                .ports
                .iter()
                .map(|_| {
                    (0..n_lookback)
                        .map(|_| vec![0.0; PORT_FEATURES])
                        .collect()
                })
                .collect(),
            vessel_windows: topo
                .vessels
                .iter()
                .map(|_| {
                    (0..n_lookback)
                        .map(|_| vec![0.0; VESSEL_FEATURES])
                        .collect()
                })
                .collect(),
        }
    }

    pub fn n_lookback(&self) -> usize {
        self.n_lookback
    }

    /// Appends this tick's feature rows. Must be called exactly once per
    /// simulator tick.
    pub fn record_tick(&mut self, topo: &Topology, state: &SimState) -> Result<()> {
        if self.last_tick == Some(state.tick) {
            return Err(Error::contract(format!(
                "record_tick: tick {} already recorded",
                state.tick
            )));
        }
        self.last_tick = Some(state.tick);
        for (ppos, window) in self.port_windows.iter_mut().enumerate() {
            window.pop_front();
            window.push_back(port_row(topo, state, ppos));
        }
        for (vpos, window) in self.vessel_windows.iter_mut().enumerate() {
            window.pop_front();
            window.push_back(vessel_row(topo, state, vpos));
        }
        Ok(())
    }

    pub fn port_window(&self, ppos: usize) -> &VecDeque<Vec<f64>> {
        &self.port_windows[ppos]
    }

    pub fn vessel_window(&self, vpos: usize) -> &VecDeque<Vec<f64>> {
        &self.vessel_windows[vpos]
    }

    /// Window rows with an extra edge-feature column appended to every row.
    pub fn window_with_edge_feature(
        &self,
        windows: &[VecDeque<Vec<f64>>],
        pos: usize,
        edge_value: f64,
    ) -> Vec<f64> {
        let window = &windows[pos];
        let width = window[0].len() + 1;
        let mut out = Vec::with_capacity(self.n_lookback * width);
        for row in window {
            out.extend_from_slice(row);
            out.push(edge_value);
        }
        out
    }

    pub(crate) fn port_windows(&self) -> &[VecDeque<Vec<f64>>] {
        &self.port_windows
    }

    pub(crate) fn vessel_windows(&self) -> &[VecDeque<Vec<f64>>] {
        &self.vessel_windows
    }

    /// Positions of a port / vessel in the window tables.
    pub fn port_pos(topo: &Topology, id: PortId) -> Result<usize> {
        topo.ports
            .iter()
            .position(|p| p.id == id)
            .ok_or_else(|| Error::contract(format!("unknown port {id}")))
    }

    pub fn vessel_pos(topo: &Topology, id: VesselId) -> Result<usize> {
        topo.vessels
            .iter()
            .position(|v| v.id == id)
            .ok_or_else(|| Error::contract(format!("unknown vessel {id}")))
    }
}
