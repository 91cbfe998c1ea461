//! Line-delimited event records.
//!
//! Every state-changing move is logged, so a straight-line replay can rebuild
//! container pools, vessel schedules, and booking stats from the log alone.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::sim::{PortId, VesselId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Reset {
        seed: u64,
    },
    /// Turnaround containers released back into the empty pool.
    Release {
        tick: u64,
        port: PortId,
        amount: i64,
    },
    /// One trade order, with the amount actually served.
    Order {
        tick: u64,
        src: PortId,
        dst: PortId,
        quantity: i64,
        fulfilled: i64,
    },
    VesselArrival {
        tick: u64,
        vessel: VesselId,
        port: PortId,
    },
    /// Laden destined for this port moved into the turnaround queue.
    DischargeLaden {
        tick: u64,
        vessel: VesselId,
        port: PortId,
        amount: i64,
    },
    /// Waiting laden boarded towards `dst`.
    LoadLaden {
        tick: u64,
        vessel: VesselId,
        port: PortId,
        dst: PortId,
        amount: i64,
    },
    /// A repositioning action's executed amount (positive = discharged to
    /// the port, negative = loaded onto the vessel).
    Reposition {
        tick: u64,
        vessel: VesselId,
        port: PortId,
        action: usize,
        executed: i64,
    },
    /// Vessel departed a stop; `effective` is the noised leg length.
    Departure {
        tick: u64,
        vessel: VesselId,
        stop_index: usize,
        effective: f64,
        arrival_tick: u64,
    },
}

impl Event {
    pub fn tick(&self) -> u64 {
        match self {
            Event::Reset { .. } => 0,
            Event::Release { tick, .. }
            | Event::Order { tick, .. }
            | Event::VesselArrival { tick, .. }
            | Event::DischargeLaden { tick, .. }
            | Event::LoadLaden { tick, .. }
            | Event::Reposition { tick, .. }
            | Event::Departure { tick, .. } => *tick,
        }
    }
}

/// Writes events as one JSON record per line.
pub fn write_events(events: &[Event], path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for event in events {
        serde_json::to_writer(&mut file, event)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_events(path: &Path) -> Result<Vec<Event>> {
    let text = std::fs::read_to_string(path)?;
    let mut events = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        events.push(serde_json::from_str(line)?);
    }
    Ok(events)
}
