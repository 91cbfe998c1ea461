//! Encoder-decoder graph attention with actor/critic headers.
//!
//! The pipeline per agent: temporal attention over each vertex's lookback
//! window lifts heterogeneous features into a shared model width, then two
//! stacked blocks run per-edge-type neighbor self-attention (encoder)
//! followed by attention with the center vertex as query (decoder), whose
//! per-type outputs are concatenated, projected back to the model width, and
//! added residually into the center embedding.

pub mod network;
pub mod params;

pub use network::{EncGatOutput, Forward};
pub use params::{init_params, inherit_for_finetune, ParamScope};

use serde::{Deserialize, Serialize};

use crate::obs::{PORT_INPUT_WIDTH, VESSEL_INPUT_WIDTH};

/// Edge types of the interaction graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeType {
    PortPort,
    PortVessel,
}

impl EdgeType {
    pub const ALL: [EdgeType; 2] = [EdgeType::PortPort, EdgeType::PortVessel];

    pub fn key(self) -> &'static str {
        match self {
            EdgeType::PortPort => "pp",
            EdgeType::PortVessel => "pv",
        }
    }
}

/// Which critic header to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CriticKind {
    /// Takes one agent embedding.
    Local,
    /// Takes the mean of all agent embeddings.
    Global,
}

impl CriticKind {
    pub fn key(self) -> &'static str {
        match self {
            CriticKind::Local => "local",
            CriticKind::Global => "global",
        }
    }
}

/// Network hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub d_model: usize,
    pub ff_width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub n_lookback: usize,
    pub port_input_width: usize,
    pub vessel_input_width: usize,
    pub action_count: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            d_model: 32,
            ff_width: 64,
            heads: 1,
            blocks: 2,
            n_lookback: crate::obs::DEFAULT_LOOKBACK,
            port_input_width: PORT_INPUT_WIDTH,
            vessel_input_width: VESSEL_INPUT_WIDTH,
            action_count: crate::sim::ACTION_COUNT,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.blocks == 0 || self.n_lookback == 0 {
            return Err(crate::Error::config(
                "d_model, heads, blocks and n_lookback must all be positive",
            ));
        }
        if self.d_model % self.heads != 0 {
            return Err(crate::Error::config(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}
