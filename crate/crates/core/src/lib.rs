//! Empty-container repositioning at desk scale.
//!
//! The crate is organised around the data flow of a training run:
//!
//! - [`autodiff`] — dense f64 tensors, a tape for reverse-mode gradients,
//!   Adam with global-norm clipping, and the binary checkpoint format.
//! - [`encgat`] — the encoder-decoder graph-attention network with temporal
//!   attention, per-edge-type blocks, and actor/critic headers.
//! - [`sim`] — the seeded discrete-event ocean-transport simulator.
//! - [`obs`] — per-agent heterogeneous observations built from simulator state.
//! - [`train`] — experience pools, the two-phase actor-critic losses, and the
//!   pre-train / fine-tune loops.
//! - [`eval`] — non-learning baselines, the evaluation harness, embedding
//!   projection, and topology-transfer tooling.
//! - [`config`] — run configuration and deterministic seed fan-out.

pub mod autodiff;
pub mod config;
pub mod encgat;
pub mod error;
pub mod eval;
pub mod obs;
pub mod sim;
pub mod train;

pub use error::{Error, Result};
