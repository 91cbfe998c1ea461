//! Run configuration and deterministic seed fan-out.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encgat::NetConfig;
use crate::error::{Error, Result};
use crate::sim::topology::OrderMode;
use crate::train::LossWeights;

/// Derives an independent sub-seed from the global seed, a domain label,
/// and an index. SplitMix64 over the label hash keeps streams decorrelated,
/// so adding a consumer never perturbs existing ones.
pub fn seed_stream(global: u64, label: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = global
        .wrapping_add(h)
        .wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Optimizer knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global-norm clip; values <= 0 disable clipping.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            grad_clip: 5.0,
        }
    }
}

/// Ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// Train directly on the global reward, no pre-training phase.
    pub normal_gc: bool,
    /// Per-agent actor headers instead of a shared one.
    pub separate_actors: bool,
    /// Skip the encoder self-attention; neighbors go straight to the decoder.
    pub decoder_only: bool,
}

/// Everything one run needs. Unknown keys in a config file are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Topology file path, or "bundled" for the built-in 6-port network.
    pub topology: String,
    pub mode: OrderMode,
    pub episode_len: u64,
    pub turnaround_ticks: u64,
    pub reward_scale: f64,
    pub pretrain_iterations: usize,
    pub finetune_iterations: usize,
    pub episodes_per_iteration: usize,
    pub network: NetConfig,
    pub loss: LossWeights,
    pub optimizer: OptimizerConfig,
    pub seeds: Vec<u64>,
    pub out_dir: String,
    pub ablation: AblationFlags,
    /// Write checkpoints every n iterations (0 = only at phase ends).
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            topology: "bundled".into(),
            mode: OrderMode::Normal,
            episode_len: 224,
            turnaround_ticks: 1,
            reward_scale: 0.01,
            pretrain_iterations: 100,
            finetune_iterations: 200,
            episodes_per_iteration: 1,
            network: NetConfig::default(),
            loss: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            seeds: vec![0],
            out_dir: "runs/out".into(),
            ablation: AblationFlags::default(),
            checkpoint_every: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization")
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.loss.validate()?;
        if self.episode_len == 0 {
            return Err(Error::config("episode_len must be positive"));
        }
        if self.reward_scale <= 0.0 || !self.reward_scale.is_finite() {
            return Err(Error::config("reward_scale must be positive"));
        }
        if self.optimizer.learning_rate < 0.0 {
            return Err(Error::config("learning_rate must be non-negative"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if self.episodes_per_iteration == 0 {
            return Err(Error::config("episodes_per_iteration must be positive"));
        }
        Ok(())
    }

    /// Resolves the topology, loading from disk unless "bundled".
    pub fn load_topology(&self, relative_to: Option<&Path>) -> Result<crate::sim::Topology> {
        if self.topology == "bundled" {
            return Ok(crate::sim::topology::bundled());
        }
        let path = PathBuf::from(&self.topology);
        let path = match (path.is_absolute(), relative_to) {
            (false, Some(base)) => base.join(&path),
            _ => path,
        };
        crate::sim::Topology::load(&path)
    }

    pub fn sim_params(&self) -> crate::sim::SimParams {
        let mut p = crate::sim::SimParams::for_mode(self.mode);
        p.episode_len = self.episode_len;
        p.turnaround_ticks = self.turnaround_ticks;
        p.reward_scale = self.reward_scale;
        p
    }
}
