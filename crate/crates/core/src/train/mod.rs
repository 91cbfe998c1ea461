//! Two-phase actor-critic training.
//!
//! Phase one trains selfish per-agent policies on local rewards; phase two
//! inherits the attention stack and local critics, reinitializes the actor,
//! adds a global critic, and fine-tunes on the global reward. Experience is
//! strictly on-policy: the pool holds one iteration's episodes and is
//! cleared after the update sweep.

pub mod rollout;
pub mod trainer;
pub mod updates;

pub use rollout::{rollout, EpisodeRecord, RolloutMode};
pub use trainer::{finetune, pretrain, train_normal_gc, IterationMetrics, Phase, TrainSettings};
pub use updates::{finetune_update, pretrain_update, LossBreakdown};

use serde::{Deserialize, Serialize};

use crate::obs::HeteroObservation;
use crate::sim::{PortId, VesselId};

/// Loss weights and discounting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Critic weight in the pre-training loss.
    pub pretrain_critic: f64,
    /// Local-critic weight in the fine-tuning loss.
    pub local_critic: f64,
    /// Global-critic weight in the fine-tuning loss.
    pub global_critic: f64,
    /// Per-tick discount.
    pub gamma: f64,
    /// Optional entropy bonus (0 disables it).
    pub entropy: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            pretrain_critic: 0.5,
            local_critic: 0.25,
            global_critic: 0.5,
            gamma: 0.99,
            entropy: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> crate::Result<()> {
        if self.pretrain_critic < 0.0
            || self.local_critic < 0.0
            || self.global_critic < 0.0
            || self.entropy < 0.0
        {
            return Err(crate::Error::config("loss weights must be non-negative"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(crate::Error::config("gamma must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// One action taken at a decision point.
#[derive(Debug, Clone)]
pub struct ActRecord {
    pub vessel: VesselId,
    pub action: usize,
    /// Log-probability at sampling time (diagnostic; updates recompute it).
    pub logp_sampled: f64,
    pub feasible: Vec<bool>,
}

/// One agent's decision point and its semi-MDP interval: `k` ticks to the
/// agent's next decision (or episode end), with the discounted local and
/// global reward sums over that interval. Same-tick repeat decisions of one
/// agent fold into a single transition with a joint log-probability.
#[derive(Debug, Clone)]
pub struct Transition {
    pub agent: PortId,
    /// Port position in topology order.
    pub ppos: usize,
    pub tick: u64,
    /// Index of the tick group this decision belongs to.
    pub group: usize,
    pub acts: Vec<ActRecord>,
    pub k: u64,
    /// Σ_{j=1..k} γ^{j−1} · local reward at tick + j.
    pub local_return: f64,
    /// Same sum over global rewards.
    pub global_return: f64,
    /// Group holding the agent's next observation; `None` at terminal.
    pub next_group: Option<usize>,
    pub terminal: bool,
}

/// All decisions of one simulator tick, with observations of every agent for
/// the global-state summary, and the tick-level semi-MDP interval.
#[derive(Debug, Clone)]
pub struct TickGroup {
    pub tick: u64,
    /// One observation per port, in topology order.
    pub obs_all: Vec<HeteroObservation>,
    /// Indices into the episode's transitions.
    pub decisions: Vec<usize>,
    /// Ticks to the next decision tick of any agent (or episode end).
    pub k: u64,
    /// Discounted global rewards over this group's interval.
    pub global_return: f64,
    pub terminal: bool,
}

/// One training iteration's worth of episodes; cleared after each update
/// sweep (on-policy contract).
#[derive(Debug, Default)]
pub struct ExperiencePool {
    pub episodes: Vec<EpisodeRecord>,
}

impl ExperiencePool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, episode: EpisodeRecord) {
        self.episodes.push(episode);
    }

    pub fn clear(&mut self) {
        self.episodes.clear();
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn transition_count(&self) -> usize {
        self.episodes.iter().map(|e| e.transitions.len()).sum()
    }
}
