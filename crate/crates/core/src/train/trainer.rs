//! The two training procedures: pre-training on local rewards and
//! fine-tuning on the global reward, plus the global-critic-only variant
//! used as an ablation.
//!
//! Each iteration rolls out fresh episodes under the current parameters,
//! sweeps the pool once (one update per episode), and clears it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AdamState, ParameterSet};
use crate::config::{seed_stream, OptimizerConfig};
use crate::encgat::params::{inherit_for_finetune, init_params, init_params_global};
use crate::encgat::NetConfig;
use crate::error::Result;
use crate::sim::{EcrEnv, PortId};
use crate::train::updates::{finetune_update, pretrain_update, LossBreakdown};
use crate::train::{rollout, ExperiencePool, LossWeights, RolloutMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Phase::Pretrain => write!(f, "pretrain"),
            Phase::Finetune => write!(f, "finetune"),
        }
    }
}

/// Training hyperparameters, resolved from the run configuration.
#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub net: NetConfig,
    pub weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub pretrain_iterations: usize,
    pub finetune_iterations: usize,
    pub episodes_per_iteration: usize,
    pub separate_actors: bool,
    pub decoder_only: bool,
    /// Write an interval checkpoint every n iterations into
    /// `checkpoint_dir` (0 disables; phase-end checkpoints are the
    /// caller's job).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<std::path::PathBuf>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            net: NetConfig::default(),
            weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            pretrain_iterations: 100,
            finetune_iterations: 200,
            episodes_per_iteration: 1,
            separate_actors: false,
            decoder_only: false,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

/// One iteration's record for the metrics series.
#[derive(Debug, Clone)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub phase: Phase,
    pub seed: u64,
    pub fulfillment: f64,
    pub mean_local_return: f64,
    pub loss: LossBreakdown,
}

pub const METRICS_CSV_HEADER: &str = "iteration,phase,seed,fulfillment_ratio,mean_local_return,loss_total,loss_actor,loss_critic_local,loss_critic_global,entropy";

impl IterationMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.phase,
            self.seed,
            self.fulfillment,
            self.mean_local_return,
            self.loss.total,
            self.loss.actor,
            self.loss.critic_local,
            self.loss.critic_global,
            self.loss.entropy
        )
    }
}

pub fn metrics_to_csv(metrics: &[IterationMetrics]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for m in metrics {
        out.push_str(&m.csv_row());
        out.push('\n');
    }
    out
}

fn separate_agents(settings: &TrainSettings, env: &EcrEnv) -> Option<Vec<PortId>> {
    settings.separate_actors.then(|| env.port_ids())
}

fn adam_for(opt: &OptimizerConfig) -> AdamState {
    AdamState::with_betas(opt.learning_rate, opt.beta1, opt.beta2, opt.epsilon)
}

enum UpdateKind {
    Pretrain,
    Finetune,
}

/// Shared iteration loop: rollout episodes, one update per episode, clear.
#[allow(clippy::too_many_arguments)]
fn run_phase(
    env: &mut EcrEnv,
    params: &mut ParameterSet,
    settings: &TrainSettings,
    weights: &LossWeights,
    run_seed: u64,
    phase: Phase,
    kind: UpdateKind,
    iterations: usize,
) -> Result<Vec<IterationMetrics>> {
    let mut opt = adam_for(&settings.optimizer);
    let mut sampling = ChaCha8Rng::seed_from_u64(seed_stream(
        run_seed,
        match phase {
            Phase::Pretrain => "sampling-pretrain",
            Phase::Finetune => "sampling-finetune",
        },
        0,
    ));
    let episode_label = match phase {
        Phase::Pretrain => "episode-pretrain",
        Phase::Finetune => "episode-finetune",
    };

    let mut pool = ExperiencePool::new();
    let mut metrics = Vec::with_capacity(iterations);
    for iteration in 0..iterations {
        debug_assert!(pool.is_empty(), "on-policy pool must start empty");
        for e in 0..settings.episodes_per_iteration {
            let episode_seed = seed_stream(
                run_seed,
                episode_label,
                (iteration * settings.episodes_per_iteration + e) as u64,
            );
            let episode = rollout(
                env,
                params,
                &settings.net,
                settings.decoder_only,
                weights.gamma,
                episode_seed,
                RolloutMode::Sample(&mut sampling),
                false,
            )?;
            pool.push(episode);
        }

        let n = pool.episodes.len() as f64;
        let fulfillment = pool.episodes.iter().map(|e| e.fulfillment).sum::<f64>() / n;
        let mean_local_return =
            pool.episodes.iter().map(|e| e.mean_local_return).sum::<f64>() / n;

        let mut loss = LossBreakdown::default();
        for episode in &pool.episodes {
            let breakdown = match kind {
                UpdateKind::Pretrain => pretrain_update(
                    params,
                    episode,
                    &settings.net,
                    settings.decoder_only,
                    weights,
                    &mut opt,
                    settings.optimizer.grad_clip,
                )?,
                UpdateKind::Finetune => finetune_update(
                    params,
                    episode,
                    &settings.net,
                    settings.decoder_only,
                    weights,
                    &mut opt,
                    settings.optimizer.grad_clip,
                )?,
            };
            loss.total += breakdown.total / n;
            loss.actor += breakdown.actor / n;
            loss.critic_local += breakdown.critic_local / n;
            loss.critic_global += breakdown.critic_global / n;
            loss.entropy += breakdown.entropy / n;
        }
        pool.clear();

        log::debug!(
            "{phase} iteration {iteration}: fulfillment {fulfillment:.4}, loss {:.4}",
            loss.total
        );
        if settings.checkpoint_every > 0 && (iteration + 1) % settings.checkpoint_every == 0 {
            if let Some(dir) = &settings.checkpoint_dir {
                let path = dir.join(format!(
                    "checkpoint_{phase}_iter{:04}_seed{run_seed}.ckpt",
                    iteration + 1
                ));
                crate::autodiff::checkpoint::save(params, &path)?;
            }
        }
        metrics.push(IterationMetrics {
            iteration,
            phase,
            seed: run_seed,
            fulfillment,
            mean_local_return,
            loss,
        });
    }
    Ok(metrics)
}

/// Phase one: fresh parameters, selfish local actor-critic objective.
pub fn pretrain(
    env: &mut EcrEnv,
    settings: &TrainSettings,
    run_seed: u64,
) -> Result<(ParameterSet, Vec<IterationMetrics>)> {
    let agents = separate_agents(settings, env);
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed_stream(run_seed, "init-pretrain", 0));
    let mut params = init_params(&settings.net, &mut init_rng, agents.as_deref());
    let metrics = run_phase(
        env,
        &mut params,
        settings,
        &settings.weights.clone(),
        run_seed,
        Phase::Pretrain,
        UpdateKind::Pretrain,
        settings.pretrain_iterations,
    )?;
    Ok((params, metrics))
}

/// Phase two: inherits the attention stack and local critic from
/// `pretrained`, reinitializes the actor header(s), creates a fresh global
/// critic, and trains on the combined global objective.
pub fn finetune(
    env: &mut EcrEnv,
    pretrained: &ParameterSet,
    settings: &TrainSettings,
    run_seed: u64,
) -> Result<(ParameterSet, Vec<IterationMetrics>)> {
    let agents = separate_agents(settings, env);
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed_stream(run_seed, "init-finetune", 0));
    let mut params =
        inherit_for_finetune(pretrained, &settings.net, &mut init_rng, agents.as_deref())?;
    let metrics = run_phase(
        env,
        &mut params,
        settings,
        &settings.weights.clone(),
        run_seed,
        Phase::Finetune,
        UpdateKind::Finetune,
        settings.finetune_iterations,
    )?;
    Ok((params, metrics))
}

/// Ablation: train from scratch directly on the global reward (the
/// fine-tuning objective with the local-critic weight zeroed).
pub fn train_normal_gc(
    env: &mut EcrEnv,
    settings: &TrainSettings,
    run_seed: u64,
) -> Result<(ParameterSet, Vec<IterationMetrics>)> {
    let agents = separate_agents(settings, env);
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed_stream(run_seed, "init-globalonly", 0));
    let mut params = init_params_global(&settings.net, &mut init_rng, agents.as_deref());
    let mut weights = settings.weights;
    weights.local_critic = 0.0;
    let metrics = run_phase(
        env,
        &mut params,
        settings,
        &weights,
        run_seed,
        Phase::Finetune,
        UpdateKind::Finetune,
        settings.finetune_iterations,
    )?;
    Ok((params, metrics))
}
