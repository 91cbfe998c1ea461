//! Parameter construction, initialization, and phase inheritance.
//!
//! Weights draw uniformly from ±sqrt(1/fan_in); layer-norm gains start at 1
//! and biases at 0. Tensors are created in sorted name order so a given seed
//! always produces the same values.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParameterSet, Tensor};
use crate::encgat::{EdgeType, NetConfig};
use crate::error::{Error, Result};
use crate::sim::PortId;

/// Which functional group a parameter belongs to; used when phases update or
/// inherit different subsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamScope {
    /// Input lifts, temporal attention, blocks, null embeddings.
    Encoder,
    Actor,
    LocalCritic,
    GlobalCritic,
}

impl ParamScope {
    pub fn of(name: &str) -> ParamScope {
        if name.starts_with("actor.") {
            ParamScope::Actor
        } else if name.starts_with("critic.local.") {
            ParamScope::LocalCritic
        } else if name.starts_with("critic.global.") {
            ParamScope::GlobalCritic
        } else {
            ParamScope::Encoder
        }
    }
}

enum Init {
    /// Uniform ±sqrt(1/fan_in).
    FanIn(usize),
    Ones,
    Zeros,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn linear_specs(specs: &mut Vec<Spec>, prefix: &str, w: &str, b: &str, rows: usize, cols: usize) {
    specs.push(Spec {
        name: format!("{prefix}{w}"),
        shape: vec![rows, cols],
        init: Init::FanIn(rows),
    });
    specs.push(Spec {
        name: format!("{prefix}{b}"),
        shape: vec![cols],
        init: Init::FanIn(rows),
    });
}

fn layer_norm_specs(specs: &mut Vec<Spec>, prefix: &str, width: usize) {
    specs.push(Spec {
        name: format!("{prefix}.gain"),
        shape: vec![width],
        init: Init::Ones,
    });
    specs.push(Spec {
        name: format!("{prefix}.bias"),
        shape: vec![width],
        init: Init::Zeros,
    });
}

fn attention_specs(specs: &mut Vec<Spec>, prefix: &str, d: usize) {
    for proj in ["wq", "wk", "wv"] {
        specs.push(Spec {
            name: format!("{prefix}.{proj}"),
            shape: vec![d, d],
            init: Init::FanIn(d),
        });
    }
}

fn actor_specs(specs: &mut Vec<Spec>, prefix: &str, cfg: &NetConfig) {
    let width = 2 * cfg.d_model;
    linear_specs(specs, prefix, "w1", "b1", width, width);
    linear_specs(specs, prefix, "w2", "b2", width, cfg.action_count);
}

fn critic_specs(specs: &mut Vec<Spec>, kind: &str, d: usize) {
    let prefix = format!("critic.{kind}.");
    linear_specs(specs, &prefix, "w1", "b1", d, d);
    linear_specs(specs, &prefix, "w2", "b2", d, 1);
}

fn encoder_specs(cfg: &NetConfig) -> Vec<Spec> {
    let d = cfg.d_model;
    let ff = cfg.ff_width;
    let mut specs = Vec::new();

    linear_specs(&mut specs, "input.port.", "w", "b", cfg.port_input_width, d);
    linear_specs(
        &mut specs,
        "input.vessel.",
        "w",
        "b",
        cfg.vessel_input_width,
        d,
    );
    attention_specs(&mut specs, "temporal", d);

    for block in 0..cfg.blocks {
        for edge in EdgeType::ALL {
            for half in ["enc", "dec"] {
                let prefix = format!("blk{block}.{}.{half}", edge.key());
                attention_specs(&mut specs, &prefix, d);
                linear_specs(&mut specs, &format!("{prefix}.ff."), "w1", "b1", d, ff);
                linear_specs(&mut specs, &format!("{prefix}.ff."), "w2", "b2", ff, d);
                layer_norm_specs(&mut specs, &format!("{prefix}.ln1"), d);
                layer_norm_specs(&mut specs, &format!("{prefix}.ln2"), d);
            }
        }
        let ntypes = EdgeType::ALL.len();
        linear_specs(
            &mut specs,
            &format!("blk{block}.proj."),
            "w",
            "b",
            ntypes * d,
            d,
        );
    }
    for edge in EdgeType::ALL {
        specs.push(Spec {
            name: format!("null.{}", edge.key()),
            shape: vec![1, d],
            init: Init::FanIn(d),
        });
    }
    specs
}

fn actor_header_specs(cfg: &NetConfig, separate_agents: Option<&[PortId]>) -> Vec<Spec> {
    let mut specs = Vec::new();
    match separate_agents {
        None => actor_specs(&mut specs, "actor.", cfg),
        Some(agents) => {
            for agent in agents {
                actor_specs(&mut specs, &format!("actor.agent{}.", agent.0), cfg);
            }
        }
    }
    specs
}

fn materialize(specs: Vec<Spec>, rng: &mut ChaCha8Rng, params: &mut ParameterSet) {
    let mut specs = specs;
    specs.sort_by(|a, b| a.name.cmp(&b.name));
    for spec in specs {
        let numel: usize = spec.shape.iter().product();
        let values = match spec.init {
            Init::FanIn(fan_in) => {
                let bound = (1.0 / fan_in as f64).sqrt();
                (0..numel).map(|_| rng.gen_range(-bound..bound)).collect()
            }
            Init::Ones => vec![1.0; numel],
            Init::Zeros => vec![0.0; numel],
        };
        params.insert(spec.name, Tensor::new(spec.shape, values).unwrap());
    }
}

/// Fresh parameters for pre-training: encoder, actor header(s), and the
/// local critic header.
pub fn init_params(
    cfg: &NetConfig,
    rng: &mut ChaCha8Rng,
    separate_agents: Option<&[PortId]>,
) -> ParameterSet {
    let mut params = ParameterSet::new();
    let mut specs = encoder_specs(cfg);
    specs.extend(actor_header_specs(cfg, separate_agents));
    critic_specs(&mut specs, "local", cfg.d_model);
    materialize(specs, rng, &mut params);
    params
}

/// Fresh parameters for training directly on the global reward: encoder,
/// actor header(s), and both critic headers.
pub fn init_params_global(
    cfg: &NetConfig,
    rng: &mut ChaCha8Rng,
    separate_agents: Option<&[PortId]>,
) -> ParameterSet {
    let mut params = init_params(cfg, rng, separate_agents);
    let mut specs = Vec::new();
    critic_specs(&mut specs, "global", cfg.d_model);
    materialize(specs, rng, &mut params);
    params
}

/// Builds the fine-tuning parameter set from a pre-trained one: inherits the
/// encoder and local critic header, reinitializes the actor header(s), and
/// creates a fresh global critic header.
pub fn inherit_for_finetune(
    pretrained: &ParameterSet,
    cfg: &NetConfig,
    rng: &mut ChaCha8Rng,
    separate_agents: Option<&[PortId]>,
) -> Result<ParameterSet> {
    let mut params = ParameterSet::new();
    let mut missing = Vec::new();
    for spec in encoder_specs(cfg) {
        match pretrained.get(&spec.name) {
            Ok(t) => params.insert(spec.name, t.clone()),
            Err(_) => missing.push(spec.name),
        }
    }
    let mut critic = Vec::new();
    critic_specs(&mut critic, "local", cfg.d_model);
    for spec in critic {
        match pretrained.get(&spec.name) {
            Ok(t) => params.insert(spec.name, t.clone()),
            Err(_) => missing.push(spec.name),
        }
    }
    if !missing.is_empty() {
        return Err(Error::contract(format!(
            "pretrained parameters missing: {}",
            missing.join(", ")
        )));
    }
    let mut fresh = actor_header_specs(cfg, separate_agents);
    critic_specs(&mut fresh, "global", cfg.d_model);
    materialize(fresh, rng, &mut params);
    for (_, t) in params.iter_mut() {
        t.grad = None;
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = NetConfig::default();
        let a = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(9), None);
        let b = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(9), None);
        assert_eq!(a, b);
        let c = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(10), None);
        assert_ne!(a, c);
    }

    #[test]
    fn inheritance_keeps_encoder_and_local_critic_but_not_actor() {
        let cfg = NetConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pre = init_params(&cfg, &mut rng, None);
        let fine = inherit_for_finetune(&pre, &cfg, &mut rng, None).unwrap();

        assert_eq!(
            pre.get("temporal.wq").unwrap().values,
            fine.get("temporal.wq").unwrap().values
        );
        assert_eq!(
            pre.get("critic.local.w1").unwrap().values,
            fine.get("critic.local.w1").unwrap().values
        );
        assert_ne!(
            pre.get("actor.w1").unwrap().values,
            fine.get("actor.w1").unwrap().values
        );
        assert!(fine.contains("critic.global.w1"));
        assert!(!pre.contains("critic.global.w1"));
    }

    #[test]
    fn inheritance_reports_missing_parameters() {
        let cfg = NetConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pre = init_params(&cfg, &mut rng, None);
        pre.remove("temporal.wq");
        let err = inherit_for_finetune(&pre, &cfg, &mut rng, None).unwrap_err();
        assert!(err.to_string().contains("temporal.wq"));
    }

    #[test]
    fn separate_actor_headers_are_per_agent() {
        let cfg = NetConfig::default();
        let agents = vec![PortId(0), PortId(3)];
        let params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(2), Some(&agents));
        assert!(params.contains("actor.agent0.w1"));
        assert!(params.contains("actor.agent3.w1"));
        assert!(!params.contains("actor.w1"));
    }

    #[test]
    fn scopes_classify_names() {
        assert_eq!(ParamScope::of("actor.w1"), ParamScope::Actor);
        assert_eq!(ParamScope::of("actor.agent2.w1"), ParamScope::Actor);
        assert_eq!(ParamScope::of("critic.local.b2"), ParamScope::LocalCritic);
        assert_eq!(ParamScope::of("critic.global.w1"), ParamScope::GlobalCritic);
        assert_eq!(ParamScope::of("blk0.pp.enc.wq"), ParamScope::Encoder);
        assert_eq!(ParamScope::of("null.pv"), ParamScope::Encoder);
    }
}
