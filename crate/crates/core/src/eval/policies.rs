//! Non-learning baselines and the checkpoint-backed greedy policy.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::ParameterSet;
use crate::encgat::{Forward, NetConfig};
use crate::error::Result;
use crate::eval::Policy;
use crate::sim::engine::DecisionRequest;
use crate::sim::{EcrEnv, NOOP_ACTION};

/// Always plays the no-op: containers move only with orders and laden
/// shipping.
pub struct NoRepositioningPolicy;

impl Policy for NoRepositioningPolicy {
    fn decide(&mut self, _env: &EcrEnv, _request: &DecisionRequest) -> Result<usize> {
        Ok(NOOP_ACTION)
    }

    fn name(&self) -> &str {
        "no-repositioning"
    }
}

/// Uniform over the feasible actions, from an owned seeded stream.
pub struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> RandomPolicy {
        use rand::SeedableRng;
        RandomPolicy {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Policy for RandomPolicy {
    fn decide(&mut self, _env: &EcrEnv, request: &DecisionRequest) -> Result<usize> {
        let feasible: Vec<usize> = request
            .feasible
            .iter()
            .enumerate()
            .filter(|(_, &f)| f)
            .map(|(i, _)| i)
            .collect();
        if feasible.is_empty() {
            return Err(crate::Error::contract("random policy: all actions masked"));
        }
        Ok(feasible[self.rng.gen_range(0..feasible.len())])
    }

    fn name(&self) -> &str {
        "random"
    }
}

/// Stock-band rule: discharge everything when the port is below
/// `threshold · capacity`, load half the stock when above
/// `(1 − threshold) · capacity`, otherwise do nothing.
pub struct ProportionalHeuristicPolicy {
    pub threshold: f64,
}

impl Default for ProportionalHeuristicPolicy {
    fn default() -> Self {
        ProportionalHeuristicPolicy { threshold: 0.3 }
    }
}

impl Policy for ProportionalHeuristicPolicy {
    fn decide(&mut self, env: &EcrEnv, request: &DecisionRequest) -> Result<usize> {
        let spec = env.topology().port(request.port)?;
        let ppos = env
            .topology()
            .ports
            .iter()
            .position(|p| p.id == request.port)
            .unwrap();
        let stock = env.state().ports[ppos].empty as f64;
        let capacity = spec.capacity as f64;
        if stock < self.threshold * capacity {
            Ok(0) // discharge all
        } else if stock > (1.0 - self.threshold) * capacity {
            Ok(15) // load 50%
        } else {
            Ok(NOOP_ACTION)
        }
    }

    fn name(&self) -> &str {
        "proportional-heuristic"
    }
}

/// Greedy argmax over a trained network's action distribution.
pub struct LearnedPolicy {
    params: ParameterSet,
    net: NetConfig,
    decoder_only: bool,
}

impl LearnedPolicy {
    pub fn new(params: ParameterSet, net: NetConfig, decoder_only: bool) -> LearnedPolicy {
        LearnedPolicy {
            params,
            net,
            decoder_only,
        }
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }
}

impl Policy for LearnedPolicy {
    fn decide(&mut self, env: &EcrEnv, request: &DecisionRequest) -> Result<usize> {
        let obs = env.observe(request.port, Some(request.vessel))?;
        let mut fwd = if self.decoder_only {
            Forward::decoder_only(&self.params, &self.net)
        } else {
            Forward::new(&self.params, &self.net)
        };
        let out = fwd.encgat_forward(&obs)?;
        let dist = fwd.actor_distribution(&out, request.port, request.vessel, &request.feasible)?;
        let probs = fwd.pt.tape.values(dist);
        let mut best = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = i;
            }
        }
        Ok(best)
    }

    fn name(&self) -> &str {
        "learned"
    }
}
