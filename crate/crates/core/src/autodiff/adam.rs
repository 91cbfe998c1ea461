//! Adam with bias correction, plus global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::autodiff::ParameterSet;
use crate::error::{Error, Result};

/// Optimizer state: per-parameter first/second moments and the shared step
/// counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Self {
        AdamState::with_betas(learning_rate, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        // learning rate 0 is allowed as an explicit null update
        assert!(learning_rate >= 0.0 && epsilon > 0.0);
        assert!(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0);
        AdamState {
            step_count: 0,
            learning_rate,
            beta1,
            beta2,
            epsilon,
            moments: BTreeMap::new(),
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Disabled when `max_norm <= 0`. Returns the pre-clip norm.
pub fn clip_global_norm(params: &mut ParameterSet, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for (_, t) in params.iter() {
        if let Some(g) = &t.grad {
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for (_, t) in params.iter_mut() {
            if let Some(g) = t.grad.as_mut() {
                g.iter_mut().for_each(|v| *v *= scale);
            }
        }
    }
    norm
}

/// One Adam update over every parameter in the set; gradients are zeroed
/// afterwards. Errors if any parameter has no populated gradient.
pub fn adam_step(params: &mut ParameterSet, state: &mut AdamState) -> Result<()> {
    state.step_count += 1;
    let t = state.step_count;
    let bc1 = 1.0 - state.beta1.powi(t as i32);
    let bc2 = 1.0 - state.beta2.powi(t as i32);

    for (name, tensor) in params.iter_mut() {
        let grad = tensor.grad.as_ref().ok_or_else(|| {
            Error::contract(format!("adam_step: parameter `{name}` has no gradient"))
        })?;
        let (m, v) = state
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
        if m.len() != grad.len() {
            return Err(Error::contract(format!(
                "adam_step: moment buffers for `{name}` are misaligned"
            )));
        }
        for i in 0..grad.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * grad[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            tensor.values[i] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
        }
        tensor.zero_grad();
    }
    Ok(())
}
