//! Finite-difference oracle for gradient tests.
//!
//! Test support only: nothing in the forward/backward implementation calls
//! into this module. Analytic gradients are compared against central
//! differences evaluated by rerunning the full forward pass at perturbed
//! inputs, so the oracle stays independent of the backward rules it checks.

use crate::autodiff::{ParameterSet, Tensor};

pub const DEFAULT_STEP: f64 = 1e-6;

/// Relative error with a unit floor, so tiny gradients compare absolutely.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / f64::max(1.0, f64::max(a.abs(), b.abs()))
}

/// Central finite difference of `f` w.r.t. one element of `tensor`.
pub fn fd_tensor(f: &mut dyn FnMut(&Tensor) -> f64, tensor: &Tensor, idx: usize, h: f64) -> f64 {
    let mut plus = tensor.clone();
    plus.values[idx] += h;
    let mut minus = tensor.clone();
    minus.values[idx] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Central finite difference of `f` w.r.t. one element of a named parameter.
pub fn fd_param(
    f: &mut dyn FnMut(&ParameterSet) -> f64,
    params: &ParameterSet,
    name: &str,
    idx: usize,
    h: f64,
) -> f64 {
    let mut plus = params.clone();
    plus.get_mut(name).unwrap().values[idx] += h;
    let mut minus = params.clone();
    minus.get_mut(name).unwrap().values[idx] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Checks every element of `tensor`'s analytic gradient against the oracle;
/// returns the worst relative error.
pub fn max_error_tensor(
    f: &mut dyn FnMut(&Tensor) -> f64,
    tensor: &Tensor,
    analytic: &[f64],
    h: f64,
) -> f64 {
    let mut worst = 0.0_f64;
    for idx in 0..tensor.numel() {
        let fd = fd_tensor(f, tensor, idx, h);
        worst = worst.max(relative_error(analytic[idx], fd));
    }
    worst
}

/// Checks selected elements of named parameters against the oracle; entries
/// are (name, element index, analytic value). Returns the worst error.
pub fn max_error_params(
    f: &mut dyn FnMut(&ParameterSet) -> f64,
    params: &ParameterSet,
    entries: &[(String, usize, f64)],
    h: f64,
) -> f64 {
    let mut worst = 0.0_f64;
    for (name, idx, analytic) in entries {
        let fd = fd_param(f, params, name, *idx, h);
        worst = worst.max(relative_error(*analytic, fd));
    }
    worst
}
