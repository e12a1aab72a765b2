//! Central finite-difference gradient checking.
//!
//! These helpers are the independent reference that every backward pass in
//! this crate is validated against: they only ever call the forward path.

use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Central finite-difference gradient of `f` w.r.t. every entry of `at`.
pub fn numeric_gradient(at: &Tensor, step: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let (r, c) = at.shape();
    let mut grad = Vec::with_capacity(r * c);
    for k in 0..r * c {
        let mut plus = at.data().to_vec();
        let mut minus = plus.clone();
        plus[k] += step;
        minus[k] -= step;
        let fp = f(&Tensor::from_vec(r, c, plus));
        let fm = f(&Tensor::from_vec(r, c, minus));
        grad.push((fp - fm) / (2.0 * step));
    }
    Tensor::from_vec(r, c, grad)
}

/// Relative error between an analytic and a numeric gradient entry.
///
/// The denominator is floored at 1e-3 so near-zero entries are compared
/// absolutely (at tol * 1e-3) instead of amplifying finite-difference
/// roundoff, which sits around 1e-9 for step 1e-5.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-3);
    (analytic - numeric).abs() / denom
}

/// True when every entry of the two gradients agrees within `tol` relative
/// error.
pub fn check_scalar_fn(analytic: &Tensor, numeric: &Tensor, tol: f64) -> bool {
    max_relative_error(analytic, numeric) < tol
}

pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data().iter())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Finite-difference check of a scalar loss over a whole parameter set.
///
/// `f` evaluates the loss at a given parameter set; the analytic gradients
/// are compared entry-by-entry against central differences with the given
/// step. Returns the worst relative error over all checked entries.
pub fn check_params(
    params: &ParamSet,
    analytic: &ParamSet,
    step: f64,
    mut f: impl FnMut(&ParamSet) -> f64,
) -> f64 {
    let mut worst = 0.0f64;
    for (name, tensor) in params.iter() {
        let grad = analytic
            .get(name)
            .unwrap_or_else(|| panic!("no analytic gradient for parameter {name}"));
        let numeric = numeric_gradient(tensor, step, |t| {
            let mut probe = params.clone();
            probe.set(name, t.clone());
            f(&probe)
        });
        worst = worst.max(max_relative_error(grad, &numeric));
    }
    worst
}
