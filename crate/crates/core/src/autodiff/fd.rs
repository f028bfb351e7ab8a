//! Central finite-difference gradient checks.
//!
//! These are the independent oracle for every analytic gradient in the crate:
//! a loss is treated as a black-box function of the parameter values, probed
//! one element at a time. Loss closures must be deterministic (fixed inputs,
//! fixed noise) or the comparison is meaningless.

use super::params::ParamSet;
use crate::math::Real;

/// Central-difference gradient of `loss_fn` with respect to parameter `id`.
/// `loss_fn` must not mutate parameter values (it gets `&mut` only so it can
/// run zero_grads / tape passes internally).
pub fn fd_grad<F: Real>(
    pset: &mut ParamSet<F>,
    id: usize,
    eps: f64,
    mut loss_fn: impl FnMut(&mut ParamSet<F>) -> f64,
) -> Vec<f64> {
    let n = pset.value(id).len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let orig = pset.value(id)[i];
        pset.value_mut(id)[i] = orig + F::from_f64(eps);
        let plus = loss_fn(pset);
        pset.value_mut(id)[i] = orig - F::from_f64(eps);
        let minus = loss_fn(pset);
        pset.value_mut(id)[i] = orig;
        out.push((plus - minus) / (2.0 * eps));
    }
    out
}

/// Max over elements of |a - b| / max(|a|, |b|, floor). The floor keeps
/// near-zero gradients from inflating the ratio with FD round-off noise.
pub fn max_rel_err(analytic: &[f64], fd: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), fd.len());
    analytic
        .iter()
        .zip(fd)
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}
