//! Central finite-difference verification of recorded gradients.
//!
//! Runs at f64: the caller instantiates its parameters and forward pass with
//! `F = f64`, hands over the analytic gradients, and this module perturbs
//! sampled components of every trainable tensor to compare against
//! `(f(x+h) - f(x-h)) / 2h`.

use crate::params::{Gradients, ParamId, ParamSet};
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub per_tensor: Vec<TensorCheck>,
    pub max_rel_err: f64,
}

impl Report {
    pub fn worst(&self) -> Option<&TensorCheck> {
        self.per_tensor
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Relative error with an absolute floor, so near-zero pairs do not blow up.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compare analytic `grads` against central differences of `loss_fn`.
///
/// For each trainable tensor the component with the largest analytic
/// gradient is always checked, plus up to `samples_per_tensor - 1` random
/// components. `loss_fn` must be a pure function of the parameter values
/// (rebuild the tape inside it).
pub fn check(
    params: &mut ParamSet<f64>,
    grads: &Gradients<f64>,
    samples_per_tensor: usize,
    eps: f64,
    floor: f64,
    seed: u64,
    mut loss_fn: impl FnMut(&ParamSet<f64>) -> f64,
) -> Report {
    let mut rng = Rng::new(seed);
    let ids: Vec<ParamId> = params
        .iter()
        .filter(|(_, p)| !p.frozen)
        .map(|(id, _)| id)
        .collect();
    let mut per_tensor = Vec::with_capacity(ids.len());
    for id in ids {
        let name = params.get(id).name.clone();
        let numel = params.value(id).numel();
        let mut indices = Vec::new();
        // component with the strongest analytic signal
        let mut best = 0usize;
        let mut best_mag = -1.0f64;
        for i in 0..numel {
            let m = grads.component(id, i).abs();
            if m > best_mag {
                best_mag = m;
                best = i;
            }
        }
        indices.push(best);
        while indices.len() < samples_per_tensor.min(numel) {
            let i = rng.below(numel);
            if !indices.contains(&i) {
                indices.push(i);
            }
        }
        let mut max_rel = 0.0f64;
        for &idx in &indices {
            let analytic = grads.component(id, idx);
            let numeric = central_difference(params, id, idx, eps, &mut loss_fn);
            max_rel = max_rel.max(rel_err(analytic, numeric, floor));
        }
        per_tensor.push(TensorCheck {
            name,
            checked: indices.len(),
            max_rel_err: max_rel,
        });
    }
    let max_rel_err = per_tensor.iter().map(|t| t.max_rel_err).fold(0.0, f64::max);
    Report {
        per_tensor,
        max_rel_err,
    }
}

/// Central finite difference of `loss_fn` w.r.t. one parameter component.
pub fn central_difference(
    params: &mut ParamSet<f64>,
    id: ParamId,
    idx: usize,
    eps: f64,
    loss_fn: &mut impl FnMut(&ParamSet<f64>) -> f64,
) -> f64 {
    let orig = params.value(id).data()[idx];

    let mut plus = params.value(id).clone();
    plus.data_mut()[idx] = orig + eps;
    params.set_value(id, plus);
    let loss_plus = loss_fn(params);

    let mut minus = params.value(id).clone();
    minus.data_mut()[idx] = orig - eps;
    params.set_value(id, minus);
    let loss_minus = loss_fn(params);

    let mut restore = params.value(id).clone();
    restore.data_mut()[idx] = orig;
    params.set_value(id, restore);

    (loss_plus - loss_minus) / (2.0 * eps)
}
