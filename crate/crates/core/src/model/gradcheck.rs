//! Finite-difference verification of the analytic gradient.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{MaeModel, ParamLayout, SampleView};
use crate::masking::Mask;
use crate::rng::keyed_rng;
use crate::{key, Error, Result};

/// Scalars whose analytic gradient is below this magnitude are checked only
/// when a tensor has nothing larger; central differences on them measure
/// truncation noise rather than the gradient.
pub const MIN_CHECKED_GRAD: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst_param: String,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare the analytic gradient of the sample loss with central differences
/// `(f(θ+eps) − f(θ−eps)) / (2·eps)` on at least `n_check` scalars drawn from
/// every tensor of the layout.
/// Central-difference check of `analytic` against `loss` at the scalars
/// `indices` of `params`. Returns the largest relative error, the index where
/// it occurred, and both gradient values there.
pub fn check_gradient<L>(loss: L, params: &[f64], analytic: &[f64], indices: &[usize], eps: f64) -> Result<(f64, usize, f64, f64)>
where
    L: Fn(&[f64]) -> Result<f64>,
{
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    if analytic.len() != params.len() {
        return Err(Error::Shape(format!("{} gradients for {} parameters", analytic.len(), params.len())));
    }
    let mut theta = params.to_vec();
    let mut worst = (0.0, usize::MAX, 0.0, 0.0);
    for &i in indices {
        let orig = theta[i];
        theta[i] = orig + eps;
        let plus = loss(&theta)?;
        theta[i] = orig - eps;
        let minus = loss(&theta)?;
        theta[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let err = relative_error(analytic[i], numeric);
        if err > worst.0 || worst.1 == usize::MAX {
            worst = (err, i, analytic[i], numeric);
        }
    }
    Ok(worst)
}

/// Pick at least `n_check` scalars, spread over every tensor of `layout`.
/// Within a tensor, entries with `|g| >= MIN_CHECKED_GRAD` come first in
/// random order, then the rest by decreasing magnitude.
pub fn select_indices(layout: &ParamLayout, grads: &[f64], n_check: usize, seed: u64) -> Vec<usize> {
    let mut rng = keyed_rng(key![seed, "grad_check"]);
    let entries = layout.entries();
    let per_tensor = n_check.div_ceil(entries.len().max(1)).max(1);
    let mut picked: Vec<usize> = Vec::new();
    for e in entries {
        let range = e.range();
        let mut pool: Vec<usize> = if range.len() <= 32 * per_tensor {
            range.clone().collect()
        } else {
            (0..32 * per_tensor).map(|_| rng.gen_range(range.clone())).collect()
        };
        pool.sort_unstable();
        pool.dedup();
        pool.shuffle(&mut rng);
        let (mut strong, mut weak): (Vec<usize>, Vec<usize>) = pool.into_iter().partition(|&i| grads[i].abs() >= MIN_CHECKED_GRAD);
        weak.sort_by(|&a, &b| grads[b].abs().total_cmp(&grads[a].abs()));
        strong.extend(weak);
        picked.extend(strong.into_iter().take(per_tensor));
    }
    let total = layout.len();
    while picked.len() < n_check.min(total) {
        let i = rng.gen_range(0..total);
        if !picked.contains(&i) {
            picked.push(i);
        }
    }
    picked.sort_unstable();
    picked.dedup();
    picked
}

/// Compare the analytic gradient of the sample loss with central differences
/// `(f(θ+eps) − f(θ−eps)) / (2·eps)` on at least `n_check` scalars drawn from
/// every tensor of the layout.
pub fn grad_check(model: &MaeModel, params: &[f64], sample: &SampleView<'_>, mask: &Mask, eps: f64, n_check: usize, seed: u64) -> Result<GradCheckReport> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let mut grads = vec![0.0; params.len()];
    model.loss_and_grad(params, sample, mask, &mut grads)?;
    let picked = select_indices(model.layout(), &grads, n_check, seed);
    let (err, i, analytic, numeric) = check_gradient(|p| model.loss_value(p, sample, mask), params, &grads, &picked, eps)?;
    let e = model
        .layout()
        .entries()
        .iter()
        .find(|e| e.range().contains(&i))
        .expect("index inside layout");
    Ok(GradCheckReport {
        max_rel_error: err,
        checked: picked.len(),
        worst_param: format!("{}[{}]", e.name, i - e.offset),
        worst_analytic: analytic,
        worst_numeric: numeric,
    })
}
