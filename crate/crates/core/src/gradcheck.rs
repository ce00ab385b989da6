//! Central finite-difference gradient validation.
//!
//! Only meaningful at 64-bit precision; the f32 rounding floor sits above
//! any useful tolerance, so the API is fixed to `f64` models.

use crate::error::{Error, Result};
use crate::params::ParamGroup;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

#[derive(Debug, Clone)]
pub struct FdCheckConfig {
    /// Central-difference step. Must lie in `[1e-7, 1e-3]`.
    pub eps: f64,
    pub tol: f64,
    /// Entries sampled per parameter tensor (all entries when smaller).
    pub max_entries_per_param: usize,
    pub seed: u64,
}

impl Default for FdCheckConfig {
    fn default() -> Self {
        FdCheckConfig {
            eps: 1e-5,
            tol: 1e-4,
            max_entries_per_param: 64,
            seed: 0x5eed,
        }
    }
}

/// Per-parameter outcome of one check.
#[derive(Debug, Clone)]
pub struct GradCheckParam {
    pub name: String,
    pub entries_checked: usize,
    pub max_rel_err: f64,
    pub worst_entry: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    /// True when a perturbed loss came back non-finite.
    pub eval_failed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<GradCheckParam>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params
            .iter()
            .all(|p| !p.eval_failed && p.max_rel_err <= self.tol)
    }

    pub fn worst(&self) -> Option<&GradCheckParam> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn render_lines(&self) -> Vec<String> {
        let mut lines: Vec<String> = self
            .params
            .iter()
            .map(|p| {
                format!(
                    "{} {}: max_rel_err={:.3e} ({} entries){}",
                    if !p.eval_failed && p.max_rel_err <= self.tol {
                        "PASS"
                    } else {
                        "FAIL"
                    },
                    p.name,
                    p.max_rel_err,
                    p.entries_checked,
                    if p.eval_failed {
                        " [non-finite loss under perturbation]"
                    } else {
                        ""
                    }
                )
            })
            .collect();
        if let Some(w) = self.worst() {
            lines.push(format!(
                "worst: {} entry {} analytic={:.6e} numeric={:.6e} rel_err={:.3e}",
                w.name, w.worst_entry, w.analytic_at_worst, w.numeric_at_worst, w.max_rel_err
            ));
        }
        lines
    }
}

/// `|a-b| / max(1, |a|, |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0f64.max(a.abs()).max(b.abs())
}

/// Compare autodiff gradients against `(L(θ+ε) − L(θ−ε)) / 2ε` for sampled
/// entries of every trainable parameter.
///
/// `analytic` is the gradient map produced by one backward pass at the
/// unperturbed point; `loss_fn` must re-evaluate the same loss from model
/// state alone. A non-finite perturbed loss is reported as a failed check,
/// not an error.
pub fn fd_gradient_check<M: ParamGroup<f64>>(
    model: &mut M,
    mut loss_fn: impl FnMut(&M) -> Result<f64>,
    analytic: &HashMap<String, Tensor<f64>>,
    cfg: &FdCheckConfig,
) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&cfg.eps) {
        return Err(Error::Contract(format!(
            "fd_gradient_check: eps {} outside [1e-7, 1e-3]",
            cfg.eps
        )));
    }
    let snapshot = crate::params::named_params(model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();

    for (name, value, trainable) in &snapshot {
        if !trainable {
            continue;
        }
        let numel = value.numel();
        let mut indices: Vec<usize> = (0..numel).collect();
        if numel > cfg.max_entries_per_param {
            indices.shuffle(&mut rng);
            indices.truncate(cfg.max_entries_per_param);
            indices.sort_unstable();
        }

        let grad = analytic.get(name).cloned();
        let mut entry = GradCheckParam {
            name: name.clone(),
            entries_checked: indices.len(),
            max_rel_err: 0.0,
            worst_entry: 0,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
            eval_failed: false,
        };

        for &idx in &indices {
            let orig = value.data()[idx];
            crate::params::update_param(model, name, |t| t.data_mut()[idx] = orig + cfg.eps)?;
            let plus = loss_fn(&*model)?;
            crate::params::update_param(model, name, |t| t.data_mut()[idx] = orig - cfg.eps)?;
            let minus = loss_fn(&*model)?;
            crate::params::update_param(model, name, |t| t.data_mut()[idx] = orig)?;

            if !plus.is_finite() || !minus.is_finite() {
                entry.eval_failed = true;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = grad.as_ref().map(|g| g.data()[idx]).unwrap_or(0.0);
            let err = relative_error(a, numeric);
            if err > entry.max_rel_err {
                entry.max_rel_err = err;
                entry.worst_entry = idx;
                entry.analytic_at_worst = a;
                entry.numeric_at_worst = numeric;
            }
        }
        out.push(entry);
    }

    Ok(GradCheckReport {
        params: out,
        tol: cfg.tol,
    })
}
