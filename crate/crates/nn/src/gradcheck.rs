//! Analytic vs central finite-difference gradients on a small f64 model.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{NnError, Result};
use crate::model::{tensor_names, InitOptions, SmFno, SmFnoConfig};

pub const FD_STEP: f64 = 1e-4;
/// Tensors larger than this are checked on a seeded subset of entries.
pub const MAX_ENTRIES: usize = 512;

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    /// Entries whose perturbation moved an activation across the kink.
    pub skipped: usize,
    pub max_abs_err: f64,
    /// Largest gradient magnitude among the checked entries.
    pub scale: f64,
    /// `max_abs_err / scale`.
    pub rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    /// Tensors over tolerance, or with no usable entries left.
    pub fn offending(&self, tol: f64) -> Vec<&TensorCheck> {
        self.tensors.iter().filter(|t| !(t.rel_err < tol) || t.checked == 0).collect()
    }

    pub fn skipped(&self) -> usize {
        self.tensors.iter().map(|t| t.skipped).sum()
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.offending(tol).is_empty()
    }
}

/// Scalar probe loss `sum_i w_i out_i` (its output gradient is `w`) and
/// the activation pattern it was evaluated on.
fn probe(model: &SmFno<f64>, input: &[f64], w: &[f64]) -> Result<(f64, Vec<bool>)> {
    let (out, cache) = model.forward(input, true)?;
    Ok((out.iter().zip(w).map(|(a, b)| a * b).sum(), cache.activation_pattern()))
}

pub fn grad_check_report(config: SmFnoConfig, seed: u64) -> Result<GradCheckReport> {
    let mut model = SmFno::<f64>::init(config, InitOptions { seed, random_heads: true, random_biases: true })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n_in = config.in_channels * config.size * config.size;
    let input: Vec<f64> = (0..n_in).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (out, cache) = model.forward(&input, true)?;
    let w: Vec<f64> = (0..out.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let grads = model.backward(&cache, &w)?;
    let pattern = cache.activation_pattern();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.data.clone()).collect();

    let mut checks = Vec::new();
    for (ti, name) in tensor_names(&config).into_iter().enumerate() {
        let len = analytic[ti].len();
        let picks: Vec<usize> = if len <= MAX_ENTRIES { (0..len).collect() } else { sample(&mut rng, len, MAX_ENTRIES).into_vec() };
        let (mut err, mut scale, mut skipped) = (0.0f64, 0.0f64, 0usize);
        for &j in &picks {
            let orig = model.tensors()[ti].data[j];
            model.tensors_mut()[ti].data[j] = orig + FD_STEP;
            let (up, p_up) = probe(&model, &input, &w)?;
            model.tensors_mut()[ti].data[j] = orig - FD_STEP;
            let (down, p_down) = probe(&model, &input, &w)?;
            model.tensors_mut()[ti].data[j] = orig;
            if p_up != pattern || p_down != pattern {
                // The difference quotient straddles a kink; it measures no derivative.
                skipped += 1;
                continue;
            }
            let fd = (up - down) / (2.0 * FD_STEP);
            let a = analytic[ti][j];
            err = err.max((a - fd).abs());
            scale = scale.max(a.abs()).max(fd.abs());
        }
        let rel_err = if scale > 0.0 { err / scale } else { err };
        checks.push(TensorCheck { name, checked: picks.len() - skipped, skipped, max_abs_err: err, scale, rel_err });
    }
    let max_rel_err = checks.iter().fold(0.0f64, |m, c| m.max(c.rel_err));
    Ok(GradCheckReport { tensors: checks, max_rel_err })
}

/// Fails listing every tensor whose relative error is not below `tol`.
pub fn grad_check(config: SmFnoConfig, tol: f64, seed: u64) -> Result<GradCheckReport> {
    let report = grad_check_report(config, seed)?;
    let bad = report.offending(tol);
    if !bad.is_empty() {
        let list: Vec<String> = bad.iter().map(|t| format!("{} ({:.2e})", t.name, t.rel_err)).collect();
        return Err(NnError::GradCheck(format!("tolerance {tol:e} exceeded by {}", list.join(", "))));
    }
    Ok(report)
}
