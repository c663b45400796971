//! Mini-batch training with Adam, per-step exponential learning-rate decay
//! and the epoch-wise `alpha` update.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use snapddm_core::datagen::SubdomainSample;
use snapddm_core::subdomain::SubdomainClass;
use snapddm_core::{ComplexField2D, WavevectorConvention};

use crate::error::{NnError, Result};
use crate::inputs::{encode_sample, in_channels, planes_to_field, target};
use crate::losses::{loss_terms, loss_terms_with_grad, update_alpha, LossConfig, LossTerms, PhysicsContext};
use crate::model::{Cache, SmFno};
use crate::tensor::Real;
use crate::weights::{save_weights, SavedModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Optional cap on optimizer steps; the schedule spans the capped length.
    pub max_steps: Option<usize>,
    pub lr_start: f64,
    /// `lr_start / lr_end`.
    pub lr_decay: f64,
    pub seed: u64,
    pub test_fraction: f64,
    pub checkpoint: Option<PathBuf>,
    /// Stop once a full pass over the training set has relative `L_data`
    /// below this value. Checked at epoch ends.
    pub target_rel_data: Option<f64>,
    pub convention: WavevectorConvention,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 10,
            max_steps: None,
            lr_start: 1e-3,
            lr_decay: 30.0,
            seed: 0,
            test_fraction: 0.1,
            checkpoint: None,
            target_rel_data: None,
            convention: WavevectorConvention::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(NnError::InvalidParams("batch size and epochs must be positive".into()));
        }
        if !(self.lr_start > 0.0) || !(self.lr_decay > 1.0) {
            return Err(NnError::InvalidParams(format!(
                "need lr_start > 0 and lr_end < lr_start (start {}, decay {})",
                self.lr_start, self.lr_decay
            )));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(NnError::InvalidParams(format!("test fraction {}", self.test_fraction)));
        }
        Ok(())
    }

    pub fn lr_end(&self) -> f64 {
        self.lr_start / self.lr_decay
    }
}

/// `lr_start (1 / decay)^(step / (total - 1))`: exactly `lr_start` at step 0
/// and `lr_start / decay` at the last step.
pub fn learning_rate(lr_start: f64, decay: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps <= 1 {
        return lr_start;
    }
    let t = step.min(total_steps - 1) as f64 / (total_steps - 1) as f64;
    lr_start * decay.powf(-t)
}

#[derive(Debug, Clone)]
pub struct Adam<T: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: SmFno<T>,
    v: SmFno<T>,
    t: u32,
}

impl<T: Real> Adam<T> {
    pub fn new(model: &SmFno<T>) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: model.zeros_like(), v: model.zeros_like(), t: 0 }
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    pub fn step(&mut self, model: &mut SmFno<T>, grad: &SmFno<T>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = T::of(lr * c2.sqrt() / c1);
        let eps = T::of(self.eps * c2.sqrt());
        let one = T::one();
        for (((p, g), m), v) in model
            .tensors_mut()
            .into_iter()
            .zip(grad.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for (((pv, gv), mv), vv) in p.data.iter_mut().zip(&g.data).zip(m.data.iter_mut()).zip(v.data.iter_mut()) {
                *mv = b1 * *mv + (one - b1) * *gv;
                *vv = b2 * *vv + (one - b2) * *gv * *gv;
                *pv -= step * *mv / (vv.sqrt() + eps);
            }
        }
    }
}

/// A sample turned into network tensors plus its physics context.
pub struct Prepared<T> {
    pub class: SubdomainClass,
    pub input: Vec<T>,
    pub truth: ComplexField2D,
    pub ctx: PhysicsContext,
    pub size: usize,
}

pub fn prepare<T: Real>(samples: &[SubdomainSample], k0_delta: f64, convention: WavevectorConvention) -> Result<Vec<Prepared<T>>> {
    samples
        .iter()
        .map(|s| {
            let e = encode_sample::<T>(s, k0_delta)?;
            let n = s.size();
            let t: Vec<f64> = target(&s.h, &e.scaling);
            Ok(Prepared {
                class: s.class,
                truth: planes_to_field(&t, n, n),
                ctx: PhysicsContext::from_sample(s, &e.scaling, convention),
                input: e.input,
                size: n,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub terms: LossTerms,
    /// `sum |pred - truth| / sum |truth|` over the set.
    pub rel_data: f64,
    pub count: usize,
}

struct SampleResult<T: Real> {
    terms: LossTerms,
    abs_err: f64,
    abs_truth: f64,
    grad: Option<SmFno<T>>,
}

fn run_sample<T: Real>(model: &SmFno<T>, p: &Prepared<T>, weights: Option<(f64, f64, f64)>) -> Result<SampleResult<T>> {
    let keep = weights.is_some();
    let (out, cache): (Vec<T>, Cache<T>) = model.forward(&p.input, keep)?;
    let pred = planes_to_field(&out, p.size, p.size);
    let abs_err = pred.as_slice().iter().zip(p.truth.as_slice()).map(|(a, b)| (a - b).norm()).sum();
    let abs_truth = p.truth.as_slice().iter().map(|v| v.norm()).sum();
    let (terms, grad) = match weights {
        Some(w) => {
            let (terms, gf) = loss_terms_with_grad(&pred, &p.truth, &p.ctx, w);
            let gout: Vec<T> = gf.as_slice().iter().map(|v| T::of(v.re)).chain(gf.as_slice().iter().map(|v| T::of(v.im))).collect();
            (terms, Some(model.backward(&cache, &gout)?))
        }
        None => (loss_terms(&pred, &p.truth, &p.ctx), None),
    };
    Ok(SampleResult { terms, abs_err, abs_truth, grad })
}

fn summarize<T: Real>(results: &[SampleResult<T>]) -> EvalStats {
    let n = results.len().max(1) as f64;
    let mut t = LossTerms::default();
    let (mut e, mut a) = (0.0, 0.0);
    for r in results {
        t.data += r.terms.data / n;
        t.pde += r.terms.pde / n;
        t.bc += r.terms.bc / n;
        e += r.abs_err;
        a += r.abs_truth;
    }
    EvalStats { terms: t, rel_data: if a > 0.0 { e / a } else { e }, count: results.len() }
}

/// Forward-only loss statistics.
pub fn evaluate<T: Real>(model: &SmFno<T>, data: &[Prepared<T>]) -> Result<EvalStats> {
    let results: Vec<SampleResult<T>> = data.par_iter().map(|p| run_sample(model, p, None)).collect::<Result<_>>()?;
    Ok(summarize(&results))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    /// Weight used during the epoch.
    pub alpha: f64,
    /// Weight after the end-of-epoch update.
    pub alpha_next: f64,
    /// Means over the epoch's batches.
    pub train: LossTerms,
    pub train_rel_data: f64,
    pub test: Option<EvalStats>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Total loss of every optimizer step.
    pub step_loss: Vec<f64>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,L_data,L_pde,L_bc,alpha\n");
        for r in &self.epochs {
            s.push_str(&format!("{},{:e},{:e},{:e},{:e}\n", r.epoch, r.train.data, r.train.pde, r.train.bc, r.alpha));
        }
        s
    }
}

pub struct TrainOutcome<T: Real> {
    pub model: SmFno<T>,
    pub history: History,
    pub loss: LossConfig,
    pub steps: usize,
    pub final_train: EvalStats,
}

fn checkpoint<T: Real>(model: &SmFno<T>, class: SubdomainClass, cfg: &TrainConfig, epoch: usize) -> Result<Option<PathBuf>> {
    let Some(path) = &cfg.checkpoint else { return Ok(None) };
    let saved = SavedModel {
        model: model.clone(),
        class: Some(class),
        convention: cfg.convention,
        meta: serde_json::json!({ "epoch": epoch, "train": TrainConfig { checkpoint: None, ..cfg.clone() } }),
    };
    save_weights(&saved, path)?;
    Ok(Some(path.clone()))
}

/// Deterministic 90/10-style split of sample indices.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (n as f64 * test_fraction).round() as usize;
    let test = idx.split_off(n - n_test);
    (idx, test)
}

pub fn train<T: Real>(
    mut model: SmFno<T>,
    samples: &[SubdomainSample],
    k0_delta: f64,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let class = samples.first().ok_or_else(|| NnError::InvalidParams("empty training set".into()))?.class;
    if let Some(s) = samples.iter().find(|s| s.class != class) {
        return Err(NnError::InvalidParams(format!("mixed classes {class} and {}", s.class)));
    }
    if in_channels(class) != model.config.in_channels {
        return Err(NnError::InvalidParams(format!(
            "{class} samples need {} input channels, model has {}",
            in_channels(class),
            model.config.in_channels
        )));
    }
    let prepared = prepare::<T>(samples, k0_delta, cfg.convention)?;
    let (train_idx, test_idx) = split_indices(prepared.len(), cfg.test_fraction, cfg.seed);
    let test_set: Vec<&Prepared<T>> = test_idx.iter().map(|&i| &prepared[i]).collect();
    let batches_per_epoch = train_idx.len().div_ceil(cfg.batch_size);
    let total = cfg.max_steps.map_or(cfg.epochs * batches_per_epoch, |m| m.min(cfg.epochs * batches_per_epoch));

    let mut adam = Adam::new(&model);
    let mut loss = *loss_cfg;
    let mut history = History::default();
    let mut step = 0usize;
    let mut last_ckpt = None;
    let mut order = train_idx.clone();
    'epochs: for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        let alpha = loss.alpha;
        let weights = (1.0, alpha, alpha * loss.c);
        let mut sums = LossTerms::default();
        let (mut err, mut mag, mut nb, mut lr) = (0.0, 0.0, 0usize, cfg.lr_start);
        for batch in order.chunks(cfg.batch_size) {
            if step >= total {
                break;
            }
            let results: Vec<SampleResult<T>> =
                match batch.par_iter().map(|&i| run_sample(&model, &prepared[i], Some(weights))).collect::<Result<_>>() {
                    Ok(r) => r,
                    Err(NnError::NonFinite { layer }) => {
                        let detail = format!("non-finite activation in layer {layer}");
                        return Err(NnError::NonFiniteLoss { step, detail, checkpoint: last_ckpt });
                    }
                    Err(e) => return Err(e),
                };
            let stats = summarize(&results);
            let total_loss = stats.terms.data + alpha * stats.terms.physics(loss.c);
            if !total_loss.is_finite() {
                return Err(NnError::NonFiniteLoss { step, detail: format!("{:?}", stats.terms), checkpoint: last_ckpt });
            }
            let mut grad = model.zeros_like();
            let inv = T::of(1.0 / results.len() as f64);
            for r in &results {
                grad.axpy(inv, r.grad.as_ref().expect("requested"));
            }
            lr = learning_rate(cfg.lr_start, cfg.lr_decay, step, total);
            adam.step(&mut model, &grad, lr);
            if !model.is_finite() {
                return Err(NnError::NonFiniteLoss { step, detail: "weights became non-finite".into(), checkpoint: last_ckpt });
            }
            history.step_loss.push(total_loss);
            sums.data += stats.terms.data;
            sums.pde += stats.terms.pde;
            sums.bc += stats.terms.bc;
            err += results.iter().map(|r| r.abs_err).sum::<f64>();
            mag += results.iter().map(|r| r.abs_truth).sum::<f64>();
            nb += 1;
            step += 1;
        }
        if nb == 0 {
            break;
        }
        let nbf = nb as f64;
        let train = LossTerms { data: sums.data / nbf, pde: sums.pde / nbf, bc: sums.bc / nbf };
        loss = update_alpha(&loss, epoch + 1, train.data, train.physics(loss.c));
        let test = if test_set.is_empty() {
            None
        } else {
            let r: Vec<SampleResult<T>> = test_set.par_iter().map(|p| run_sample(&model, p, None)).collect::<Result<_>>()?;
            Some(summarize(&r))
        };
        last_ckpt = checkpoint(&model, class, cfg, epoch)?.or(last_ckpt);
        history.epochs.push(EpochRecord {
            epoch,
            steps: step,
            lr,
            alpha,
            alpha_next: loss.alpha,
            train,
            train_rel_data: if mag > 0.0 { err / mag } else { err },
            test,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
        log::info!(
            "epoch {epoch} step {step}: L_data {:.3e} L_pde {:.3e} L_bc {:.3e} alpha {:.3e}",
            train.data,
            train.pde,
            train.bc,
            loss.alpha
        );
        if let Some(target) = cfg.target_rel_data {
            let train_set: Vec<&Prepared<T>> = train_idx.iter().map(|&i| &prepared[i]).collect();
            let r: Vec<SampleResult<T>> = train_set.par_iter().map(|p| run_sample(&model, p, None)).collect::<Result<_>>()?;
            if summarize(&r).rel_data < target {
                break 'epochs;
            }
        }
        if step >= total {
            break;
        }
    }
    let final_train = {
        let r: Vec<SampleResult<T>> =
            train_idx.par_iter().map(|&i| run_sample(&model, &prepared[i], None)).collect::<Result<_>>()?;
        summarize(&r)
    };
    Ok(TrainOutcome { model, history, loss, steps: step, final_train })
}
