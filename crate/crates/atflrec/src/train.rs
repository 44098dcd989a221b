//! Fine-tuning loop: Adam, two-phase warmup/decay schedule, batch 8 with
//! gradient accumulation every 4 micro-batches, incomplete batches
//! discarded.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::model::{ForwardCtx, ModelError, ModelParams, ParamSnapshot, RecSample};
use crate::report::fmt_f64;
use crate::rng::derive;
use crate::tensor::{pool, PoolMethod, Tensor};

#[derive(Debug)]
pub enum TrainError {
    Model(ModelError),
    /// Fewer training samples than one batch.
    NotEnoughData { have: usize, need: usize },
    /// No trainable parameters, bad schedule geometry, and similar.
    Config(String),
    /// lr_at outside [0, total_iters].
    LrRange { iter: usize, total: usize },
    /// A trainable parameter reached the optimizer without a gradient.
    MissingGrad { name: String },
    /// Non-finite loss.
    Divergence { micro_batch: usize },
    Eval(crate::eval::EvalError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Model(e) => write!(f, "model error: {e}"),
            Self::NotEnoughData { have, need } => {
                write!(f, "{have} training samples, need at least one batch of {need}")
            }
            Self::Config(msg) => write!(f, "training config: {msg}"),
            Self::LrRange { iter, total } => {
                write!(f, "lr_at({iter}) outside schedule of {total} iterations")
            }
            Self::MissingGrad { name } => {
                write!(f, "trainable parameter {name} has no gradient at optimizer step")
            }
            Self::Divergence { micro_batch } => {
                write!(f, "non-finite loss at micro-batch {micro_batch}")
            }
            Self::Eval(e) => write!(f, "validation error: {e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        Self::Model(e)
    }
}

impl From<crate::tensor::TensorError> for TrainError {
    fn from(e: crate::tensor::TensorError) -> Self {
        Self::Model(ModelError::Tensor(e))
    }
}

impl From<crate::eval::EvalError> for TrainError {
    fn from(e: crate::eval::EvalError) -> Self {
        Self::Eval(e)
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecaySchedule {
    /// Linear from the initial rate to 0 at total_iters.
    Linear,
    /// Halve five times across the decay phase.
    Step,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub warmup_iters: usize,
    pub warmup_floor: f64,
    pub batch_size: usize,
    pub accum_every: usize,
    pub epochs: usize,
    pub k_shot: usize,
    pub seed: u64,
    /// Early stopping: epochs without a validation-AUC improvement.
    pub patience: usize,
    pub decay: DecaySchedule,
    /// Evaluate validation AUC on a fixed random subset of this size.
    pub val_subsample: Option<usize>,
    /// Run batchnorm on its running statistics even while training.
    pub frozen_batchnorm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 1e-3,
            warmup_iters: 50,
            warmup_floor: 1e-9,
            batch_size: 8,
            accum_every: 4,
            epochs: 50,
            k_shot: 100,
            seed: 0,
            patience: 10,
            decay: DecaySchedule::Linear,
            val_subsample: None,
            frozen_batchnorm: false,
        }
    }
}

impl TrainConfig {
    /// Optimizer steps a run of `n_train` samples will take.
    pub fn total_iters(&self, n_train: usize) -> usize {
        (n_train / self.batch_size) * self.epochs / self.accum_every
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.accum_every
    }
}

/// Piecewise-linear schedule: warmup_floor at 0 rising to initial_lr at
/// warmup_iters, then (by default) linear decay to 0 at total_iters. Both
/// phases are endpoint-exact.
pub fn lr_at(iter: usize, cfg: &TrainConfig, total_iters: usize) -> Result<f64> {
    if iter > total_iters {
        return Err(TrainError::LrRange { iter, total: total_iters });
    }
    if iter <= cfg.warmup_iters {
        let t = iter as f64 / cfg.warmup_iters as f64;
        return Ok(cfg.warmup_floor * (1.0 - t) + cfg.initial_lr * t);
    }
    match cfg.decay {
        DecaySchedule::Linear => {
            Ok(cfg.initial_lr * (total_iters - iter) as f64 / (total_iters - cfg.warmup_iters) as f64)
        }
        DecaySchedule::Step => {
            let span = (total_iters - cfg.warmup_iters).div_ceil(5).max(1);
            let halvings = (iter - cfg.warmup_iters).div_ceil(span) as i32;
            Ok(cfg.initial_lr * 0.5f64.powi(halvings))
        }
    }
}

/// Standard Adam with bias-corrected moments.
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(params: &[(String, Tensor)]) -> Adam {
        Adam {
            m: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &[(String, Tensor)], lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (name, p)) in params.iter().enumerate() {
            let grad = p.grad().ok_or_else(|| TrainError::MissingGrad { name: name.clone() })?;
            let mut data = p.to_vec();
            for (j, g) in grad.iter().enumerate() {
                self.m[i][j] = self.beta1 * self.m[i][j] + (1.0 - self.beta1) * g;
                self.v[i][j] = self.beta2 * self.v[i][j] + (1.0 - self.beta2) * g * g;
                let m_hat = self.m[i][j] / bc1;
                let v_hat = self.v[i][j] / bc2;
                data[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            p.set_data(&data);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub val_auc: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_auc: f64,
}

impl TrainHistory {
    /// Per-optimizer-step CSV: iter, lr, loss, grad_norm.
    pub fn steps_csv(&self) -> String {
        let mut out = String::from("iter,lr,loss,grad_norm\n");
        for s in &self.steps {
            out.push_str(&format!(
                "{},{},{},{}\n",
                s.iter,
                fmt_f64(s.lr),
                fmt_f64(s.loss),
                fmt_f64(s.grad_norm)
            ));
        }
        out
    }

    /// Per-epoch CSV: epoch, val_auc.
    pub fn epochs_csv(&self) -> String {
        let mut out = String::from("epoch,val_auc\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{}\n", e.epoch, fmt_f64(e.val_auc)));
        }
        out
    }
}

pub struct TrainOutcome {
    pub history: TrainHistory,
    /// Snapshot of the best-validation-AUC parameters (final parameters
    /// when no validation split is given). Also restored into the model.
    pub best: ParamSnapshot,
}

/// Run the fine-tuning loop. Gradients accumulate across `accum_every`
/// micro-batches of `batch_size` (the accumulation counter carries across
/// epoch boundaries); the per-epoch sample remainder is discarded. The
/// model is left holding the returned parameters.
pub fn train(
    model: &ModelParams,
    train_samples: &[RecSample],
    val_samples: Option<&[RecSample]>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let trainables = model.trainable_parameters();
    if trainables.is_empty() {
        return Err(TrainError::Config("model has no trainable parameters".into()));
    }
    if train_samples.len() < cfg.batch_size {
        return Err(TrainError::NotEnoughData {
            have: train_samples.len(),
            need: cfg.batch_size,
        });
    }
    let total_iters = cfg.total_iters(train_samples.len());
    if cfg.warmup_iters >= total_iters {
        return Err(TrainError::Config(format!(
            "warmup_iters {} must be below total_iters {total_iters}",
            cfg.warmup_iters
        )));
    }

    let mut adam = Adam::new(&trainables);
    let mut dropout_rng = ChaCha20Rng::seed_from_u64(derive(cfg.seed, "dropout"));
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, usize, ParamSnapshot)> = None;

    // fixed validation subset
    let val_set: Option<Vec<&RecSample>> = val_samples.map(|vs| {
        let mut idx: Vec<usize> = (0..vs.len()).collect();
        if let Some(cap) = cfg.val_subsample {
            let mut rng = ChaCha20Rng::seed_from_u64(derive(cfg.seed, "val-subsample"));
            idx.shuffle(&mut rng);
            idx.truncate(cap);
            idx.sort_unstable();
        }
        idx.into_iter().map(|i| &vs[i]).collect()
    });

    let micro_per_epoch = train_samples.len() / cfg.batch_size;
    let mut micro_count = 0usize;
    let mut step_count = 0usize;
    let mut loss_accum = 0.0f64;
    let mut cache = crate::model::AudioCache::new();
    model.zero_grads();

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        let mut shuffle_rng =
            ChaCha20Rng::seed_from_u64(derive(cfg.seed, &format!("epoch-{epoch}")));
        order.shuffle(&mut shuffle_rng);

        for chunk in order.chunks_exact(cfg.batch_size).take(micro_per_epoch) {
            let mut losses = Vec::with_capacity(cfg.batch_size);
            for &si in chunk {
                let sample = &train_samples[si];
                let mut ctx = ForwardCtx {
                    train: true,
                    rng: Some(&mut dropout_rng),
                    frozen_batchnorm: cfg.frozen_batchnorm,
                };
                let logit = model.forward_variant(sample, &mut ctx, Some(&mut cache))?;
                losses.push(logit.bce_with_logits(sample.label as f64)?);
            }
            let micro_sum = pool(&losses, PoolMethod::Sum)?;
            let scaled = micro_sum.scale(1.0 / cfg.effective_batch() as f64);
            let value = scaled.scalar_value();
            if !value.is_finite() {
                return Err(TrainError::Divergence { micro_batch: micro_count });
            }
            scaled.backward()?;
            loss_accum += value;
            micro_count += 1;

            if micro_count % cfg.accum_every == 0 {
                let grad_norm = {
                    let mut sq = 0.0;
                    for (name, p) in &trainables {
                        let g = p
                            .grad()
                            .ok_or_else(|| TrainError::MissingGrad { name: name.clone() })?;
                        sq += g.iter().map(|v| v * v).sum::<f64>();
                    }
                    sq.sqrt()
                };
                let lr = lr_at(step_count, cfg, total_iters)?;
                adam.step(&trainables, lr)?;
                history.steps.push(StepRecord {
                    iter: step_count,
                    lr,
                    loss: loss_accum,
                    grad_norm,
                });
                model.zero_grads();
                cache.clear();
                loss_accum = 0.0;
                step_count += 1;
            }
        }

        if let Some(vs) = &val_set {
            let pairs = crate::eval::score_sample_refs(model, vs)?;
            let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let labels: Vec<u8> = pairs.iter().map(|p| p.1).collect();
            let val_auc = crate::eval::auc(&scores, &labels)?;
            history.epochs.push(EpochRecord { epoch, val_auc });
            let improved = best.as_ref().map_or(true, |(b, _, _)| val_auc > *b);
            if improved {
                best = Some((val_auc, epoch, model.snapshot()));
            }
            // patience counts epochs since the best; warmup epochs are
            // exempt so slow starters are not cut off mid-warmup
            if let Some((_, best_epoch, _)) = &best {
                if step_count > cfg.warmup_iters && epoch - best_epoch >= cfg.patience {
                    break 'epochs;
                }
            }
        }
    }

    let best_snapshot = match best {
        Some((auc, epoch, snap)) => {
            history.best_epoch = Some(epoch);
            history.best_val_auc = auc;
            model.restore(&snap)?;
            snap
        }
        None => model.snapshot(),
    };
    Ok(TrainOutcome {
        history,
        best: best_snapshot,
    })
}

#[cfg(test)]
mod tests;
