//! Mini-batch training with AdamW and a per-step cosine schedule.

mod optim;

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::dataset::TurnSample;
use crate::frontend::{Frontend, FrontendError};
use crate::inference::{report, InferenceError, Predictor};
use crate::model::{backward, bce_with_logits, forward, Dropout, ModelConfig, ModelError, ModelParams};
use crate::Real;

pub use optim::{adamw_step, adamw_update, cosine_lr, AdamWConfig, OptimizerState};

/// Samples whose gradients are computed together before being added, in
/// order, to the batch sum. Fixes the reduction order independently of the
/// thread count.
pub const GRADIENT_GROUP: usize = 8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("optimizer: {0}")]
    Optimizer(String),
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("non-finite training loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Frontend(#[from] FrontendError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error("output: {0}")]
    Sink(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Share of recordings held out for validation (9:1 by default).
    pub val_fraction: f64,
    /// Optional weight on the positive (shift) term of the loss.
    pub pos_weight: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 1e-4,
            lr_min: 1e-6,
            weight_decay: 0.001,
            batch_size: 64,
            epochs: 10,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            val_fraction: 0.1,
            pos_weight: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_init) {
            return Err(TrainError::Config("need 0 < lr_min <= lr_init".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(TrainError::Config("batch_size and epochs must be at least 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(TrainError::Config("val_fraction must be in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Recording-level train/validation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

impl Split {
    /// Sorted ids, shuffled with `seed`; the first `round(n · val_fraction)`
    /// (at least one) go to validation.
    pub fn by_recording(samples: &[TurnSample], val_fraction: f64, seed: u64) -> Result<Self, TrainError> {
        let mut ids: Vec<String> = samples
            .iter()
            .map(|s| s.source_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if ids.is_empty() {
            return Err(TrainError::EmptySplit("training"));
        }
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = ((ids.len() as f64 * val_fraction).round() as usize).max(1);
        if n_val >= ids.len() {
            return Err(TrainError::EmptySplit("training"));
        }
        let mut val_ids = ids[..n_val].to_vec();
        let mut train_ids = ids[n_val..].to_vec();
        val_ids.sort();
        train_ids.sort();
        Ok(Self { train_ids, val_ids })
    }

    pub fn partition<'a>(&self, samples: &'a [TurnSample]) -> (Vec<&'a TurnSample>, Vec<&'a TurnSample>) {
        let val: BTreeSet<&str> = self.val_ids.iter().map(String::as_str).collect();
        samples.iter().partition(|s| !val.contains(s.source_id.as_str()))
    }
}

/// One input to [`batch_gradient`].
pub struct BatchItem<F> {
    pub linguistic: Array2<F>,
    pub acoustic: Array2<F>,
    pub target: F,
}

pub struct BatchResult<F> {
    /// Mean of the per-sample losses.
    pub loss: f64,
    pub per_sample: Vec<f64>,
    /// Gradient of the mean loss.
    pub grads: ModelParams<F>,
}

/// Mean loss and gradient over `n` items produced by `load`. Items are
/// processed in groups of [`GRADIENT_GROUP`] (in parallel within a group) and
/// summed in index order.
pub fn batch_gradient<F, L>(
    params: &ModelParams<F>,
    config: &ModelConfig,
    n: usize,
    pos_weight: f64,
    load: L,
    dropout: impl Fn(usize) -> Option<Dropout> + Sync,
) -> Result<BatchResult<F>, TrainError>
where
    F: Real,
    L: Fn(usize) -> Result<BatchItem<F>, TrainError> + Sync,
{
    let mut sum = params.zeros_like();
    let mut per_sample = Vec::with_capacity(n);
    let pw = F::lit(pos_weight);
    for start in (0..n).step_by(GRADIENT_GROUP) {
        let end = (start + GRADIENT_GROUP).min(n);
        let results: Vec<Result<(f64, ModelParams<F>), TrainError>> = (start..end)
            .into_par_iter()
            .map(|i| {
                let item = load(i)?;
                let mut d = dropout(i);
                let trace = forward(params, config, &item.linguistic, &item.acoustic, d.as_mut())?;
                let (loss, dlogit) = bce_with_logits(trace.logit, item.target, pw);
                Ok((loss.to_f64_lossless(), backward(params, &trace, dlogit).params))
            })
            .collect();
        for r in results {
            let (loss, g) = r?;
            per_sample.push(loss);
            sum.add_assign(&g);
        }
    }
    sum.scale(F::one() / F::lit(n as f64));
    let loss = per_sample.iter().sum::<f64>() / n as f64;
    Ok(BatchResult {
        loss,
        per_sample,
        grads: sum,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        epoch: usize,
        step: usize,
        lr: f64,
        train_loss: f64,
    },
    Epoch {
        epoch: usize,
        step: usize,
        lr: f64,
        train_loss: f64,
        val_loss: f64,
        val_acc: f64,
        val_f1: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Best,
    Final,
    /// Written when training aborts; holds the parameters from before the
    /// failed step.
    LastGood,
}

/// Receives log records and checkpoints as training progresses.
pub trait TrainSink {
    fn log(&mut self, record: &LogRecord) -> Result<(), TrainError>;
    fn checkpoint(&mut self, kind: CheckpointKind, ck: &Checkpoint<f32>) -> Result<(), TrainError>;
}

/// Keeps everything in memory.
#[derive(Default)]
pub struct MemorySink {
    pub records: Vec<LogRecord>,
    pub checkpoints: Vec<(CheckpointKind, Checkpoint<f32>)>,
}

impl TrainSink for MemorySink {
    fn log(&mut self, record: &LogRecord) -> Result<(), TrainError> {
        self.records.push(record.clone());
        Ok(())
    }

    fn checkpoint(&mut self, kind: CheckpointKind, ck: &Checkpoint<f32>) -> Result<(), TrainError> {
        self.checkpoints.push((kind, ck.clone()));
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub split: Split,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub final_checkpoint: Checkpoint<f32>,
    pub best_checkpoint: Checkpoint<f32>,
    pub total_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationResult {
    pub loss: f64,
    pub accuracy: f64,
    pub f1: f64,
}

pub fn validate(predictor: &Predictor, samples: &[TurnSample]) -> Result<ValidationResult, TrainError> {
    let preds = predictor.predict_all(samples)?;
    let loss = preds
        .iter()
        .map(|p| bce_with_logits(p.prediction.logit as f64, p.label.as_target(), 1.0).0)
        .sum::<f64>()
        / preds.len().max(1) as f64;
    let r = report(&preds);
    Ok(ValidationResult {
        loss,
        accuracy: r.accuracy,
        f1: r.f1,
    })
}

fn mix(seed: u64, a: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Trains from scratch. `(seed, configs, samples)` fully determine every
/// emitted checkpoint.
pub fn train(
    samples: &[TurnSample],
    frontend: &Frontend,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    sink: &mut dyn TrainSink,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let split = Split::by_recording(samples, cfg.val_fraction, cfg.seed)?;
    let (train_set, val_refs) = split.partition(samples);
    if train_set.is_empty() {
        return Err(TrainError::EmptySplit("training"));
    }
    if val_refs.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let val_set: Vec<TurnSample> = val_refs.into_iter().cloned().collect();

    let mut params = ModelParams::<f32>::init(model_cfg, cfg.seed)?;
    let mut state = OptimizerState::for_params(&params);
    let adamw = cfg.adamw();
    let batches_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let pos_weight = cfg.pos_weight.unwrap_or(1.0);
    let dropout_rate = model_cfg.attention.dropout_rate;
    let make_ck = |params: &ModelParams<f32>, epoch: usize, step: usize, split: &Split| Checkpoint {
        model: model_cfg.clone(),
        frontend: frontend.config().clone(),
        params: params.clone(),
        meta: serde_json::json!({
            "epoch": epoch,
            "step": step,
            "train_config": cfg,
            "val_ids": split.val_ids,
        }),
    };

    let mut step = 0usize;
    let mut best: Option<(f64, usize, Checkpoint<f32>)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64 + 1)));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let lr = cosine_lr(step, total_steps, cfg.lr_init, cfg.lr_min);
            let result = match batch_gradient(
                &params,
                model_cfg,
                batch.len(),
                pos_weight,
                |i| {
                    let s = train_set[batch[i]];
                    let ctx = frontend.encode_sample(s)?;
                    Ok(BatchItem {
                        linguistic: ctx.linguistic.to_real(),
                        acoustic: ctx.acoustic.to_real(),
                        target: s.label.as_target() as f32,
                    })
                },
                |i| {
                    (dropout_rate > 0.0)
                        .then(|| Dropout::for_sample(dropout_rate, cfg.seed, epoch, step, i))
                },
            ) {
                Ok(r) => r,
                Err(e) => {
                    sink.checkpoint(CheckpointKind::LastGood, &make_ck(&params, epoch, step, &split))?;
                    return Err(e);
                }
            };
            if !result.loss.is_finite() {
                sink.checkpoint(CheckpointKind::LastGood, &make_ck(&params, epoch, step, &split))?;
                return Err(TrainError::NonFiniteLoss { epoch, step });
            }
            if let Err(e) = adamw_step(&mut params, &result.grads, &mut state, lr, &adamw) {
                sink.checkpoint(CheckpointKind::LastGood, &make_ck(&params, epoch, step, &split))?;
                return Err(e);
            }
            sink.log(&LogRecord::Step {
                epoch,
                step,
                lr,
                train_loss: result.loss,
            })?;
            log::debug!("epoch {epoch} step {step} lr {lr:.3e} loss {:.5}", result.loss);
            epoch_loss += result.loss * batch.len() as f64;
            step += 1;
        }
        let predictor = Predictor::new(frontend.clone(), model_cfg.clone(), params.clone())?;
        let v = validate(&predictor, &val_set)?;
        let train_loss = epoch_loss / train_set.len() as f64;
        log::info!(
            "epoch {epoch}: train loss {train_loss:.5}, val loss {:.5}, val acc {:.4}, val f1 {:.4}",
            v.loss,
            v.accuracy,
            v.f1
        );
        sink.log(&LogRecord::Epoch {
            epoch,
            step,
            lr: cosine_lr(step, total_steps, cfg.lr_init, cfg.lr_min),
            train_loss,
            val_loss: v.loss,
            val_acc: v.accuracy,
            val_f1: v.f1,
        })?;
        if best.as_ref().is_none_or(|(l, _, _)| v.loss < *l) {
            let ck = make_ck(&params, epoch, step, &split);
            sink.checkpoint(CheckpointKind::Best, &ck)?;
            best = Some((v.loss, epoch, ck));
        }
    }
    let final_checkpoint = make_ck(&params, cfg.epochs - 1, step, &split);
    sink.checkpoint(CheckpointKind::Final, &final_checkpoint)?;
    let (best_val_loss, best_epoch, best_checkpoint) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        split,
        best_epoch,
        best_val_loss,
        final_checkpoint,
        best_checkpoint,
        total_steps,
    })
}
