//! Fine-tuning loop: cross-entropy, Adam/SGD, reduce-on-plateau, metrics and
//! checkpoints.
//!
//! Randomness is derived from the config seed only: the epoch order from
//! `(seed, epoch)`, each sample's augmentation from `(seed, epoch, index)`
//! and each batch's dropout mask from `(seed, epoch, batch)`, so the worker
//! count never changes a run.

mod checkpoint;
mod data;
mod optim;
mod run;
mod scheduler;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, EXPORT_META, EXPORT_WEIGHTS, FORMAT_VERSION,
};
pub use data::{
    derive_seed, is_deterministic, load_image, policy_input_size, resolve_policy, sample_seed, Transform,
};
pub use optim::Optimizer;
pub use run::{RunDir, BEST_CHECKPOINT, CONFIG_FILE, METRICS_FILE};
pub use scheduler::{scheduler_step, scheduler_step_with, SchedulerState, DEFAULT_THRESHOLD};

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;

use candle_core::{Tensor, D};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentError, AugmentationPolicy};
use crate::backbones::{Mode, Model, ModelError};
use crate::config::{OptimizerKind, RunConfig};
use crate::dataset::{DatasetError, DatasetManifest, ImageRecord, Split};

#[derive(Debug, thiserror::Error)]
pub enum TrainerError {
    #[error("the {0} split is empty")]
    EmptySplit(Split),
    #[error("non-finite loss in epoch {epoch}")]
    NaNLoss { epoch: usize, history: Vec<EpochMetrics> },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint format version {found} is not supported (expected {supported})")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("model has {model} classes but the data has {data}")]
    ClassMismatch { model: usize, data: usize },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("cannot decode {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainerError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerSettings {
    pub patience: u32,
    pub factor: f64,
    /// Only `val_accuracy` is supported.
    pub monitored: String,
    pub threshold: f64,
}

/// Resolved training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    /// SGD momentum; ignored by Adam.
    #[serde(default)]
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub scheduler: SchedulerSettings,
    pub dropout_rate: f64,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub crop_to_bbox: bool,
    #[serde(default = "default_workers")]
    pub num_workers: usize,
    /// Reuse pooled features across epochs when they cannot change.
    #[serde(default = "default_true")]
    pub cache_features: bool,
}

fn default_true() -> bool {
    true
}

fn default_workers() -> usize {
    1
}

impl TrainConfig {
    pub fn from_run(cfg: &RunConfig) -> Self {
        Self {
            optimizer: cfg.model.optimizer.target,
            lr: cfg.model.optimizer.lr,
            weight_decay: cfg.model.optimizer.weight_decay,
            momentum: cfg.model.optimizer.momentum,
            batch_size: cfg.data.batch_size,
            epochs: cfg.trainer.epochs,
            scheduler: SchedulerSettings {
                patience: cfg.model.scheduler.patience,
                factor: cfg.model.scheduler.factor,
                monitored: cfg.model.scheduler.monitor.clone(),
                threshold: cfg.model.scheduler.threshold,
            },
            dropout_rate: cfg.model.net.dropout_value,
            seed: cfg.seed,
            crop_to_bbox: cfg.data.crop_to_bbox,
            num_workers: cfg.data.num_workers,
            cache_features: cfg.trainer.cache_features,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.scheduler;
        let problems = [
            (self.lr.is_finite() && self.lr > 0.0, "lr must be positive"),
            (
                self.weight_decay.is_finite() && self.weight_decay >= 0.0,
                "weight_decay must be non-negative",
            ),
            ((0.0..1.0).contains(&self.momentum), "momentum must be in [0, 1)"),
            (self.batch_size > 0, "batch_size must be positive"),
            (self.epochs > 0, "epochs must be positive"),
            (s.patience >= 1, "scheduler.patience must be at least 1"),
            (s.factor > 0.0 && s.factor < 1.0, "scheduler.factor must be in (0, 1)"),
            (s.monitored == "val_accuracy", "scheduler can only monitor val_accuracy"),
            (s.threshold.is_finite() && s.threshold >= 0.0, "scheduler.threshold must be non-negative"),
            ((0.0..1.0).contains(&self.dropout_rate), "dropout_rate must be in [0, 1)"),
            (self.num_workers > 0, "num_workers must be positive"),
        ];
        match problems.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(TrainerError::InvalidConfig((*msg).into())),
            None => Ok(()),
        }
    }

    pub fn loader(&self) -> Loader {
        Loader {
            batch_size: self.batch_size,
            crop_to_bbox: self.crop_to_bbox,
            num_workers: self.num_workers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

/// How evaluation reads images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Loader {
    pub batch_size: usize,
    pub crop_to_bbox: bool,
    pub num_workers: usize,
}

impl Default for Loader {
    fn default() -> Self {
        Self {
            batch_size: 32,
            crop_to_bbox: true,
            num_workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Mean cross-entropy.
    pub loss: f64,
    /// Accuracy per class name, for classes present in the split.
    pub per_class_accuracy: BTreeMap<String, f64>,
    /// Argmax class per sample (lowest index wins ties), in manifest order.
    pub predictions: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights of the epoch with the highest val_accuracy (earliest on ties).
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub history: Vec<EpochMetrics>,
}

/// Cross-entropy and argmax per row, in f64.
fn score_rows(rows: &[Vec<f32>], targets: &[usize]) -> (f64, Vec<usize>) {
    let mut loss = 0.0;
    let mut preds = Vec::with_capacity(rows.len());
    for (row, &t) in rows.iter().zip(targets) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
        loss += lse - row[t] as f64;
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        preds.push(best);
    }
    (loss, preds)
}

fn report(split: Split, class_names: &[String], rows: &[Vec<f32>], targets: &[usize]) -> EvalReport {
    let (loss_sum, predictions) = score_rows(rows, targets);
    let total = targets.len();
    let correct = predictions.iter().zip(targets).filter(|(p, t)| p == t).count();
    let mut per_class: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (p, &t) in predictions.iter().zip(targets) {
        let e = per_class.entry(t).or_default();
        e.0 += (*p == t) as usize;
        e.1 += 1;
    }
    EvalReport {
        split,
        total,
        correct,
        accuracy: correct as f64 / total as f64,
        loss: loss_sum / total as f64,
        per_class_accuracy: per_class
            .into_iter()
            .map(|(c, (ok, n))| (class_names[c].clone(), ok as f64 / n as f64))
            .collect(),
        predictions,
    }
}

fn check_compat(model: &Model, manifest: &DatasetManifest, policy: &AugmentationPolicy) -> Result<()> {
    if model.num_classes() != manifest.num_classes || manifest.class_names.len() != manifest.num_classes {
        return Err(TrainerError::ClassMismatch {
            model: model.num_classes(),
            data: manifest.num_classes,
        });
    }
    let size = policy_input_size(policy)?;
    if size != model.input_size() {
        return Err(TrainerError::InvalidConfig(format!(
            "augmentation output {size}px does not match the model input {}px",
            model.input_size()
        )));
    }
    Ok(())
}

/// Eval-mode logits for `records`, in order.
pub fn predict_records(
    model: &Model,
    records: &[&ImageRecord],
    policy: &AugmentationPolicy,
    loader: &Loader,
) -> Result<Vec<Vec<f32>>> {
    let pool = data::thread_pool(loader.num_workers)?;
    let mut rows = Vec::with_capacity(records.len());
    for chunk in records.chunks(loader.batch_size.max(1)) {
        let items: Vec<_> = chunk.iter().map(|r| (*r, Transform::Eval)).collect();
        let images = data::load_batch(&pool, &items, policy, loader.crop_to_bbox)?;
        let refs: Vec<&[f32]> = images.iter().map(Vec::as_slice).collect();
        let logits = model.forward(&model.batch(&refs)?, Mode::Eval)?;
        rows.extend(logits.to_vec2::<f32>()?);
    }
    Ok(rows)
}

/// Accuracy, mean cross-entropy and per-class accuracy on one split, using
/// the deterministic evaluation transform.
pub fn evaluate(
    model: &Model,
    manifest: &DatasetManifest,
    split: Split,
    policy: &AugmentationPolicy,
    loader: &Loader,
) -> Result<EvalReport> {
    check_compat(model, manifest, policy)?;
    let records: Vec<&ImageRecord> = manifest.records_in(split).collect();
    if records.is_empty() {
        return Err(TrainerError::EmptySplit(split));
    }
    let rows = predict_records(model, &records, policy, loader)?;
    let targets: Vec<usize> = records.iter().map(|r| r.class_id).collect();
    Ok(report(split, &manifest.class_names, &rows, &targets))
}

/// Pooled features of `records` under the evaluation transform.
fn feature_table(
    model: &Model,
    records: &[&ImageRecord],
    policy: &AugmentationPolicy,
    loader: &Loader,
    pool: &rayon::ThreadPool,
) -> Result<Tensor> {
    let mut parts = Vec::new();
    for chunk in records.chunks(loader.batch_size) {
        let items: Vec<_> = chunk.iter().map(|r| (*r, Transform::Eval)).collect();
        let images = data::load_batch(pool, &items, policy, loader.crop_to_bbox)?;
        let refs: Vec<&[f32]> = images.iter().map(Vec::as_slice).collect();
        parts.push(model.features(&model.batch(&refs)?, Mode::Eval)?.detach());
    }
    Ok(Tensor::cat(&parts, 0)?)
}

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const DROPOUT_STREAM: u64 = 0x4452_4f50;

/// [`train_with`] without a per-epoch callback.
pub fn train(
    model: &Model,
    manifest: &DatasetManifest,
    policy: &AugmentationPolicy,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(model, manifest, policy, config, |_| Ok(()))
}

/// Fine-tunes the trainable tensors of `model` for `config.epochs` epochs.
///
/// `on_epoch` sees each epoch's metrics as soon as they exist (the CLI
/// appends them to `metrics.jsonl`). On return the model holds the best
/// epoch's weights.
pub fn train_with(
    model: &Model,
    manifest: &DatasetManifest,
    policy: &AugmentationPolicy,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_compat(model, manifest, policy)?;
    if (model.head().dropout() - config.dropout_rate).abs() > 1e-12 {
        return Err(TrainerError::InvalidConfig(format!(
            "model head dropout {} differs from dropout_rate {}",
            model.head().dropout(),
            config.dropout_rate
        )));
    }
    let train_recs: Vec<&ImageRecord> = manifest.records_in(Split::Train).collect();
    let val_recs: Vec<&ImageRecord> = manifest.records_in(Split::Val).collect();
    if train_recs.is_empty() {
        return Err(TrainerError::EmptySplit(Split::Train));
    }
    if val_recs.is_empty() {
        return Err(TrainerError::EmptySplit(Split::Val));
    }
    let loader = config.loader();
    let pool = data::thread_pool(loader.num_workers)?;
    let device = model.device().clone();
    let train_targets: Vec<usize> = train_recs.iter().map(|r| r.class_id).collect();
    let val_targets: Vec<usize> = val_recs.iter().map(|r| r.class_id).collect();

    // frozen BN uses running statistics, so a frozen trunk under a
    // deterministic policy yields the same features every epoch
    let cache = if config.cache_features && model.backbone_frozen() && is_deterministic(policy) {
        Some((
            feature_table(model, &train_recs, policy, &loader, &pool)?,
            feature_table(model, &val_recs, policy, &loader, &pool)?,
        ))
    } else {
        None
    };

    let vars = model.trainable_vars().into_iter().map(|(_, v)| v).collect();
    let mut opt = Optimizer::new(config.optimizer, vars, config.lr, config.weight_decay, config.momentum);
    let mut sched = SchedulerState::new(config.lr);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Checkpoint)> = None;

    for epoch in 1..=config.epochs {
        let lr = opt.lr();
        let mut order: Vec<usize> = (0..train_recs.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, SHUFFLE_STREAM, epoch as u64));
        order.shuffle(&mut rng);

        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let mode = Mode::Train {
                seed: derive_seed(config.seed ^ DROPOUT_STREAM, epoch as u64, b as u64),
            };
            let logits = match &cache {
                Some((train_feats, _)) => {
                    let ids: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
                    let ids = Tensor::new(ids.as_slice(), &device)?;
                    model.head().forward(&train_feats.index_select(&ids, 0)?, mode)?
                }
                None => {
                    let items: Vec<_> = idx
                        .iter()
                        .map(|&i| {
                            let t = Transform::Augment {
                                seed: sample_seed(config.seed, epoch, i),
                            };
                            (train_recs[i], t)
                        })
                        .collect();
                    let images = data::load_batch(&pool, &items, policy, loader.crop_to_bbox)?;
                    let refs: Vec<&[f32]> = images.iter().map(Vec::as_slice).collect();
                    model.forward(&model.batch(&refs)?, mode)?
                }
            };
            let targets: Vec<u32> = idx.iter().map(|&i| train_targets[i] as u32).collect();
            let targets = Tensor::new(targets.as_slice(), &device)?;
            let loss = candle_nn::loss::cross_entropy(&logits, &targets)?;
            let value = loss.to_scalar::<f32>()? as f64;
            if !value.is_finite() {
                return Err(TrainerError::NaNLoss { epoch, history });
            }
            let grads = loss.backward()?;
            opt.step(&grads)?;
            loss_sum += value * idx.len() as f64;
            let hits = logits.argmax(D::Minus1)?.eq(&targets)?.to_dtype(candle_core::DType::F32)?;
            correct += hits.sum_all()?.to_scalar::<f32>()? as usize;
        }

        let val = match &cache {
            Some((_, val_feats)) => {
                let rows = model.head().forward(val_feats, Mode::Eval)?.to_vec2::<f32>()?;
                report(Split::Val, &manifest.class_names, &rows, &val_targets)
            }
            None => {
                let rows = predict_records(model, &val_recs, policy, &loader)?;
                report(Split::Val, &manifest.class_names, &rows, &val_targets)
            }
        };
        if !val.loss.is_finite() {
            return Err(TrainerError::NaNLoss { epoch, history });
        }
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / train_recs.len() as f64,
            train_accuracy: correct as f64 / train_recs.len() as f64,
            val_loss: val.loss,
            val_accuracy: val.accuracy,
            lr,
        };
        if best.as_ref().is_none_or(|(acc, _, _)| m.val_accuracy > *acc) {
            let ckpt = Checkpoint::capture(model, &manifest.class_names, policy.normalization, Some(config), Some(&m))?;
            best = Some((m.val_accuracy, epoch, ckpt));
        }
        on_epoch(&m)?;
        history.push(m);

        sched = scheduler_step_with(
            sched,
            val.accuracy,
            config.scheduler.patience,
            config.scheduler.factor,
            config.scheduler.threshold,
        );
        opt.set_lr(sched.current_lr);
    }

    let (_, best_epoch, best) = best.expect("at least one epoch");
    let state: HashMap<String, Tensor> = best.tensors.iter().cloned().collect();
    model.load_state(&state)?;
    Ok(TrainOutcome {
        best,
        best_epoch,
        history,
    })
}
