use std::path::Path;
use std::time::Instant;

use carid_core::augment::{eval_transform, AugmentationPolicy, AugmentError};
use carid_core::backbones::{Mode, Model, ModelError};
use carid_core::trainer::{Checkpoint, CheckpointMeta};
use image::DynamicImage;
use serde::{Deserialize, Serialize};

use crate::ServeError;

/// One ranked class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class_name: String,
    pub make: String,
    pub model_name: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    /// Descending confidence; a prefix of the full softmax distribution.
    pub predictions: Vec<Prediction>,
    pub model_version: String,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub index: usize,
    pub class_name: String,
    pub make: String,
    pub model_name: String,
}

/// Splits a class name into make and model: the make is the first
/// whitespace token, the model is the rest without a trailing four-digit
/// year. "BMW M3 Coupe 2012" gives ("BMW", "M3 Coupe").
pub fn split_class_name(name: &str) -> (String, String) {
    let mut tokens = name.split_whitespace();
    let make = tokens.next().unwrap_or_default().to_owned();
    let mut rest: Vec<&str> = tokens.collect();
    if rest
        .last()
        .is_some_and(|t| t.len() == 4 && t.bytes().all(|b| b.is_ascii_digit()))
    {
        rest.pop();
    }
    (make, rest.join(" "))
}

/// Softmax in f64. Entries that underflow are raised to the smallest
/// positive double so every confidence stays in (0, 1].
pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| (e / sum).max(f64::MIN_POSITIVE)).collect()
}

/// Eval-mode model with its class table and preprocessing.
pub struct ServingModel {
    model: Model,
    meta: CheckpointMeta,
    policy: AugmentationPolicy,
    labels: Vec<Label>,
}

impl std::fmt::Debug for ServingModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServingModel")
            .field("model_version", &self.meta.model_version)
            .field("num_classes", &self.labels.len())
            .finish_non_exhaustive()
    }
}

/// Loads a checkpoint for serving; any problem with the file is fatal.
pub fn load_artifact(path: &Path) -> Result<ServingModel, ServeError> {
    ServingModel::from_checkpoint(&Checkpoint::load(path)?)
}

impl ServingModel {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ServeError> {
        let model = ckpt.build_model()?;
        let meta = ckpt.meta.clone();
        let size = meta.input_size as u32;
        let policy = AugmentationPolicy::eval_only((size, size), meta.normalization);
        let labels = meta
            .class_names
            .iter()
            .enumerate()
            .map(|(index, name)| {
                let (make, model_name) = split_class_name(name);
                Label {
                    index,
                    class_name: name.clone(),
                    make,
                    model_name,
                }
            })
            .collect();
        Ok(Self {
            model,
            meta,
            policy,
            labels,
        })
    }

    pub fn meta(&self) -> &CheckpointMeta {
        &self.meta
    }

    pub fn model_version(&self) -> &str {
        &self.meta.model_version
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn check_top_k(&self, top_k: usize) -> Result<(), ServeError> {
        if top_k == 0 || top_k > self.num_classes() {
            return Err(ServeError::TopKOutOfRange {
                top_k,
                num_classes: self.num_classes(),
            });
        }
        Ok(())
    }

    pub fn decode(bytes: &[u8]) -> Result<DynamicImage, ServeError> {
        image::load_from_memory(bytes).map_err(|e| ServeError::UndecodableImage(e.to_string()))
    }

    /// Eval-mode logits for one decoded image.
    pub fn logits(&self, image: &DynamicImage) -> Result<Vec<f32>, ServeError> {
        let x = eval_transform(&self.policy, image).map_err(|e: AugmentError| ServeError::UndecodableImage(e.to_string()))?;
        let batch = self.model.batch(&[x.data()])?;
        let out = self.model.forward(&batch, Mode::Eval)?;
        let mut rows = out.to_vec2::<f32>().map_err(ModelError::from)?;
        Ok(rows.pop().unwrap_or_default())
    }

    /// Full class distribution for an encoded image.
    pub fn probabilities(&self, bytes: &[u8]) -> Result<Vec<f64>, ServeError> {
        Ok(softmax(&self.logits(&Self::decode(bytes)?)?))
    }

    /// Top-k classes for an encoded image. Ties rank the lower class index
    /// first, matching the evaluator's argmax.
    pub fn predict(&self, bytes: &[u8], top_k: usize) -> Result<PredictionResult, ServeError> {
        let start = Instant::now();
        self.check_top_k(top_k)?;
        let probs = self.probabilities(bytes)?;
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        let predictions = order
            .into_iter()
            .take(top_k)
            .map(|i| {
                let l = &self.labels[i];
                Prediction {
                    class_name: l.class_name.clone(),
                    make: l.make.clone(),
                    model_name: l.model_name.clone(),
                    confidence: probs[i],
                }
            })
            .collect();
        Ok(PredictionResult {
            predictions,
            model_version: self.meta.model_version.clone(),
            latency_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}
