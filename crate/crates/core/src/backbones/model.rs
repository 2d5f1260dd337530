use std::cell::RefCell;
use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::coat::CoatLiteMini;
use super::densenet::DenseNet161;
use super::efficientnet::EfficientNetV2B2;
use super::layers::Linear;
use super::mobilevit::MobileVitS;
use super::params::{Builder, Init, ParamStore, Role};
use super::registry::{lookup, BackboneInfo};
use super::resnet::ResNet50;
use super::swin::SwinS3Tiny;
use super::{Features, ModelError, Result};

pub const BACKBONE_PREFIX: &str = "backbone.";
pub const HEAD_WEIGHT: &str = "head.weight";

/// Which backbone to build and how much of it to train.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: String,
    pub pretrained: bool,
    pub unfreeze_last_block: bool,
    pub feature_dim: usize,
}

impl BackboneSpec {
    /// Spec with `feature_dim` taken from the registry.
    pub fn new(name: &str, pretrained: bool, unfreeze_last_block: bool) -> Result<Self> {
        let info = lookup(name).ok_or_else(|| ModelError::UnknownBackbone(name.into()))?;
        Ok(Self {
            name: name.into(),
            pretrained,
            unfreeze_last_block,
            feature_dim: info.feature_dim,
        })
    }

    pub fn info(&self) -> Result<&'static BackboneInfo> {
        lookup(&self.name).ok_or_else(|| ModelError::UnknownBackbone(self.name.clone()))
    }

    pub fn validate(&self) -> Result<()> {
        let info = self.info()?;
        if self.feature_dim != info.feature_dim {
            return Err(ModelError::InvalidSpec(format!(
                "feature_dim {} does not match {}'s width {}",
                self.feature_dim, self.name, info.feature_dim
            )));
        }
        Ok(())
    }
}

/// Build-time knobs that are not part of the spec.
#[derive(Debug, Clone)]
pub struct ModelOptions {
    /// Pretrained weights (safetensors, upstream names with or without the
    /// `backbone.` prefix). Required when `spec.pretrained`.
    pub weights: Option<PathBuf>,
    /// Seed for random initialization.
    pub seed: u64,
    /// Square input resolution; defaults to the registry's native size.
    pub input_size: Option<usize>,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            weights: None,
            seed: 0,
            input_size: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active; masks drawn from a ChaCha stream with this seed.
    Train { seed: u64 },
}

impl Mode {
    pub fn is_train(self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

/// Dropout followed by a linear map to class logits.
#[derive(Debug, Clone)]
pub struct Head {
    dropout: f64,
    linear: Linear,
}

impl Head {
    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    /// Inverted dropout: survivors are scaled by 1/(1-p) in training, so
    /// evaluation needs no rescaling.
    pub fn forward(&self, features: &Tensor, mode: Mode) -> Result<Tensor> {
        let x = match mode {
            Mode::Train { seed } if self.dropout > 0.0 => {
                let keep = 1.0 - self.dropout;
                let scale = (1.0 / keep) as f32;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mask: Vec<f32> = (0..features.elem_count())
                    .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
                    .collect();
                let mask = Tensor::from_vec(mask, features.shape(), features.device())?;
                features.mul(&mask)?
            }
            _ => features.clone(),
        };
        self.linear.forward(&x)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeReport {
    pub trainable_params: usize,
    pub frozen_params: usize,
    pub trainable_tensors: Vec<String>,
}

/// A backbone plus classification head.
pub struct Model {
    spec: BackboneSpec,
    info: &'static BackboneInfo,
    backbone: Box<dyn Features>,
    head: Head,
    store: ParamStore,
    num_classes: usize,
    input_size: usize,
    device: Device,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("spec", &self.spec)
            .field("num_classes", &self.num_classes)
            .field("input_size", &self.input_size)
            .finish_non_exhaustive()
    }
}

fn check_input_size(name: &str, native: usize, size: usize) -> Result<()> {
    let ok = match name {
        // windows and relative position tables are sized for one resolution
        "swin_s3_tiny" => size == native,
        // 2x2 unfolding after three stride-2 stages beyond the stem
        "mobilevit_s" => size % 64 == 0,
        _ => size % 32 == 0,
    };
    if ok && size > 0 {
        Ok(())
    } else {
        Err(ModelError::InvalidSpec(format!(
            "{name} cannot run at {size}x{size} (native {native})"
        )))
    }
}

/// Builds a model whose head rows are keyed by class index.
pub fn build_model(spec: &BackboneSpec, num_classes: usize, dropout_rate: f64, opts: &ModelOptions) -> Result<Model> {
    let keys: Vec<String> = (0..num_classes).map(|i| i.to_string()).collect();
    build_model_for_classes(spec, &keys, dropout_rate, opts)
}

/// Builds a model whose head row `i` is initialized from a stream keyed by
/// `class_keys[i]`, so reordering classes reorders the head identically.
pub fn build_model_for_classes(
    spec: &BackboneSpec,
    class_keys: &[String],
    dropout_rate: f64,
    opts: &ModelOptions,
) -> Result<Model> {
    let info = spec.info()?;
    spec.validate()?;
    let num_classes = class_keys.len();
    if num_classes < 2 {
        return Err(ModelError::InvalidSpec(format!("num_classes must be >= 2, got {num_classes}")));
    }
    if !(0.0..1.0).contains(&dropout_rate) {
        return Err(ModelError::InvalidSpec(format!("dropout rate {dropout_rate} outside [0, 1)")));
    }
    let input_size = opts.input_size.unwrap_or(info.input_size as usize);
    check_input_size(info.name, info.input_size as usize, input_size)?;
    let weights = if spec.pretrained {
        let path = opts.weights.as_ref().ok_or_else(|| ModelError::PretrainedWeightsUnavailable {
            backbone: spec.name.clone(),
            reason: "no weights file configured (model.net.weights); pretrained weights are never downloaded".into(),
        })?;
        if !path.is_file() {
            return Err(ModelError::PretrainedWeightsUnavailable {
                backbone: spec.name.clone(),
                reason: format!("{} does not exist", path.display()),
            });
        }
        Some(path.clone())
    } else {
        None
    };

    let device = Device::Cpu;
    let store = RefCell::new(ParamStore::default());
    let unfreeze = spec.unfreeze_last_block;
    let trainable = move |name: &str| match name.strip_prefix(BACKBONE_PREFIX) {
        Some(rel) => unfreeze && info.in_last_block(rel),
        None => true,
    };
    let root = Builder::new(&store, &trainable, opts.seed, &device);
    let b = root.pp("backbone");
    let backbone: Box<dyn Features> = match info.name {
        "resnet50" => Box::new(ResNet50::new(&b)?),
        "densenet161" => Box::new(DenseNet161::new(&b)?),
        "efficientnetv2_b2" => Box::new(EfficientNetV2B2::new(&b)?),
        "mobilevit_s" => Box::new(MobileVitS::new(&b)?),
        "swin_s3_tiny" => Box::new(SwinS3Tiny::new(&b, input_size)?),
        "coat_lite_mini" => Box::new(CoatLiteMini::new(&b)?),
        other => return Err(ModelError::UnknownBackbone(other.into())),
    };
    let h = root.pp("head");
    let weight = h.param("weight", (num_classes, info.feature_dim), Init::Zeros)?;
    let bias = h.param("bias", num_classes, Init::Zeros)?;
    let store = store.into_inner();

    // head: zero bias, uniform(+-1/sqrt(fan_in)) rows keyed by class
    let bound = 1.0 / (info.feature_dim as f64).sqrt();
    let mut rows = Vec::with_capacity(num_classes * info.feature_dim);
    for key in class_keys {
        let mut rng = head_row_stream(opts.seed, key);
        rows.extend((0..info.feature_dim).map(|_| rng.random_range(-bound..bound) as f32));
    }
    store.assign(HEAD_WEIGHT, &Tensor::from_vec(rows, (num_classes, info.feature_dim), &device)?)?;

    let model = Model {
        spec: spec.clone(),
        info,
        backbone,
        head: Head {
            dropout: dropout_rate,
            linear: Linear::from_parts(weight, Some(bias)),
        },
        store,
        num_classes,
        input_size,
        device,
    };
    if let Some(path) = weights {
        model.load_pretrained(&path)?;
    }
    Ok(model)
}

fn head_row_stream(seed: u64, key: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in "head.weight/".bytes().chain(key.bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng
}

/// Upstream keys that carry no learnable state of ours.
fn ignorable(rel: &str) -> bool {
    rel.ends_with("num_batches_tracked") || rel.ends_with("relative_position_index") || rel.ends_with("attn_mask")
}

/// The original classifier, dropped by head replacement.
fn upstream_classifier(rel: &str) -> bool {
    ["fc.", "classifier.", "head.", "head_drop."]
        .iter()
        .any(|p| rel.starts_with(p))
}

impl Model {
    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub(crate) fn set_pretrained_flag(&mut self, pretrained: bool) {
        self.spec.pretrained = pretrained;
    }

    pub fn info(&self) -> &'static BackboneInfo {
        self.info
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn feature_dim(&self) -> usize {
        self.info.feature_dim
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Whether the backbone has no trainable tensors, making its features a
    /// deterministic function of the input.
    pub fn backbone_frozen(&self) -> bool {
        !self
            .store
            .entries()
            .iter()
            .any(|e| e.trainable && e.name.starts_with(BACKBONE_PREFIX))
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let dims = x.dims();
        let want = [3, self.input_size, self.input_size];
        if dims.len() != 4 || dims[1..] != want || dims[0] == 0 {
            return Err(ModelError::ShapeMismatch {
                what: "input batch (n, 3, h, w)".into(),
                expected: want.to_vec(),
                actual: dims.to_vec(),
            });
        }
        Ok(())
    }

    /// Pooled backbone features, (n, feature_dim). In training mode only
    /// the unfrozen stage switches its normalization to batch statistics.
    pub fn features(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.check_input(x)?;
        self.backbone.features(&x.to_dtype(DType::F32)?, mode.is_train())
    }

    /// Logits, (n, num_classes).
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let f = self.features(x, mode)?;
        self.head.forward(&f, mode)
    }

    pub fn freeze_report(&self) -> FreezeReport {
        let mut report = FreezeReport {
            trainable_params: 0,
            frozen_params: 0,
            trainable_tensors: Vec::new(),
        };
        for e in self.store.entries().iter().filter(|e| e.role == Role::Param) {
            if e.trainable {
                report.trainable_params += e.numel();
                report.trainable_tensors.push(e.name.clone());
            } else {
                report.frozen_params += e.numel();
            }
        }
        report
    }

    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        self.store.trainable_vars()
    }

    /// All named tensors (parameters and buffers), deep-copied.
    pub fn state_dict(&self) -> Result<Vec<(String, Tensor)>> {
        self.store.snapshot()
    }

    /// Loads a complete state (every tensor of this model, nothing else).
    pub fn load_state(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        let known: BTreeSet<&str> = self.store.entries().iter().map(|e| e.name.as_str()).collect();
        let unexpected: Vec<String> = tensors
            .keys()
            .filter(|k| !known.contains(k.as_str()))
            .cloned()
            .collect();
        let missing: Vec<String> = known
            .iter()
            .filter(|k| !tensors.contains_key(**k))
            .map(|k| k.to_string())
            .collect();
        if !missing.is_empty() || !unexpected.is_empty() {
            return Err(ModelError::WeightsMismatch { missing, unexpected });
        }
        for (name, t) in tensors {
            self.store.assign(name, t)?;
        }
        Ok(())
    }

    /// Loads backbone weights from an upstream safetensors export. The
    /// original classifier and bookkeeping buffers are skipped; every
    /// backbone tensor must be present.
    pub fn load_pretrained(&self, path: &Path) -> Result<()> {
        let unavailable = |reason: String| ModelError::PretrainedWeightsUnavailable {
            backbone: self.spec.name.clone(),
            reason,
        };
        let tensors = candle_core::safetensors::load(path, &self.device)
            .map_err(|e| unavailable(format!("{}: {e}", path.display())))?;
        let mut loaded = BTreeSet::new();
        let mut unexpected = Vec::new();
        for (key, t) in &tensors {
            let rel = key.strip_prefix(BACKBONE_PREFIX).unwrap_or(key);
            if ignorable(rel) || upstream_classifier(rel) {
                continue;
            }
            let full = format!("{BACKBONE_PREFIX}{rel}");
            let name = self.store.canonical(&full).to_owned();
            if self.store.get(&name).is_none() {
                unexpected.push(key.clone());
                continue;
            }
            if !loaded.insert(name.clone()) {
                continue;
            }
            self.store.assign(&name, t)?;
        }
        let missing: Vec<String> = self
            .store
            .entries()
            .iter()
            .filter(|e| e.name.starts_with(BACKBONE_PREFIX) && !loaded.contains(&e.name))
            .map(|e| e.name.clone())
            .collect();
        if !missing.is_empty() || !unexpected.is_empty() {
            return Err(ModelError::WeightsMismatch { missing, unexpected });
        }
        Ok(())
    }

    /// Stacks CHW float images into a batch tensor.
    pub fn batch(&self, images: &[&[f32]]) -> Result<Tensor> {
        let s = self.input_size;
        let mut data = Vec::with_capacity(images.len() * 3 * s * s);
        for img in images {
            if img.len() != 3 * s * s {
                return Err(ModelError::ShapeMismatch {
                    what: "image".into(),
                    expected: vec![3, s, s],
                    actual: vec![img.len()],
                });
            }
            data.extend_from_slice(img);
        }
        Ok(Tensor::from_vec(data, (images.len(), 3, s, s), &self.device)?)
    }
}
