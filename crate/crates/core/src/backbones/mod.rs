//! Backbone registry and transfer-learning surgery.
//!
//! Six pretrained architectures reimplemented on candle with upstream
//! tensor names, so converted timm / torchvision weights load directly.
//! [`build_model`] freezes the backbone (optionally except its final stage)
//! and attaches a fresh Dropout+Linear head.

mod coat;
mod densenet;
mod efficientnet;
mod layers;
mod mobilevit;
mod model;
mod params;
mod registry;
mod resnet;
mod swin;

pub use model::{
    build_model, build_model_for_classes, BackboneSpec, FreezeReport, Head, Mode, Model, ModelOptions,
};
pub use params::{Entry, Role};
pub use registry::{lookup, names, BackboneInfo, BACKBONES};

use candle_core::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("unknown backbone {0:?}; registered: resnet50, densenet161, efficientnetv2_b2, mobilevit_s, swin_s3_tiny, coat_lite_mini")]
    UnknownBackbone(String),
    #[error("pretrained weights for {backbone} unavailable: {reason}")]
    PretrainedWeightsUnavailable { backbone: String, reason: String },
    #[error("shape mismatch for {what}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        what: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("weights do not match the model: missing {missing:?}, unexpected {unexpected:?}")]
    WeightsMismatch {
        missing: Vec<String>,
        unexpected: Vec<String>,
    },
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error("{0}")]
    Internal(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// A backbone trunk: NCHW images to pooled (N, feature_dim) features.
pub(crate) trait Features: Send + Sync {
    fn features(&self, x: &Tensor, train: bool) -> Result<Tensor>;
}
