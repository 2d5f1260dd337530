use crate::augment::Normalization;

/// Static description of a registered backbone.
///
/// Tensor names inside a model are the upstream (timm / torchvision) names
/// prefixed with `backbone.`, so pretrained safetensors load by name.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackboneInfo {
    pub name: &'static str,
    /// Upstream model identifier the tensor layout follows.
    pub upstream: &'static str,
    /// Width of the pooled feature vector fed to the head.
    pub feature_dim: usize,
    /// Pretraining input resolution (square).
    pub input_size: u32,
    /// Input statistics the pretrained weights expect.
    pub normalization: Normalization,
    /// Prefixes (relative to `backbone.`) of the final stage, which
    /// `unfreeze_last_block` makes trainable.
    pub last_block: &'static [&'static str],
}

pub const BACKBONES: [BackboneInfo; 6] = [
    BackboneInfo {
        name: "resnet50",
        upstream: "torchvision/resnet50",
        feature_dim: 2048,
        input_size: 224,
        normalization: IMAGENET,
        last_block: &["layer4."],
    },
    BackboneInfo {
        name: "densenet161",
        upstream: "torchvision/densenet161",
        feature_dim: 2208,
        input_size: 224,
        normalization: IMAGENET,
        last_block: &["features.denseblock4.", "features.norm5."],
    },
    BackboneInfo {
        name: "efficientnetv2_b2",
        upstream: "timm/tf_efficientnetv2_b2",
        feature_dim: 1408,
        input_size: 288,
        normalization: IMAGENET,
        last_block: &["blocks.5.", "conv_head.", "bn2."],
    },
    BackboneInfo {
        name: "mobilevit_s",
        upstream: "timm/mobilevit_s",
        feature_dim: 640,
        input_size: 256,
        normalization: Normalization {
            mean: [0.0; 3],
            std: [1.0; 3],
        },
        last_block: &["stages.4.", "final_conv."],
    },
    BackboneInfo {
        name: "swin_s3_tiny",
        upstream: "timm/swin_s3_tiny_224",
        feature_dim: 768,
        input_size: 224,
        normalization: IMAGENET,
        last_block: &["layers.3.", "norm."],
    },
    BackboneInfo {
        name: "coat_lite_mini",
        upstream: "timm/coat_lite_mini",
        feature_dim: 512,
        input_size: 224,
        normalization: IMAGENET,
        last_block: &["cls_token4", "patch_embed4.", "cpe4.", "crpe4.", "serial_blocks4.", "norm4."],
    },
];

const IMAGENET: Normalization = Normalization {
    mean: [0.485, 0.456, 0.406],
    std: [0.229, 0.224, 0.225],
};

pub fn lookup(name: &str) -> Option<&'static BackboneInfo> {
    BACKBONES.iter().find(|b| b.name == name)
}

pub fn names() -> impl Iterator<Item = &'static str> {
    BACKBONES.iter().map(|b| b.name)
}

impl BackboneInfo {
    /// Whether a backbone-relative tensor name belongs to the final stage.
    pub fn in_last_block(&self, name: &str) -> bool {
        self.last_block.iter().any(|p| name.starts_with(p))
    }
}
