use serde::{Deserialize, Serialize};

use super::{AugmentError, Result};

/// Default output resolution (height, width).
pub const DEFAULT_OUTPUT_SIZE: (u32, u32) = (288, 288);

const DEFAULT_GATE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    HorizontalFlip,
    VerticalFlip,
    Rotation,
    Greyscale,
    GaussianBlur,
    RandomCrop,
    ColorJitter,
}

impl TransformKind {
    /// Every kind, in the order the default chain applies them.
    pub const ALL: [TransformKind; 7] = [
        TransformKind::HorizontalFlip,
        TransformKind::VerticalFlip,
        TransformKind::Rotation,
        TransformKind::Greyscale,
        TransformKind::GaussianBlur,
        TransformKind::RandomCrop,
        TransformKind::ColorJitter,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TransformKind::HorizontalFlip => "horizontal_flip",
            TransformKind::VerticalFlip => "vertical_flip",
            TransformKind::Rotation => "rotation",
            TransformKind::Greyscale => "greyscale",
            TransformKind::GaussianBlur => "gaussian_blur",
            TransformKind::RandomCrop => "random_crop",
            TransformKind::ColorJitter => "color_jitter",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// A transform with its parameter ranges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transform {
    HorizontalFlip,
    VerticalFlip,
    /// Angle drawn uniformly from `[-max_degrees, max_degrees]`.
    Rotation { max_degrees: f32 },
    Greyscale,
    GaussianBlur { sigma: (f32, f32) },
    /// Area fraction of the kept region, aspect ratio preserved.
    RandomCrop { scale: (f32, f32) },
    /// Maximum deltas; factors are drawn from `[1 - d, 1 + d]`.
    ColorJitter {
        brightness: f32,
        contrast: f32,
        saturation: f32,
    },
}

impl Transform {
    pub fn kind(&self) -> TransformKind {
        match self {
            Transform::HorizontalFlip => TransformKind::HorizontalFlip,
            Transform::VerticalFlip => TransformKind::VerticalFlip,
            Transform::Rotation { .. } => TransformKind::Rotation,
            Transform::Greyscale => TransformKind::Greyscale,
            Transform::GaussianBlur { .. } => TransformKind::GaussianBlur,
            Transform::RandomCrop { .. } => TransformKind::RandomCrop,
            Transform::ColorJitter { .. } => TransformKind::ColorJitter,
        }
    }

    pub fn default_for(kind: TransformKind) -> Self {
        match kind {
            TransformKind::HorizontalFlip => Transform::HorizontalFlip,
            TransformKind::VerticalFlip => Transform::VerticalFlip,
            TransformKind::Rotation => Transform::Rotation { max_degrees: 15.0 },
            TransformKind::Greyscale => Transform::Greyscale,
            TransformKind::GaussianBlur => Transform::GaussianBlur { sigma: (0.1, 2.0) },
            TransformKind::RandomCrop => Transform::RandomCrop { scale: (0.6, 1.0) },
            TransformKind::ColorJitter => Transform::ColorJitter {
                brightness: 0.4,
                contrast: 0.4,
                saturation: 0.4,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformSpec {
    pub transform: Transform,
    pub gate_probability: f64,
}

impl TransformSpec {
    pub fn new(transform: Transform, gate_probability: f64) -> Self {
        Self {
            transform,
            gate_probability,
        }
    }

    pub fn kind(&self) -> TransformKind {
        self.transform.kind()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalization {
    pub fn new(mean: [f32; 3], std: [f32; 3]) -> Self {
        Self { mean, std }
    }

    pub fn imagenet() -> Self {
        Self::new([0.485, 0.456, 0.406], [0.229, 0.224, 0.225])
    }

    /// Maps [0, 1] to [-1, 1]; used by TF-ported weights.
    pub fn inception() -> Self {
        Self::new([0.5; 3], [0.5; 3])
    }

    pub fn identity() -> Self {
        Self::new([0.0; 3], [1.0; 3])
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.std.iter().enumerate() {
            if !(s.is_finite() && *s > 0.0) {
                return Err(AugmentError::InvalidRange {
                    field: format!("normalization.std[{i}]"),
                    reason: format!("must be strictly positive, got {s}"),
                });
            }
        }
        if self.mean.iter().any(|m| !m.is_finite()) {
            return Err(AugmentError::InvalidRange {
                field: "normalization.mean".into(),
                reason: "must be finite".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationPolicy {
    pub transforms: Vec<TransformSpec>,
    /// (height, width)
    pub output_size: (u32, u32),
    pub normalization: Normalization,
    /// When false, inputs smaller than `output_size` are rejected instead of
    /// being upsampled.
    pub allow_upscale: bool,
}

impl AugmentationPolicy {
    /// Resize + normalize only.
    pub fn eval_only(output_size: (u32, u32), normalization: Normalization) -> Self {
        Self {
            transforms: Vec::new(),
            output_size,
            normalization,
            allow_upscale: true,
        }
    }
}

/// One `augmentation.transforms` list entry as written in YAML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TransformEntry {
    pub kind: String,
    /// Gate probability, default 0.5.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_degrees: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub brightness: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contrast: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub saturation: Option<f64>,
}

impl TransformEntry {
    pub fn gated(kind: TransformKind, p: f64) -> Self {
        Self {
            kind: kind.name().to_owned(),
            p: Some(p),
            ..Default::default()
        }
    }
}

/// The `augmentation:` config section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationSection {
    #[serde(default)]
    pub transforms: Vec<TransformEntry>,
    /// `[height, width]`; `None` means the backbone's native resolution.
    #[serde(default)]
    pub output_size: Option<[u32; 2]>,
    /// `None` means the backbone's pretraining statistics.
    #[serde(default)]
    pub normalization: Option<Normalization>,
    #[serde(default = "default_true")]
    pub allow_upscale: bool,
}

fn default_true() -> bool {
    true
}

impl Default for AugmentationSection {
    fn default() -> Self {
        Self::recommended()
    }
}

impl AugmentationSection {
    pub fn empty() -> Self {
        Self {
            transforms: Vec::new(),
            output_size: None,
            normalization: None,
            allow_upscale: true,
        }
    }

    /// All seven transforms gated at 0.5.
    pub fn all_gated() -> Self {
        Self {
            transforms: TransformKind::ALL
                .iter()
                .map(|k| TransformEntry::gated(*k, DEFAULT_GATE))
                .collect(),
            ..Self::empty()
        }
    }

    /// Same chain with vertical flips disabled.
    pub fn recommended() -> Self {
        let mut s = Self::all_gated();
        for t in &mut s.transforms {
            if t.kind == TransformKind::VerticalFlip.name() {
                t.p = Some(0.0);
            }
        }
        s
    }
}

fn range_error(field: impl Into<String>, reason: impl Into<String>) -> AugmentError {
    AugmentError::InvalidRange {
        field: field.into(),
        reason: reason.into(),
    }
}

fn check_pair(field: &str, pair: [f64; 2], lo: f64, hi: f64) -> Result<(f32, f32)> {
    let [a, b] = pair;
    if !(a.is_finite() && b.is_finite()) || a > b || a < lo || b > hi {
        return Err(range_error(
            field,
            format!("expected {lo} <= min <= max <= {hi}, got [{a}, {b}]"),
        ));
    }
    Ok((a as f32, b as f32))
}

fn check_delta(field: &str, v: f64) -> Result<f32> {
    if !(0.0..=1.0).contains(&v) {
        return Err(range_error(field, format!("expected a delta in [0, 1], got {v}")));
    }
    Ok(v as f32)
}

fn reject_extra(entry: &TransformEntry, idx: usize, allowed: &[&str]) -> Result<()> {
    let present = [
        ("max_degrees", entry.max_degrees.is_some()),
        ("sigma", entry.sigma.is_some()),
        ("scale", entry.scale.is_some()),
        ("brightness", entry.brightness.is_some()),
        ("contrast", entry.contrast.is_some()),
        ("saturation", entry.saturation.is_some()),
    ];
    for (name, set) in present {
        if set && !allowed.contains(&name) {
            return Err(range_error(
                format!("transforms[{idx}].{name}"),
                format!("not a parameter of {}", entry.kind),
            ));
        }
    }
    Ok(())
}

fn build_transform(entry: &TransformEntry, idx: usize) -> Result<TransformSpec> {
    let kind = TransformKind::from_name(&entry.kind)
        .ok_or_else(|| AugmentError::UnknownTransform(entry.kind.clone()))?;
    let p = entry.p.unwrap_or(DEFAULT_GATE);
    if !(0.0..=1.0).contains(&p) {
        return Err(range_error(
            format!("transforms[{idx}].p"),
            format!("gate probability must lie in [0, 1], got {p}"),
        ));
    }
    let field = |name: &str| format!("transforms[{idx}].{name}");
    let transform = match (kind, Transform::default_for(kind)) {
        (TransformKind::Rotation, Transform::Rotation { max_degrees }) => {
            reject_extra(entry, idx, &["max_degrees"])?;
            let deg = entry.max_degrees.unwrap_or(max_degrees as f64);
            if !(0.0..=180.0).contains(&deg) {
                return Err(range_error(field("max_degrees"), format!("expected [0, 180], got {deg}")));
            }
            Transform::Rotation {
                max_degrees: deg as f32,
            }
        }
        (TransformKind::GaussianBlur, Transform::GaussianBlur { sigma }) => {
            reject_extra(entry, idx, &["sigma"])?;
            let pair = entry.sigma.unwrap_or([sigma.0 as f64, sigma.1 as f64]);
            let (lo, hi) = check_pair(&field("sigma"), pair, 0.0, 50.0)?;
            Transform::GaussianBlur { sigma: (lo, hi) }
        }
        (TransformKind::RandomCrop, Transform::RandomCrop { scale }) => {
            reject_extra(entry, idx, &["scale"])?;
            let pair = entry.scale.unwrap_or([scale.0 as f64, scale.1 as f64]);
            let (lo, hi) = check_pair(&field("scale"), pair, f64::MIN_POSITIVE, 1.0)?;
            Transform::RandomCrop { scale: (lo, hi) }
        }
        (
            TransformKind::ColorJitter,
            Transform::ColorJitter {
                brightness,
                contrast,
                saturation,
            },
        ) => {
            reject_extra(entry, idx, &["brightness", "contrast", "saturation"])?;
            Transform::ColorJitter {
                brightness: check_delta(&field("brightness"), entry.brightness.unwrap_or(brightness as f64))?,
                contrast: check_delta(&field("contrast"), entry.contrast.unwrap_or(contrast as f64))?,
                saturation: check_delta(&field("saturation"), entry.saturation.unwrap_or(saturation as f64))?,
            }
        }
        (_, plain) => {
            reject_extra(entry, idx, &[])?;
            plain
        }
    };
    Ok(TransformSpec::new(transform, p))
}

/// Builds a policy from the config section, keeping the declared order and
/// filling unspecified parameters with defaults.
pub fn build_policy(section: &AugmentationSection) -> Result<AugmentationPolicy> {
    let transforms = section
        .transforms
        .iter()
        .enumerate()
        .map(|(i, e)| build_transform(e, i))
        .collect::<Result<Vec<_>>>()?;
    let output_size = match section.output_size {
        Some([h, w]) if h == 0 || w == 0 => {
            return Err(range_error("output_size", format!("must be positive, got [{h}, {w}]")))
        }
        Some([h, w]) => (h, w),
        None => DEFAULT_OUTPUT_SIZE,
    };
    let normalization = section.normalization.unwrap_or_else(Normalization::imagenet);
    normalization.validate()?;
    Ok(AugmentationPolicy {
        transforms,
        output_size,
        normalization,
        allow_upscale: section.allow_upscale,
    })
}
