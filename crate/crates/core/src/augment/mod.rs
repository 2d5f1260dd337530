//! Stochastic augmentation engine.
//!
//! A policy is an ordered chain of gated transforms followed by a fixed
//! resize and per-channel normalization. Each transform owns one ChaCha
//! stream (stream id = its position in the chain) derived from the sample
//! seed; the first draw of that stream is the gate, the rest feed the
//! transform's own parameters.

mod ops;
mod policy;
mod tensor;

pub use policy::{
    build_policy, AugmentationPolicy, AugmentationSection, Normalization, Transform, TransformEntry,
    TransformKind, TransformSpec, DEFAULT_OUTPUT_SIZE,
};
pub use tensor::ImageTensor;

use image::{DynamicImage, GenericImageView, Rgb32FImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AugmentError {
    #[error("unknown transform {0:?}")]
    UnknownTransform(String),
    #[error("invalid range for {field}: {reason}")]
    InvalidRange { field: String, reason: String },
    #[error("image {width}x{height} is too small for output {out_w}x{out_h}")]
    ImageTooSmall {
        width: u32,
        height: u32,
        out_w: u32,
        out_h: u32,
    },
}

pub type Result<T, E = AugmentError> = std::result::Result<T, E>;

fn to_float(image: &DynamicImage) -> Rgb32FImage {
    image.to_rgb32f()
}

fn check_size(policy: &AugmentationPolicy, image: &DynamicImage) -> Result<()> {
    let (w, h) = image.dimensions();
    let (out_h, out_w) = policy.output_size;
    let too_small = w == 0 || h == 0 || (!policy.allow_upscale && (w < out_w || h < out_h));
    if too_small {
        return Err(AugmentError::ImageTooSmall {
            width: w,
            height: h,
            out_w,
            out_h,
        });
    }
    Ok(())
}

fn finish(policy: &AugmentationPolicy, img: Rgb32FImage) -> ImageTensor {
    let (out_h, out_w) = policy.output_size;
    let resized = ops::resize(&img, out_w, out_h);
    ImageTensor::normalized(&resized, &policy.normalization)
}

/// Generator for the transform at `position` of a chain applied with `seed`.
pub fn transform_stream(seed: u64, position: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(position as u64);
    rng
}

/// Runs the full stochastic chain. Identical `(policy, image, seed)` always
/// give a bit-identical tensor.
pub fn apply(policy: &AugmentationPolicy, image: &DynamicImage, seed: u64) -> Result<ImageTensor> {
    apply_traced(policy, image, seed).map(|(t, _)| t)
}

/// Like [`apply`], also reporting which transforms fired.
pub fn apply_traced(
    policy: &AugmentationPolicy,
    image: &DynamicImage,
    seed: u64,
) -> Result<(ImageTensor, Vec<bool>)> {
    check_size(policy, image)?;
    let mut img = to_float(image);
    let mut fired = Vec::with_capacity(policy.transforms.len());
    for (position, spec) in policy.transforms.iter().enumerate() {
        let mut rng = transform_stream(seed, position);
        let gate = rng.random::<f64>() < spec.gate_probability;
        if gate {
            img = ops::apply_transform(&spec.transform, img, &mut rng);
        }
        fired.push(gate);
    }
    Ok((finish(policy, img), fired))
}

/// Deterministic validation/test path: resize and normalize only.
pub fn eval_transform(policy: &AugmentationPolicy, image: &DynamicImage) -> Result<ImageTensor> {
    check_size(policy, image)?;
    Ok(finish(policy, to_float(image)))
}
