use image::DynamicImage;
use rayon::prelude::*;

use super::{Result, TrainerError};
use crate::augment::{self, build_policy, AugmentationPolicy, AugmentationSection};
use crate::backbones::BackboneInfo;
use crate::dataset::{crop_to_bbox, ImageRecord};

/// Mixes a run seed with two counters (splitmix64 finalizer per word), so
/// sample seeds are a pure function of `(seed, a, b)`.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(mix(mix(seed) ^ a) ^ b)
}

/// Augmentation seed of the sample at `index` (position in its split) in `epoch`.
pub fn sample_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    derive_seed(seed, epoch as u64, index as u64)
}

/// Builds the policy for a backbone: an unset output size or normalization
/// falls back to the backbone's native resolution and pretraining statistics.
pub fn resolve_policy(section: &AugmentationSection, info: &BackboneInfo) -> Result<AugmentationPolicy> {
    let mut policy = build_policy(section)?;
    if section.output_size.is_none() {
        policy.output_size = (info.input_size, info.input_size);
    }
    if section.normalization.is_none() {
        policy.normalization = info.normalization;
    }
    Ok(policy)
}

/// Square input size implied by a policy.
pub fn policy_input_size(policy: &AugmentationPolicy) -> Result<usize> {
    let (h, w) = policy.output_size;
    if h != w {
        return Err(TrainerError::InvalidConfig(format!(
            "augmentation.output_size must be square for the backbones, got [{h}, {w}]"
        )));
    }
    Ok(h as usize)
}

/// Whether every transform is gated off, so training samples equal the
/// evaluation transform bit for bit.
pub fn is_deterministic(policy: &AugmentationPolicy) -> bool {
    policy.transforms.iter().all(|t| t.gate_probability <= 0.0)
}

/// Decodes a record's image, cropped to its box when `crop` is set.
pub fn load_image(record: &ImageRecord, crop: bool) -> Result<DynamicImage> {
    let img = image::open(&record.image_path).map_err(|source| TrainerError::Image {
        path: record.image_path.clone(),
        source,
    })?;
    if crop {
        Ok(crop_to_bbox(record, &img)?)
    } else {
        Ok(img)
    }
}

/// How one sample is turned into a tensor.
#[derive(Debug, Clone, Copy)]
pub enum Transform {
    Eval,
    Augment { seed: u64 },
}

/// Decodes and transforms records in parallel; output order follows input.
pub(crate) fn load_batch(
    pool: &rayon::ThreadPool,
    records: &[(&ImageRecord, Transform)],
    policy: &AugmentationPolicy,
    crop: bool,
) -> Result<Vec<Vec<f32>>> {
    pool.install(|| {
        records
            .par_iter()
            .map(|(rec, t)| {
                let img = load_image(rec, crop)?;
                let tensor = match *t {
                    Transform::Eval => augment::eval_transform(policy, &img)?,
                    Transform::Augment { seed } => augment::apply(policy, &img, seed)?,
                };
                Ok(tensor.into_data())
            })
            .collect()
    })
}

pub(crate) fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| TrainerError::InvalidConfig(format!("cannot start data workers: {e}")))
}
