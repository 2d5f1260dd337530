use image::imageops::FilterType;
use image::DynamicImage;
use rayon::prelude::*;

use super::crop::crop_box;
use super::{DatasetError, ImageRecord, Result};

/// Difference hash: the image is reduced to a `(size + 1) x size` grey grid and
/// each bit records whether a pixel is brighter than its left neighbour.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DHash {
    words: Vec<u64>,
    bits: u32,
}

impl DHash {
    pub fn compute(image: &DynamicImage, hash_size: u32) -> Result<Self> {
        if hash_size == 0 || hash_size > 64 {
            return Err(DatasetError::InvalidHashSize(hash_size));
        }
        let grey = image.to_luma8();
        let small = image::imageops::resize(&grey, hash_size + 1, hash_size, FilterType::Lanczos3);
        let bits = hash_size * hash_size;
        let mut words = vec![0u64; bits.div_ceil(64) as usize];
        let mut idx = 0usize;
        for y in 0..hash_size {
            for x in 0..hash_size {
                let left = small.get_pixel(x, y)[0];
                let right = small.get_pixel(x + 1, y)[0];
                if right > left {
                    words[idx / 64] |= 1u64 << (63 - (idx % 64));
                }
                idx += 1;
            }
        }
        Ok(Self { words, bits })
    }

    pub fn from_u64(value: u64) -> Self {
        Self {
            words: vec![value],
            bits: 64,
        }
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    /// First 64 bits; the whole hash for the default 8x8 grid.
    pub fn as_u64(&self) -> u64 {
        self.words[0]
    }

    pub fn hamming(&self, other: &DHash) -> u32 {
        debug_assert_eq!(self.bits, other.bits);
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }
}

impl std::fmt::Display for DHash {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for w in &self.words {
            write!(f, "{w:016x}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DroppedRecord {
    pub record: ImageRecord,
    /// Path of the kept record this one duplicates.
    pub duplicate_of: std::path::PathBuf,
    pub distance: u32,
}

#[derive(Debug, Clone, Default)]
pub struct DedupOutcome {
    pub kept: Vec<ImageRecord>,
    pub dropped: Vec<DroppedRecord>,
    /// Records whose image could not be decoded or cropped, with the reason.
    pub failures: Vec<(ImageRecord, String)>,
}

/// Greedy first-seen-wins deduplication over precomputed hashes.
///
/// Returns, for each item in order, `None` when kept or `Some((kept_index,
/// distance))` naming the earliest kept item within `threshold`.
pub fn dedup_hashes(hashes: &[DHash], threshold: u32) -> Vec<Option<(usize, u32)>> {
    let mut kept: Vec<usize> = Vec::new();
    hashes
        .iter()
        .enumerate()
        .map(|(i, h)| {
            let hit = kept
                .iter()
                .map(|&k| (k, hashes[k].hamming(h)))
                .find(|&(_, d)| d <= threshold);
            if hit.is_none() {
                kept.push(i);
            }
            hit
        })
        .collect()
}

fn hash_record(record: &ImageRecord, hash_size: u32) -> std::result::Result<DHash, String> {
    let img = image::open(&record.image_path).map_err(|e| e.to_string())?;
    let cropped = crop_box(record.bbox, &img).map_err(|e| e.to_string())?;
    DHash::compute(&cropped, hash_size).map_err(|e| e.to_string())
}

/// Drops near-duplicate images (bbox crops whose dHash distance is at most
/// `threshold`), keeping the first occurrence in manifest order.
///
/// Hashing runs in parallel; the result does not depend on the thread count.
pub fn dedup_by_perceptual_hash(
    records: &[ImageRecord],
    hash_size: u32,
    threshold: u32,
) -> Result<DedupOutcome> {
    if hash_size == 0 || hash_size > 64 {
        return Err(DatasetError::InvalidHashSize(hash_size));
    }
    let hashed: Vec<_> = records
        .par_iter()
        .map(|r| hash_record(r, hash_size))
        .collect();

    let mut outcome = DedupOutcome::default();
    let mut ok_records = Vec::new();
    let mut hashes = Vec::new();
    for (record, h) in records.iter().zip(hashed) {
        match h {
            Ok(h) => {
                ok_records.push(record);
                hashes.push(h);
            }
            Err(reason) => outcome.failures.push((record.clone(), reason)),
        }
    }
    for (record, verdict) in ok_records.iter().zip(dedup_hashes(&hashes, threshold)) {
        match verdict {
            None => outcome.kept.push((*record).clone()),
            Some((k, distance)) => outcome.dropped.push(DroppedRecord {
                record: (*record).clone(),
                duplicate_of: ok_records[k].image_path.clone(),
                distance,
            }),
        }
    }
    Ok(outcome)
}
