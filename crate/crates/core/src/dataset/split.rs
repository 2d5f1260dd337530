use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetError, DatasetManifest, Result, Split};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Self {
        Self { train, val, test }
    }

    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.as_array();
        let finite = r.iter().all(|v| v.is_finite() && *v >= 0.0);
        if !finite || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DatasetError::InvalidRatios(r));
        }
        Ok(())
    }
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self::new(0.7, 0.15, 0.15)
    }
}

/// Per-split counts for a class of `n` records.
///
/// Each count is the floor or ceiling of its exact share, so it is within one
/// record of `ratio * n`. Among the admissible roundings the one giving
/// ceilings to the largest fractional remainders is chosen, subject to every
/// split with a positive ratio receiving at least one record.
fn allocate(n: usize, ratios: [f64; 3]) -> Option<[usize; 3]> {
    let exact = ratios.map(|r| r * n as f64);
    let floors = exact.map(|e| e.floor() as usize);
    let frac = [0, 1, 2].map(|i| exact[i] - floors[i] as f64);
    let leftover = n.checked_sub(floors.iter().sum())?;

    let mut best: Option<([usize; 3], f64)> = None;
    for mask in 0u8..8 {
        let chosen: Vec<usize> = (0..3).filter(|i| mask & (1 << i) != 0).collect();
        if chosen.len() != leftover || chosen.iter().any(|&i| frac[i] <= 0.0) {
            continue;
        }
        let mut counts = floors;
        for &i in &chosen {
            counts[i] += 1;
        }
        if (0..3).any(|i| ratios[i] > 0.0 && counts[i] == 0) {
            continue;
        }
        let score: f64 = chosen.iter().map(|&i| frac[i]).sum();
        // strict > keeps the lowest mask (train first) on ties
        if best.as_ref().is_none_or(|(_, s)| score > *s + 1e-12) {
            best = Some((counts, score));
        }
    }
    best.map(|(c, _)| c)
}

/// Assigns every record to train/val/test, stratified by class.
///
/// Each class is shuffled with a generator keyed by `(seed, class_id)`, so the
/// assignment is a pure function of the manifest order, ratios and seed.
pub fn stratified_split(
    manifest: &DatasetManifest,
    ratios: SplitRatios,
    seed: u64,
) -> Result<DatasetManifest> {
    ratios.validate()?;
    let r = ratios.as_array();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); manifest.num_classes];
    for (i, rec) in manifest.records.iter().enumerate() {
        if rec.class_id >= manifest.num_classes {
            return Err(DatasetError::SparseClassIds(rec.class_id));
        }
        by_class[rec.class_id].push(i);
    }

    let mut out = manifest.clone();
    for (class_id, mut members) in by_class.into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let counts = allocate(members.len(), r).ok_or(DatasetError::ClassTooSmall(class_id))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(class_id as u64);
        members.shuffle(&mut rng);
        let mut it = members.into_iter();
        for (split, count) in Split::ALL.into_iter().zip(counts) {
            for idx in it.by_ref().take(count) {
                out.records[idx].split = Some(split);
            }
        }
    }
    Ok(out)
}
