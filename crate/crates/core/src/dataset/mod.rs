//! Dataset ingestion: annotation manifests, bounding-box crops, perceptual-hash
//! deduplication and seeded stratified splits.

mod crop;
mod dedup;
mod manifest;
mod prepare;
mod split;
pub mod synthetic;

pub use crop::{crop_to_bbox, full_image_bbox};
pub use dedup::{dedup_by_perceptual_hash, dedup_hashes, DHash, DedupOutcome, DroppedRecord};
pub use manifest::{load_manifest, LoadIssue, LoadIssueKind, LoadReport};
pub use prepare::{prepare, DedupParams, PrepareOptions, Prepared};
pub use split::{stratified_split, SplitRatios};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

/// Default Hamming threshold for dHash-based deduplication.
pub const DEFAULT_DEDUP_THRESHOLD: u32 = 10;
/// Default dHash grid size (8 gives a 64-bit hash).
pub const DEFAULT_HASH_SIZE: u32 = 8;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("annotation file not found: {0}")]
    MissingAnnotationFile(PathBuf),
    #[error("malformed annotation row at line {line_no}: {reason}")]
    MalformedRow { line_no: usize, reason: String },
    #[error("class ids are not dense: class {0} has no records")]
    SparseClassIds(usize),
    #[error("class table has {names} names for {num_classes} classes")]
    ClassTableMismatch { names: usize, num_classes: usize },
    #[error("conflicting names for class {class_id}: {first:?} vs {second:?}")]
    ConflictingClassName {
        class_id: usize,
        first: String,
        second: String,
    },
    #[error("bounding box {bbox:?} exceeds image extent {width}x{height}")]
    BBoxOutOfBounds { bbox: BBox, width: u32, height: u32 },
    #[error("invalid bounding box {0:?}")]
    InvalidBBox(BBox),
    #[error("class {0} cannot populate every split")]
    ClassTooSmall(usize),
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    InvalidRatios([f64; 3]),
    #[error("hash size must be between 1 and 64, got {0}")]
    InvalidHashSize(u32),
    #[error("failed to decode {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

/// Axis-aligned bounding box in integer pixel coordinates, max-exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn width(&self) -> u32 {
        self.x_max.saturating_sub(self.x_min)
    }

    pub fn height(&self) -> u32 {
        self.y_max.saturating_sub(self.y_min)
    }

    /// Non-empty box.
    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.is_valid() && self.x_max <= width && self.y_max <= height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train, val or test)")),
        }
    }
}

/// One labeled image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_path: PathBuf,
    pub class_id: usize,
    /// Make, model and year, e.g. "BMW M3 coupe 2012".
    pub class_name: String,
    pub bbox: BBox,
    /// `None` until [`stratified_split`] assigns one.
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<ImageRecord>,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    /// Free-form corpus tag such as `cars-197` or `bmw-10`.
    pub source_tag: String,
}

impl DatasetManifest {
    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.split == Some(split))
    }

    pub fn count(&self, split: Split) -> usize {
        self.records_in(split).count()
    }

    /// Record counts per class id.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for r in &self.records {
            if r.class_id < counts.len() {
                counts[r.class_id] += 1;
            }
        }
        counts
    }

    /// Returns a copy with `records` replaced, keeping the class table.
    pub fn with_records(&self, records: Vec<ImageRecord>) -> Self {
        Self {
            records,
            num_classes: self.num_classes,
            class_names: self.class_names.clone(),
            source_tag: self.source_tag.clone(),
        }
    }

    /// Checks the class-table invariants: unique names, one name per class,
    /// and every record's id within range.
    pub fn check_invariants(&self) -> Result<()> {
        if self.class_names.len() != self.num_classes {
            return Err(DatasetError::ClassTableMismatch {
                names: self.class_names.len(),
                num_classes: self.num_classes,
            });
        }
        let mut seen = std::collections::HashMap::new();
        for (id, name) in self.class_names.iter().enumerate() {
            if let Some(prev) = seen.insert(name.as_str(), id) {
                return Err(DatasetError::ConflictingClassName {
                    class_id: id,
                    first: self.class_names[prev].clone(),
                    second: name.clone(),
                });
            }
        }
        for r in &self.records {
            if r.class_id >= self.num_classes {
                return Err(DatasetError::SparseClassIds(r.class_id));
            }
        }
        Ok(())
    }
}
