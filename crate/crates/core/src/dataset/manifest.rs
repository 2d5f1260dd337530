use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{BBox, DatasetError, DatasetManifest, ImageRecord, Result};

/// Optional class table next to the annotations: one class name per line,
/// line index = class id.
pub const CLASS_NAMES_FILE: &str = "classes.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadIssueKind {
    ImageNotFound,
    Unreadable,
    BboxOutOfBounds,
}

/// A per-record problem found while loading. The record itself stays in the
/// manifest; callers decide whether to filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadIssue {
    pub error: LoadIssueKind,
    pub path: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub issues: Vec<LoadIssue>,
}

impl LoadReport {
    pub fn is_clean(&self) -> bool {
        self.issues.is_empty()
    }

    /// Writes one JSON object per issue.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for issue in &self.issues {
            serde_json::to_writer(&mut out, issue)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn problem_paths(&self) -> impl Iterator<Item = &Path> {
        self.issues.iter().map(|i| i.path.as_path())
    }
}

struct Row {
    path: String,
    class_id: usize,
    bbox: BBox,
    class_name: Option<String>,
}

fn parse_row(record: &csv::StringRecord, line_no: usize) -> Result<Row> {
    let malformed = |reason: String| DatasetError::MalformedRow { line_no, reason };
    if record.len() != 6 && record.len() != 7 {
        return Err(malformed(format!("expected 6 or 7 fields, found {}", record.len())));
    }
    let path = record[0].trim();
    if path.is_empty() {
        return Err(malformed("empty image path".into()));
    }
    let int = |idx: usize, name: &str| -> Result<u32> {
        record[idx]
            .trim()
            .parse::<u32>()
            .map_err(|_| malformed(format!("{name} is not a non-negative integer: {:?}", &record[idx])))
    };
    let class_id = int(1, "class_id")? as usize;
    let bbox = BBox::new(int(2, "x_min")?, int(3, "y_min")?, int(4, "x_max")?, int(5, "y_max")?);
    if !bbox.is_valid() {
        return Err(malformed(format!("degenerate bounding box {bbox:?}")));
    }
    let class_name = record
        .get(6)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_owned);
    Ok(Row {
        path: path.to_owned(),
        class_id,
        bbox,
        class_name,
    })
}

fn looks_like_header(record: &csv::StringRecord) -> bool {
    record
        .get(1)
        .map(|f| f.trim().parse::<u64>().is_err())
        .unwrap_or(false)
}

fn probe_image(path: &Path, bbox: BBox) -> Option<LoadIssue> {
    if !path.is_file() {
        return Some(LoadIssue {
            error: LoadIssueKind::ImageNotFound,
            path: path.to_path_buf(),
            detail: None,
        });
    }
    match image::image_dimensions(path) {
        Ok((w, h)) if bbox.fits_within(w, h) => None,
        Ok((w, h)) => Some(LoadIssue {
            error: LoadIssueKind::BboxOutOfBounds,
            path: path.to_path_buf(),
            detail: Some(format!("bbox {bbox:?} exceeds {w}x{h}")),
        }),
        Err(e) => Some(LoadIssue {
            error: LoadIssueKind::Unreadable,
            path: path.to_path_buf(),
            detail: Some(e.to_string()),
        }),
    }
}

/// Reads `annotation_file` (rows `path,class_id,x_min,y_min,x_max,y_max[,class_name]`,
/// paths relative to `root`) into a manifest.
///
/// Every annotation row becomes a record. Missing or unreadable images and
/// boxes outside the image are listed in the returned [`LoadReport`] rather
/// than dropped.
pub fn load_manifest(root: &Path, annotation_file: &Path) -> Result<(DatasetManifest, LoadReport)> {
    if !annotation_file.is_file() {
        return Err(DatasetError::MissingAnnotationFile(annotation_file.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(annotation_file)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => DatasetError::Io(io),
            other => DatasetError::MalformedRow {
                line_no: 0,
                reason: format!("{other:?}"),
            },
        })?;

    let mut rows = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DatasetError::MalformedRow {
            line_no: e.position().map(|p| p.line() as usize).unwrap_or(idx + 1),
            reason: e.to_string(),
        })?;
        let line_no = record.position().map(|p| p.line() as usize).unwrap_or(idx + 1);
        if idx == 0 && looks_like_header(&record) {
            continue;
        }
        rows.push(parse_row(&record, line_no)?);
    }

    let num_classes = rows.iter().map(|r| r.class_id + 1).max().unwrap_or(0);
    let mut counts = vec![0usize; num_classes];
    for r in &rows {
        counts[r.class_id] += 1;
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(DatasetError::SparseClassIds(missing));
    }

    let class_names = resolve_class_names(root, &rows, num_classes)?;
    let records: Vec<ImageRecord> = rows
        .into_iter()
        .map(|r| ImageRecord {
            image_path: root.join(&r.path),
            class_name: class_names[r.class_id].clone(),
            class_id: r.class_id,
            bbox: r.bbox,
            split: None,
        })
        .collect();

    let issues: Vec<LoadIssue> = records
        .par_iter()
        .filter_map(|r| probe_image(&r.image_path, r.bbox))
        .collect();

    let source_tag = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let manifest = DatasetManifest {
        records,
        num_classes,
        class_names,
        source_tag,
    };
    manifest.check_invariants()?;
    Ok((manifest, LoadReport { issues }))
}

fn resolve_class_names(root: &Path, rows: &[Row], num_classes: usize) -> Result<Vec<String>> {
    let mut from_rows: BTreeMap<usize, &str> = BTreeMap::new();
    for r in rows {
        if let Some(name) = r.class_name.as_deref() {
            match from_rows.get(&r.class_id) {
                Some(prev) if *prev != name => {
                    return Err(DatasetError::ConflictingClassName {
                        class_id: r.class_id,
                        first: prev.to_string(),
                        second: name.to_owned(),
                    })
                }
                _ => {
                    from_rows.insert(r.class_id, name);
                }
            }
        }
    }

    let table_path = root.join(CLASS_NAMES_FILE);
    let table: Vec<String> = if table_path.is_file() {
        std::fs::read_to_string(&table_path)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_owned)
            .collect()
    } else {
        Vec::new()
    };

    Ok((0..num_classes)
        .map(|id| {
            from_rows
                .get(&id)
                .map(|s| s.to_string())
                .or_else(|| table.get(id).cloned())
                .unwrap_or_else(|| format!("class_{id}"))
        })
        .collect())
}
