use std::path::Path;

use super::{
    dedup_by_perceptual_hash, load_manifest, stratified_split, DatasetError, DatasetManifest, DroppedRecord,
    ImageRecord, LoadReport, Result, SplitRatios,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DedupParams {
    pub hash_size: u32,
    pub threshold: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrepareOptions {
    pub ratios: SplitRatios,
    /// `None` skips deduplication.
    pub dedup: Option<DedupParams>,
    pub seed: u64,
}

/// A split manifest plus everything that was left out of it.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub manifest: DatasetManifest,
    pub load_report: LoadReport,
    pub dropped: Vec<DroppedRecord>,
    /// Records that passed the load probe but failed to hash.
    pub failures: Vec<(ImageRecord, String)>,
}

/// Loads annotations, drops records the load probe flagged, deduplicates and
/// assigns splits. The class table is kept whole even when a class loses
/// all of its records.
pub fn prepare(root: &Path, annotation_file: &Path, opts: &PrepareOptions) -> Result<Prepared> {
    let (manifest, load_report) = load_manifest(root, annotation_file)?;
    let flagged: std::collections::HashSet<&Path> = load_report.problem_paths().collect();
    let usable: Vec<ImageRecord> = manifest
        .records
        .iter()
        .filter(|r| !flagged.contains(r.image_path.as_path()))
        .cloned()
        .collect();

    let (kept, dropped, failures) = match opts.dedup {
        Some(p) => {
            let out = dedup_by_perceptual_hash(&usable, p.hash_size, p.threshold)?;
            (out.kept, out.dropped, out.failures)
        }
        None => (usable, Vec::new(), Vec::new()),
    };
    let manifest = stratified_split(&manifest.with_records(kept), opts.ratios, opts.seed)?;
    Ok(Prepared {
        manifest,
        load_report,
        dropped,
        failures,
    })
}

impl DatasetManifest {
    /// Writes the manifest as pretty JSON, atomically.
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        std::fs::create_dir_all(dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        serde_json::to_writer_pretty(&mut tmp, self).map_err(std::io::Error::other)?;
        tmp.persist(path).map_err(|e| DatasetError::Io(e.error))?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let manifest: Self = serde_json::from_str(&text).map_err(|e| DatasetError::MalformedRow {
            line_no: e.line(),
            reason: format!("{}: {e}", path.display()),
        })?;
        manifest.check_invariants()?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Split;
    use image::{Rgb, RgbImage};

    #[test]
    fn drops_missing_and_duplicates_then_splits() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        std::fs::create_dir_all(root.join("images")).unwrap();
        let mut csv = String::new();
        for class in 0..2u32 {
            for i in 0..10u32 {
                let img = RgbImage::from_fn(16, 16, |x, y| {
                    let v = (x * (3 + i + class * 11) + y * (5 + 2 * i)) % 256;
                    Rgb([v as u8, (v * 7 % 256) as u8, (255 - v) as u8])
                });
                img.save(root.join(format!("images/{class}_{i}.png"))).unwrap();
                csv.push_str(&format!("images/{class}_{i}.png,{class},0,0,16,16,Make Model{class} 2012\n"));
            }
        }
        // an exact copy and a missing file
        std::fs::copy(root.join("images/0_0.png"), root.join("images/copy.png")).unwrap();
        csv.push_str("images/copy.png,0,0,0,16,16,Make Model0 2012\n");
        csv.push_str("images/gone.png,1,0,0,16,16,Make Model1 2012\n");
        std::fs::write(root.join("annotations.csv"), csv).unwrap();

        let opts = PrepareOptions {
            ratios: SplitRatios::new(0.6, 0.2, 0.2),
            dedup: Some(DedupParams { hash_size: 8, threshold: 0 }),
            seed: 1,
        };
        let p = prepare(root, &root.join("annotations.csv"), &opts).unwrap();
        assert_eq!(p.load_report.issues.len(), 1);
        assert_eq!(p.dropped.len(), 1);
        assert!(p.dropped[0].record.image_path.ends_with("copy.png"));
        assert_eq!(p.manifest.records.len(), 20);
        assert!(p.manifest.records.iter().all(|r| r.split.is_some()));
        assert_eq!(p.manifest.count(Split::Train), 12);

        let again = prepare(root, &root.join("annotations.csv"), &opts).unwrap();
        assert_eq!(again.manifest, p.manifest);

        let path = root.join("out/manifest.json");
        p.manifest.save_json(&path).unwrap();
        assert_eq!(DatasetManifest::load_json(&path).unwrap(), p.manifest);
    }
}
