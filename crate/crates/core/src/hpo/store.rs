use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use super::study::Study;
use super::{HpoError, Result};

/// A study persisted as one JSON file.
///
/// Writes go to a sibling temp file that is synced and renamed over the
/// target, so readers only ever see a complete study. Mutations hold an
/// exclusive advisory lock on `<file>.lock`.
#[derive(Debug, Clone)]
pub struct StudyStore {
    path: PathBuf,
}

pub struct StoreLock {
    _file: File,
}

impl StudyStore {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn lock_path(&self) -> PathBuf {
        let mut name = self.path.file_name().unwrap_or_default().to_os_string();
        name.push(".lock");
        self.path.with_file_name(name)
    }

    fn temp_path(&self) -> PathBuf {
        let mut name = self.path.file_name().unwrap_or_default().to_os_string();
        name.push(format!(".tmp-{}", std::process::id()));
        self.path.with_file_name(name)
    }

    pub fn exists(&self) -> bool {
        self.path.is_file()
    }

    /// Blocks until the store's writer lock is held.
    pub fn lock(&self) -> Result<StoreLock> {
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(HpoError::storage)?;
        }
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(self.lock_path())
            .map_err(HpoError::storage)?;
        file.lock().map_err(HpoError::storage)?;
        Ok(StoreLock { _file: file })
    }

    pub fn load(&self) -> Result<Study> {
        let bytes = fs::read(&self.path).map_err(HpoError::storage)?;
        let study: Study = serde_json::from_slice(&bytes).map_err(|e| HpoError::CorruptStudy(e.to_string()))?;
        study.space.validate()?;
        Ok(study)
    }

    pub fn save(&self, study: &Study) -> Result<()> {
        let tmp = self.temp_path();
        let body = serde_json::to_vec_pretty(study).map_err(|e| HpoError::CorruptStudy(e.to_string()))?;
        {
            let mut f = File::create(&tmp).map_err(HpoError::storage)?;
            f.write_all(&body).map_err(HpoError::storage)?;
            f.write_all(b"\n").map_err(HpoError::storage)?;
            f.sync_all().map_err(HpoError::storage)?;
        }
        fs::rename(&tmp, &self.path).map_err(HpoError::storage)?;
        Ok(())
    }

    /// Load, mutate and save under the writer lock.
    pub fn update<T>(&self, f: impl FnOnce(&mut Study) -> Result<T>) -> Result<T> {
        let _guard = self.lock()?;
        let mut study = self.load()?;
        let out = f(&mut study)?;
        self.save(&study)?;
        Ok(out)
    }

    /// Records an objective and persists the study atomically.
    pub fn tell(&self, trial_id: u64, objective: f64) -> Result<Study> {
        self.update(|s| {
            s.tell(trial_id, objective)?;
            Ok(s.clone())
        })
    }
}
