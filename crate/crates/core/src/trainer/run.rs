use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{EpochMetrics, Result};

pub const CONFIG_FILE: &str = "config.yaml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// `runs/<name>/` with the resolved config, per-epoch metrics and the best
/// checkpoint.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
    metrics_file: String,
}

impl RunDir {
    /// Creates `<runs_dir>/<name>` (and parents) if needed.
    pub fn create(runs_dir: &Path, name: &str) -> Result<Self> {
        Self::at(runs_dir.join(name))
    }

    pub fn at(root: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            metrics_file: METRICS_FILE.into(),
        })
    }

    pub fn with_metrics_file(mut self, name: &str) -> Self {
        self.metrics_file = name.into();
        self
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join(CONFIG_FILE)
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join(&self.metrics_file)
    }

    pub fn best_checkpoint(&self) -> PathBuf {
        self.root.join(BEST_CHECKPOINT)
    }

    pub fn write_config(&self, yaml: &str) -> Result<()> {
        std::fs::write(self.config_path(), yaml)?;
        Ok(())
    }

    /// Truncates the metrics file; a re-run starts a fresh history.
    pub fn reset_metrics(&self) -> Result<()> {
        File::create(self.metrics_path())?;
        Ok(())
    }

    pub fn append_metrics(&self, m: &EpochMetrics) -> Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(self.metrics_path())?;
        let line = serde_json::to_string(m).expect("metrics serialize");
        writeln!(f, "{line}")?;
        Ok(())
    }

    pub fn read_metrics(&self) -> Result<Vec<EpochMetrics>> {
        let text = std::fs::read_to_string(self.metrics_path())?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l)
                    .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e).into())
            })
            .collect()
    }
}
