use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::augment::{build_policy, AugmentationSection};
use crate::backbones;
use crate::dataset::{SplitRatios, DEFAULT_DEDUP_THRESHOLD, DEFAULT_HASH_SIZE};
use crate::hpo::{define_space, names, ParamValue, TpeConfig};

/// Fully resolved run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Run name; the run directory is `<runs>/<name>`.
    pub name: String,
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub trainer: TrainerConfig,
    pub augmentation: AugmentationSection,
    pub hpo: HpoConfig,
    pub serve: ServeConfig,
    pub logger: LoggerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "efficientnetv2_b2".into(),
            seed: 42,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            trainer: TrainerConfig::default(),
            augmentation: AugmentationSection::default(),
            hpo: HpoConfig::default(),
            serve: ServeConfig::default(),
            logger: LoggerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root holding `images/` and the annotation file.
    pub root: PathBuf,
    pub annotation_file: String,
    /// Prepared manifest (output of `prepare-data`); when unset the run
    /// prepares the dataset in memory.
    pub manifest: Option<PathBuf>,
    pub split: SplitRatios,
    pub crop_to_bbox: bool,
    pub dedup: DedupConfig,
    pub batch_size: usize,
    /// Parallel decode/augment workers; results do not depend on it.
    pub num_workers: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data/stanford_cars"),
            annotation_file: "annotations.csv".into(),
            manifest: None,
            split: SplitRatios::default(),
            crop_to_bbox: true,
            dedup: DedupConfig::default(),
            batch_size: 32,
            num_workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DedupConfig {
    pub enabled: bool,
    pub threshold: u32,
    pub hash_size: u32,
}

impl Default for DedupConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            threshold: DEFAULT_DEDUP_THRESHOLD,
            hash_size: DEFAULT_HASH_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub net: NetConfig,
    pub optimizer: OptimizerConfig,
    pub scheduler: SchedulerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub backbone: String,
    pub pretrained: bool,
    /// Safetensors file with upstream-named backbone weights.
    pub weights: Option<PathBuf>,
    pub unfreeze_last_block: bool,
    pub dropout_value: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            backbone: "efficientnetv2_b2".into(),
            pretrained: true,
            weights: None,
            unfreeze_last_block: true,
            dropout_value: 0.366,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[serde(alias = "torch.optim.Adam")]
    Adam,
    #[serde(alias = "torch.optim.SGD")]
    Sgd,
}

impl OptimizerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub target: OptimizerKind,
    pub lr: f64,
    /// L2 penalty added to the gradient.
    pub weight_decay: f64,
    /// SGD only.
    pub momentum: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            target: OptimizerKind::Adam,
            lr: 0.00157,
            weight_decay: 0.000216,
            momentum: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    pub patience: u32,
    pub factor: f64,
    pub monitor: String,
    /// Minimum absolute gain that counts as an improvement.
    pub threshold: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            patience: 5,
            factor: 0.1,
            monitor: "val_accuracy".into(),
            threshold: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub epochs: usize,
    /// Root directory for run directories.
    pub runs_dir: PathBuf,
    /// Precompute pooled features once when the backbone is fully frozen and
    /// no stochastic transform can fire.
    pub cache_features: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            runs_dir: PathBuf::from("runs"),
            cache_features: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HpoConfig {
    /// Marks a tuning config: the search-space bounds become constraints.
    pub enabled: bool,
    pub n_trials: usize,
    /// Epoch budget per trial.
    pub epochs: usize,
    /// Study file; defaults to `<runs>/<name>/study.json`.
    pub study_file: Option<PathBuf>,
    pub sampler: TpeConfig,
}

impl Default for HpoConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            n_trials: 30,
            epochs: 10,
            study_file: None,
            sampler: TpeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
    pub max_upload_mb: u64,
    pub default_top_k: usize,
    pub cors_origins: Vec<String>,
    /// Log request metadata (never image bytes) as JSON lines.
    pub access_log: bool,
    /// Optional JSON-lines audit of predictions (image checksum and top-1,
    /// never the image itself).
    pub audit_log: Option<PathBuf>,
    /// Checkpoint to serve; `--checkpoint` overrides it.
    pub checkpoint: Option<PathBuf>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8000,
            max_upload_mb: 10,
            default_top_k: 5,
            cors_origins: vec!["*".into()],
            access_log: true,
            audit_log: None,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoggerConfig {
    pub level: String,
    pub metrics_file: String,
}

impl Default for LoggerConfig {
    fn default() -> Self {
        Self {
            level: "info".into(),
            metrics_file: "metrics.jsonl".into(),
        }
    }
}

/// One failed constraint.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub path: String,
    pub value: String,
    pub constraint: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} = {}: {}", self.path, self.value, self.constraint)
    }
}

struct Checker(Vec<Violation>);

impl Checker {
    fn check(&mut self, ok: bool, path: &str, value: impl fmt::Display, constraint: &str) {
        if !ok {
            self.0.push(Violation {
                path: path.into(),
                value: value.to_string(),
                constraint: constraint.into(),
            });
        }
    }
}

impl RunConfig {
    /// Value of a search-space parameter in this config.
    pub fn param(&self, name: &str) -> Option<ParamValue> {
        Some(match name {
            names::OPTIMIZER => ParamValue::from(self.model.optimizer.target.as_str()),
            names::DROPOUT => self.model.net.dropout_value.into(),
            names::BATCH_SIZE => (self.data.batch_size as i64).into(),
            names::PATIENCE => (self.model.scheduler.patience as i64).into(),
            names::FACTOR => self.model.scheduler.factor.into(),
            names::WEIGHT_DECAY => self.model.optimizer.weight_decay.into(),
            names::LR => self.model.optimizer.lr.into(),
            _ => return None,
        })
    }

    /// Every range violation; empty means the config is usable.
    pub fn validate(&self) -> Vec<Violation> {
        let mut c = Checker(Vec::new());
        c.check(
            !self.name.is_empty() && !self.name.contains(['/', '\\']) && self.name != "." && self.name != "..",
            "name",
            format!("{:?}", self.name),
            "non-empty and usable as a directory name",
        );

        let d = &self.data;
        if let Err(e) = d.split.validate() {
            c.check(false, "data.split", format!("{:?}", d.split), &e.to_string());
        }
        c.check(d.batch_size > 0, "data.batch_size", d.batch_size, "positive integer");
        c.check(d.num_workers > 0, "data.num_workers", d.num_workers, "positive integer");
        c.check(
            (2..=64).contains(&d.dedup.hash_size),
            "data.dedup.hash_size",
            d.dedup.hash_size,
            "integer in [2, 64]",
        );
        let bits = d.dedup.hash_size * d.dedup.hash_size;
        c.check(
            d.dedup.threshold <= bits,
            "data.dedup.threshold",
            d.dedup.threshold,
            "at most hash_size^2 bits",
        );

        let net = &self.model.net;
        c.check(
            backbones::lookup(&net.backbone).is_some(),
            "model.net.backbone",
            &net.backbone,
            &format!("one of {}", backbones::names().collect::<Vec<_>>().join(", ")),
        );
        c.check(
            (0.0..1.0).contains(&net.dropout_value),
            "model.net.dropout_value",
            net.dropout_value,
            "float in [0, 1)",
        );
        let o = &self.model.optimizer;
        c.check(o.lr.is_finite() && o.lr > 0.0, "model.optimizer.lr", o.lr, "positive float");
        c.check(
            o.weight_decay.is_finite() && o.weight_decay >= 0.0,
            "model.optimizer.weight_decay",
            o.weight_decay,
            "non-negative float",
        );
        c.check(
            (0.0..1.0).contains(&o.momentum),
            "model.optimizer.momentum",
            o.momentum,
            "float in [0, 1)",
        );
        let s = &self.model.scheduler;
        c.check(s.patience >= 1, "model.scheduler.patience", s.patience, "integer >= 1");
        c.check(
            s.factor > 0.0 && s.factor < 1.0,
            "model.scheduler.factor",
            s.factor,
            "float in (0, 1)",
        );
        c.check(
            s.monitor == "val_accuracy",
            "model.scheduler.monitor",
            &s.monitor,
            "only val_accuracy is supported",
        );
        c.check(
            s.threshold.is_finite() && s.threshold >= 0.0,
            "model.scheduler.threshold",
            s.threshold,
            "non-negative float",
        );

        c.check(self.trainer.epochs > 0, "trainer.epochs", self.trainer.epochs, "positive integer");
        if let Err(e) = build_policy(&self.augmentation) {
            c.check(false, "augmentation", "section", &e.to_string());
        }

        let h = &self.hpo;
        c.check(h.n_trials >= 1, "hpo.n_trials", h.n_trials, "integer >= 1");
        c.check(h.epochs >= 1, "hpo.epochs", h.epochs, "integer >= 1");
        if let Err(e) = h.sampler.validate() {
            c.check(false, "hpo.sampler", "section", &e.to_string());
        }
        if h.enabled {
            for spec in define_space().params {
                if let Some(v) = self.param(&spec.name) {
                    c.check(spec.contains(&v), &spec.name, &v, &spec.describe());
                }
            }
        }

        let sv = &self.serve;
        c.check(sv.max_upload_mb > 0, "serve.max_upload_mb", sv.max_upload_mb, "positive integer");
        c.check(sv.default_top_k >= 1, "serve.default_top_k", sv.default_top_k, "integer >= 1");
        c.check(
            ["error", "warn", "info", "debug", "trace"].contains(&self.logger.level.as_str()),
            "logger.level",
            &self.logger.level,
            "one of error, warn, info, debug, trace",
        );
        c.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        assert_eq!(RunConfig::default().validate(), vec![]);
        let mut tuning = RunConfig::default();
        tuning.hpo.enabled = true;
        assert_eq!(tuning.validate(), vec![]);
    }

    #[test]
    fn dropout_outside_search_space() {
        let mut cfg = RunConfig::default();
        cfg.hpo.enabled = true;
        cfg.model.net.dropout_value = 0.7;
        let v = cfg.validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].path, "model.net.dropout_value");
        assert_eq!(v[0].value, "0.7");
        assert!(v[0].constraint.contains("[0.3, 0.6]"));
        // outside tuning only the hard [0, 1) bound applies
        cfg.hpo.enabled = false;
        assert!(cfg.validate().is_empty());
    }

    #[test]
    fn batch_size_and_lr() {
        let mut cfg = RunConfig::default();
        cfg.hpo.enabled = true;
        cfg.data.batch_size = 64;
        assert!(cfg.validate().is_empty());
        cfg.model.optimizer.lr = -0.01;
        let v = cfg.validate();
        assert!(v.iter().any(|v| v.path == "model.optimizer.lr" && v.constraint == "positive float"));
    }

    #[test]
    fn unknown_backbone_and_bad_scheduler() {
        let mut cfg = RunConfig::default();
        cfg.model.net.backbone = "vgg16".into();
        cfg.model.scheduler.factor = 1.0;
        let paths: Vec<_> = cfg.validate().into_iter().map(|v| v.path).collect();
        assert_eq!(paths, vec!["model.net.backbone", "model.scheduler.factor"]);
    }
}
