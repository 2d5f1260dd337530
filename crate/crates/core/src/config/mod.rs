//! Hierarchical YAML configuration.
//!
//! `configs/defaults.yaml` lists one file per group (`data`, `model`,
//! `trainer`, ...). Files merge in list order with later keys winning, then
//! dotted `--set path=value` overrides apply, and the result must fit the
//! strict [`RunConfig`] schema.

mod compose;
mod node;
mod schema;

use std::path::PathBuf;

pub use compose::{
    compose, compose_root, load_group, load_run_config, resolve, split_primary, DefaultsEntry, Override,
    DEFAULTS_FILE, GROUPS,
};
pub use node::{parse_scalar, ConfigNode};
pub use schema::{
    DataConfig, DedupConfig, HpoConfig, LoggerConfig, ModelConfig, NetConfig, OptimizerConfig, OptimizerKind,
    RunConfig, SchedulerConfig, ServeConfig, TrainerConfig, Violation,
};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("missing config file for group {group}={name}: {path}")]
    MissingGroupFile { group: String, name: String, path: PathBuf },
    #[error("{}{}: {message}", file.display(), line.map(|l| format!(":{l}")).unwrap_or_default())]
    Parse {
        file: PathBuf,
        line: Option<usize>,
        message: String,
    },
    #[error("override path {0} does not exist in the config schema")]
    UnknownOverridePath(String),
    #[error("type mismatch at {path}: {message}")]
    TypeMismatch { path: String, message: String },
    #[error("config does not match the schema at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("invalid override: {0}")]
    InvalidOverride(String),
    #[error("invalid defaults list: {0}")]
    InvalidDefaults(String),
    #[error("environment variable {0} is not set")]
    MissingEnvVar(String),
    #[error("mapping keys must be strings (under {0})")]
    NonStringKey(String),
    #[error("expected a mapping, found {0}")]
    NotAMapping(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = ConfigError> = std::result::Result<T, E>;

impl RunConfig {
    /// Serializes to YAML (what `config.yaml` in a run directory holds).
    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("run config always serializes")
    }

    pub fn from_yaml(text: &str) -> Result<Self> {
        let node = ConfigNode::parse(text, std::path::Path::new("<config.yaml>"))?;
        resolve(&node)
    }

    /// Copy with search-space parameters applied; parameter names are
    /// config paths, so this is a set of dotted overrides.
    pub fn with_params(&self, params: &crate::hpo::Params) -> Result<Self> {
        let value = serde_yaml::to_value(self).expect("run config always serializes");
        let mut node = ConfigNode::from_value(value)?;
        for (path, v) in params {
            let v = serde_yaml::to_value(v).expect("parameter values always serialize");
            node.set(path, v)?;
        }
        resolve(&node).map_err(|e| match e {
            ConfigError::Schema { path, message } if message.starts_with("unknown field") => {
                ConfigError::UnknownOverridePath(path)
            }
            other => other,
        })
    }
}
