use std::path::{Path, PathBuf};

use serde_yaml::Value;

use super::node::parse_scalar;
use super::{ConfigError, ConfigNode, Result, RunConfig};

pub const DEFAULTS_FILE: &str = "defaults.yaml";

/// Group directories a defaults list may reference (nested groups such as
/// `model/optimizer` live below one of these).
pub const GROUPS: [&str; 7] = ["data", "model", "trainer", "augmentation", "hpo", "serve", "logger"];

/// One entry of a `defaults:` list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DefaultsEntry {
    /// `<group>: <name>` loads `<root>/<group>/<name>.yaml` and nests it under
    /// the group path (`/` in the group becomes `.`).
    Group { group: String, name: String },
    /// `_self_`: the primary file's own keys.
    SelfRef,
}

impl DefaultsEntry {
    pub fn group(group: &str, name: &str) -> Self {
        DefaultsEntry::Group {
            group: group.into(),
            name: name.into(),
        }
    }

    pub fn file(&self, root: &Path) -> Option<PathBuf> {
        match self {
            DefaultsEntry::Group { group, name } => Some(root.join(group).join(format!("{name}.yaml"))),
            DefaultsEntry::SelfRef => None,
        }
    }
}

/// A dotted `path=value` assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub path: String,
    pub value: Value,
}

impl Override {
    pub fn parse(raw: &str) -> Result<Self> {
        let (path, value) = raw
            .split_once('=')
            .ok_or_else(|| ConfigError::InvalidOverride(format!("expected path=value, got {raw:?}")))?;
        let path = path.trim();
        if path.is_empty() || path.split('.').any(|k| k.is_empty()) {
            return Err(ConfigError::InvalidOverride(format!("malformed path in {raw:?}")));
        }
        Ok(Self {
            path: path.to_owned(),
            value: parse_scalar(value),
        })
    }

    pub fn parse_all<S: AsRef<str>>(raw: &[S]) -> Result<Vec<Self>> {
        raw.iter().map(|r| Self::parse(r.as_ref())).collect()
    }
}

fn check_group(group: &str) -> Result<()> {
    let head = group.split('/').next().unwrap_or_default();
    if !GROUPS.contains(&head) || group.split('/').any(|p| p.is_empty() || p == "..") {
        return Err(ConfigError::InvalidDefaults(format!(
            "unknown config group {group:?}; expected one of {}",
            GROUPS.join(", ")
        )));
    }
    Ok(())
}

/// Splits a primary config into its defaults list and remaining keys.
/// Without an explicit `_self_` the primary keys are applied last.
pub fn split_primary(mut primary: ConfigNode, file: &Path) -> Result<(Vec<DefaultsEntry>, ConfigNode)> {
    let bad = |msg: String| ConfigError::InvalidDefaults(format!("{}: {msg}", file.display()));
    let mut entries = Vec::new();
    match primary.take("defaults") {
        None | Some(Value::Null) => {}
        Some(Value::Sequence(items)) => {
            for item in items {
                match item {
                    Value::String(s) if s == "_self_" => entries.push(DefaultsEntry::SelfRef),
                    Value::Mapping(m) if m.len() == 1 => {
                        let (k, v) = m.into_iter().next().unwrap();
                        let group = k.as_str().ok_or_else(|| bad("group names must be strings".into()))?.to_owned();
                        check_group(&group)?;
                        match v {
                            // `- logger: null` disables a group
                            Value::Null => {}
                            Value::String(name) => entries.push(DefaultsEntry::Group { group, name }),
                            _ => return Err(bad(format!("group {group} must name a file"))),
                        }
                    }
                    other => return Err(bad(format!("unsupported defaults entry {other:?}"))),
                }
            }
        }
        Some(_) => return Err(bad("`defaults` must be a list".into())),
    }
    if !entries.contains(&DefaultsEntry::SelfRef) {
        entries.push(DefaultsEntry::SelfRef);
    }
    Ok((entries, primary))
}

/// Loads and nests one group file.
pub fn load_group(root: &Path, group: &str, name: &str) -> Result<ConfigNode> {
    check_group(group)?;
    let entry = DefaultsEntry::group(group, name);
    let path = entry.file(root).unwrap();
    if !path.is_file() {
        return Err(ConfigError::MissingGroupFile {
            group: group.into(),
            name: name.into(),
            path,
        });
    }
    let node = ConfigNode::load(&path)?;
    if node.get("defaults").is_some() {
        return Err(ConfigError::InvalidDefaults(format!(
            "{}: nested defaults lists are not supported",
            path.display()
        )));
    }
    let key = group.replace('/', ".");
    Ok(node.nest_under(&key))
}

/// Merges the defaults list in order (later wins), then applies overrides.
///
/// An override whose path is a group named in `defaults` and whose value is
/// a string selects that group's file instead (`model=resnet50`). All other
/// overrides must land on a field of [`RunConfig`]; see [`resolve`].
pub fn compose(
    root: &Path,
    primary: &ConfigNode,
    defaults: &[DefaultsEntry],
    overrides: &[Override],
) -> Result<ConfigNode> {
    let mut defaults = defaults.to_vec();
    let mut value_overrides = Vec::new();
    for o in overrides {
        let selected = defaults.iter_mut().find_map(|d| match d {
            DefaultsEntry::Group { group, name } if *group == o.path => Some(name),
            _ => None,
        });
        match (selected, &o.value) {
            (Some(name), Value::String(choice)) => *name = choice.clone(),
            (Some(_), Value::Null) => defaults.retain(|d| !matches!(d, DefaultsEntry::Group { group, .. } if *group == o.path)),
            _ => value_overrides.push(o.clone()),
        }
    }

    let mut node = ConfigNode::empty();
    for entry in &defaults {
        match entry {
            DefaultsEntry::SelfRef => node.merge(primary),
            DefaultsEntry::Group { group, name } => node.merge(&load_group(root, group, name)?),
        }
    }
    node.finalize();
    for o in &value_overrides {
        node.set(&o.path, o.value.clone())?;
    }
    node.substitute_env(&|k| std::env::var(k).ok())?;
    // schema check so unknown paths surface here rather than at first use
    resolve_with(&node, &value_overrides)?;
    Ok(node)
}

/// Reads `<root>/defaults.yaml` and composes it with `overrides`.
pub fn compose_root(root: &Path, overrides: &[Override]) -> Result<ConfigNode> {
    let file = root.join(DEFAULTS_FILE);
    let primary = if file.is_file() {
        ConfigNode::load(&file)?
    } else {
        return Err(ConfigError::Io {
            path: file,
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "primary config not found"),
        });
    };
    let (defaults, body) = split_primary(primary, &file)?;
    compose(root, &body, &defaults, overrides)
}

/// Deserializes a composed node into the strict schema.
pub fn resolve(node: &ConfigNode) -> Result<RunConfig> {
    resolve_with(node, &[])
}

fn resolve_with(node: &ConfigNode, overrides: &[Override]) -> Result<RunConfig> {
    let de = node.as_value().clone();
    serde_path_to_error::deserialize::<_, RunConfig>(de).map_err(|e| {
        let path = e.path().to_string();
        let message = e.inner().to_string();
        let related = |o: &&Override| {
            o.path == path || o.path.starts_with(&format!("{path}.")) || path.starts_with(&format!("{}.", o.path))
        };
        match overrides.iter().find(related) {
            Some(o) if message.starts_with("unknown field") => ConfigError::UnknownOverridePath(o.path.clone()),
            Some(_) => ConfigError::TypeMismatch { path, message },
            None => ConfigError::Schema { path, message },
        }
    })
}

/// Composes from a config root and returns the typed config.
pub fn load_run_config<S: AsRef<str>>(root: &Path, overrides: &[S]) -> Result<(ConfigNode, RunConfig)> {
    let node = compose_root(root, &Override::parse_all(overrides)?)?;
    let cfg = resolve(&node)?;
    Ok((node, cfg))
}
