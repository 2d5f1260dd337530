use std::fmt;
use std::path::Path;

use serde_yaml::value::{Tag, TaggedValue};
use serde_yaml::{Mapping, Value};

use super::{ConfigError, Result};

/// A composed configuration tree: string keys mapping to scalars, lists or
/// nested nodes. Key order is preserved.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigNode(Value);

impl Default for ConfigNode {
    fn default() -> Self {
        Self::empty()
    }
}

impl ConfigNode {
    pub fn empty() -> Self {
        Self(Value::Mapping(Mapping::new()))
    }

    pub fn from_value(value: Value) -> Result<Self> {
        check_keys(&value, "")?;
        match value {
            Value::Mapping(_) => Ok(Self(value)),
            Value::Null => Ok(Self::empty()),
            other => Err(ConfigError::NotAMapping(describe(&other).into())),
        }
    }

    /// Parses YAML text; `file` only labels errors.
    pub fn parse(text: &str, file: &Path) -> Result<Self> {
        let value: Value = serde_yaml::from_str(text).map_err(|e| ConfigError::Parse {
            file: file.to_owned(),
            line: e.location().map(|l| l.line()),
            message: e.to_string(),
        })?;
        Self::from_value(value).map_err(|e| match e {
            ConfigError::NotAMapping(kind) => ConfigError::Parse {
                file: file.to_owned(),
                line: None,
                message: format!("expected a mapping at the top level, found {kind}"),
            },
            other => other,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_owned(),
            source: e,
        })?;
        Self::parse(&text, path)
    }

    pub fn as_value(&self) -> &Value {
        &self.0
    }

    pub fn into_value(self) -> Value {
        self.0
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(&self.0).expect("config trees always serialize")
    }

    pub fn get(&self, path: &str) -> Option<&Value> {
        let mut cur = &self.0;
        for key in path.split('.') {
            cur = cur.as_mapping()?.get(key)?;
        }
        Some(cur)
    }

    /// Removes and returns a top-level key.
    pub fn take(&mut self, key: &str) -> Option<Value> {
        self.0.as_mapping_mut().and_then(|m| m.remove(key))
    }

    /// Sets `path`, creating intermediate maps. Fails when a prefix of the
    /// path holds a non-map value.
    pub fn set(&mut self, path: &str, value: Value) -> Result<()> {
        let keys: Vec<&str> = path.split('.').collect();
        if keys.iter().any(|k| k.is_empty()) {
            return Err(ConfigError::InvalidOverride(format!("malformed path {path:?}")));
        }
        let mut cur = &mut self.0;
        for (i, key) in keys.iter().enumerate() {
            let map = match cur {
                Value::Mapping(m) => m,
                Value::Null => {
                    *cur = Value::Mapping(Mapping::new());
                    cur.as_mapping_mut().unwrap()
                }
                _ => return Err(ConfigError::UnknownOverridePath(path.to_owned())),
            };
            let k = Value::String((*key).to_owned());
            if i + 1 == keys.len() {
                map.insert(k, value);
                return Ok(());
            }
            cur = map.entry(k).or_insert(Value::Null);
        }
        unreachable!("path has at least one key")
    }

    /// Deep merge where `other` wins: maps merge key by key, anything else
    /// (scalars, lists, null) replaces. A map landing on a non-map, or one
    /// tagged `!replace`, replaces the whole subtree.
    pub fn merge(&mut self, other: &ConfigNode) {
        merge_value(&mut self.0, &other.0);
    }

    pub fn merged(mut self, other: &ConfigNode) -> Self {
        self.merge(other);
        self
    }

    /// Drops the `!replace` markers merging leaves behind; composition calls
    /// this before applying overrides.
    pub fn finalize(&mut self) {
        strip_replace(&mut self.0);
    }

    /// Places this node under a dotted group path, e.g. `model.optimizer`.
    pub fn nest_under(self, group: &str) -> Self {
        let mut root = ConfigNode::empty();
        root.set(group, self.0).expect("fresh tree accepts any path");
        root
    }

    /// Replaces `${env:NAME}` references in string scalars. A scalar that is
    /// exactly one reference is re-typed like a command-line value.
    pub fn substitute_env(&mut self, lookup: &dyn Fn(&str) -> Option<String>) -> Result<()> {
        substitute(&mut self.0, lookup)
    }
}

impl fmt::Display for ConfigNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_yaml())
    }
}

fn describe(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Sequence(_) => "a list",
        Value::Mapping(_) => "a mapping",
        Value::Tagged(_) => "a tagged value",
    }
}

fn check_keys(v: &Value, at: &str) -> Result<()> {
    match v {
        Value::Mapping(m) => {
            for (k, child) in m {
                let Value::String(key) = k else {
                    return Err(ConfigError::NonStringKey(if at.is_empty() { "<root>".into() } else { at.into() }));
                };
                let path = if at.is_empty() { key.clone() } else { format!("{at}.{key}") };
                check_keys(child, &path)?;
            }
            Ok(())
        }
        Value::Sequence(items) => items.iter().try_for_each(|i| check_keys(i, at)),
        _ => Ok(()),
    }
}

const REPLACE_TAG: &str = "!replace";

fn is_replace(tag: &Tag) -> bool {
    *tag == Tag::new(REPLACE_TAG)
}

/// A map that must replace, not merge into, whatever sits below it. Produced
/// when a map lands on a non-map value (so the merge stays associative) or
/// written explicitly as `!replace {...}`.
fn replacing(map: Mapping) -> Value {
    Value::Tagged(Box::new(TaggedValue {
        tag: Tag::new(REPLACE_TAG),
        value: Value::Mapping(map),
    }))
}

fn merge_value(base: &mut Value, other: &Value) {
    match (&mut *base, other) {
        (Value::Mapping(b), Value::Mapping(o)) => merge_maps(b, o),
        (Value::Tagged(t), Value::Mapping(o)) if is_replace(&t.tag) => match &mut t.value {
            Value::Mapping(b) => merge_maps(b, o),
            _ => *base = replacing(o.clone()),
        },
        (_, Value::Mapping(o)) => *base = replacing(o.clone()),
        (b, o) => *b = o.clone(),
    }
}

fn merge_maps(b: &mut Mapping, o: &Mapping) {
    for (k, v) in o {
        match b.get_mut(k) {
            Some(existing) => merge_value(existing, v),
            None => {
                b.insert(k.clone(), v.clone());
            }
        }
    }
}

fn strip_replace(v: &mut Value) {
    if let Value::Tagged(t) = v {
        if is_replace(&t.tag) {
            *v = std::mem::replace(&mut t.value, Value::Null);
        }
    }
    match v {
        Value::Mapping(m) => m.iter_mut().for_each(|(_, c)| strip_replace(c)),
        Value::Sequence(items) => items.iter_mut().for_each(strip_replace),
        _ => {}
    }
}

/// Types a command-line value: integer, then float, then boolean, then
/// `null`, else string. Single or double quotes force a string; `[a, b]` and
/// `{k: v}` are YAML flow collections.
pub fn parse_scalar(raw: &str) -> Value {
    let t = raw.trim();
    for q in ['\'', '"'] {
        if t.len() >= 2 && t.starts_with(q) && t.ends_with(q) {
            return Value::String(t[1..t.len() - 1].to_owned());
        }
    }
    let flow = (t.starts_with('[') && t.ends_with(']')) || (t.starts_with('{') && t.ends_with('}'));
    if flow {
        if let Ok(v @ (Value::Sequence(_) | Value::Mapping(_))) = serde_yaml::from_str::<Value>(t) {
            return v;
        }
    }
    if let Ok(i) = t.parse::<i64>() {
        return Value::Number(i.into());
    }
    if let Ok(u) = t.parse::<u64>() {
        return Value::Number(u.into());
    }
    if let Ok(f) = t.parse::<f64>() {
        if f.is_finite() {
            return Value::Number(f.into());
        }
    }
    match t {
        "true" | "True" => return Value::Bool(true),
        "false" | "False" => return Value::Bool(false),
        "null" | "~" => return Value::Null,
        _ => {}
    }
    Value::String(t.to_owned())
}

const ENV_OPEN: &str = "${env:";

fn substitute(v: &mut Value, lookup: &dyn Fn(&str) -> Option<String>) -> Result<()> {
    match v {
        Value::String(s) if s.contains(ENV_OPEN) => {
            let whole = s.starts_with(ENV_OPEN) && s.ends_with('}') && s.matches(ENV_OPEN).count() == 1;
            let mut out = String::new();
            let mut rest = s.as_str();
            while let Some(start) = rest.find(ENV_OPEN) {
                out.push_str(&rest[..start]);
                let after = &rest[start + ENV_OPEN.len()..];
                let end = after
                    .find('}')
                    .ok_or_else(|| ConfigError::InvalidOverride(format!("unterminated env reference in {s:?}")))?;
                let name = &after[..end];
                out.push_str(&lookup(name).ok_or_else(|| ConfigError::MissingEnvVar(name.to_owned()))?);
                rest = &after[end + 1..];
            }
            out.push_str(rest);
            *v = if whole { parse_scalar(&out) } else { Value::String(out) };
            Ok(())
        }
        Value::Mapping(m) => m.iter_mut().try_for_each(|(_, c)| substitute(c, lookup)),
        Value::Sequence(items) => items.iter_mut().try_for_each(|c| substitute(c, lookup)),
        _ => Ok(()),
    }
}
