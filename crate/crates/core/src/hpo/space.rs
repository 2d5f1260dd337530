use serde::{Deserialize, Serialize};

use super::{HpoError, Result};

/// A parameter value as stored in trials and study files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Float(f64),
    Str(String),
}

impl ParamValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            ParamValue::Int(i) => Some(*i as f64),
            ParamValue::Float(f) => Some(*f),
            ParamValue::Str(_) => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            ParamValue::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            ParamValue::Int(i) => Some(*i),
            _ => None,
        }
    }
}

impl std::fmt::Display for ParamValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParamValue::Int(i) => write!(f, "{i}"),
            ParamValue::Float(v) => write!(f, "{v}"),
            ParamValue::Str(s) => f.write_str(s),
        }
    }
}

impl From<&str> for ParamValue {
    fn from(s: &str) -> Self {
        ParamValue::Str(s.to_owned())
    }
}

impl From<i64> for ParamValue {
    fn from(i: i64) -> Self {
        ParamValue::Int(i)
    }
}

impl From<f64> for ParamValue {
    fn from(v: f64) -> Self {
        ParamValue::Float(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Domain {
    Categorical { choices: Vec<ParamValue> },
    FloatUniform { low: f64, high: f64 },
    FloatLogUniform { low: f64, high: f64 },
    IntUniform { low: i64, high: i64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    #[serde(flatten)]
    pub domain: Domain,
}

impl ParamSpec {
    pub fn categorical(name: &str, choices: impl IntoIterator<Item = ParamValue>) -> Self {
        Self {
            name: name.to_owned(),
            domain: Domain::Categorical {
                choices: choices.into_iter().collect(),
            },
        }
    }

    pub fn float(name: &str, low: f64, high: f64) -> Self {
        Self {
            name: name.to_owned(),
            domain: Domain::FloatUniform { low, high },
        }
    }

    pub fn log_float(name: &str, low: f64, high: f64) -> Self {
        Self {
            name: name.to_owned(),
            domain: Domain::FloatLogUniform { low, high },
        }
    }

    pub fn int(name: &str, low: i64, high: i64) -> Self {
        Self {
            name: name.to_owned(),
            domain: Domain::IntUniform { low, high },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(HpoError::InvalidSpace(format!("{}: {reason}", self.name)));
        match &self.domain {
            Domain::Categorical { choices } if choices.is_empty() => bad("no categories".into()),
            Domain::Categorical { choices } => {
                for (i, c) in choices.iter().enumerate() {
                    if choices[..i].contains(c) {
                        return bad(format!("duplicate category {c}"));
                    }
                }
                Ok(())
            }
            Domain::FloatUniform { low, high } if !(low.is_finite() && high.is_finite() && low < high) => {
                bad(format!("need low < high, got ({low}, {high})"))
            }
            Domain::FloatLogUniform { low, high }
                if !(low.is_finite() && high.is_finite() && *low > 0.0 && low < high) =>
            {
                bad(format!("need 0 < low < high, got ({low}, {high})"))
            }
            Domain::IntUniform { low, high } if low >= high => bad(format!("need low < high, got ({low}, {high})")),
            _ => Ok(()),
        }
    }

    /// Whether `value` lies in the domain (categorical membership or the
    /// closed numeric interval).
    pub fn contains(&self, value: &ParamValue) -> bool {
        match (&self.domain, value) {
            (Domain::Categorical { choices }, v) => choices.contains(v),
            (Domain::FloatUniform { low, high }, ParamValue::Float(v)) => v.is_finite() && low <= v && v <= high,
            (Domain::FloatLogUniform { low, high }, ParamValue::Float(v)) => {
                v.is_finite() && *v > 0.0 && low <= v && v <= high
            }
            (Domain::IntUniform { low, high }, ParamValue::Int(v)) => low <= v && v <= high,
            _ => false,
        }
    }

    /// Human-readable constraint, used in validation messages.
    pub fn describe(&self) -> String {
        match &self.domain {
            Domain::Categorical { choices } => {
                let c: Vec<String> = choices.iter().map(|c| c.to_string()).collect();
                format!("one of {{{}}}", c.join(", "))
            }
            Domain::FloatUniform { low, high } => format!("float in [{low}, {high}]"),
            Domain::FloatLogUniform { low, high } => format!("log-uniform float in [{low}, {high}]"),
            Domain::IntUniform { low, high } => format!("integer in [{low}, {high}]"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SearchSpace {
    pub params: Vec<ParamSpec>,
}

impl SearchSpace {
    pub fn new(params: Vec<ParamSpec>) -> Result<Self> {
        let space = Self { params };
        space.validate()?;
        Ok(space)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.params.iter().enumerate() {
            p.validate()?;
            if self.params[..i].iter().any(|q| q.name == p.name) {
                return Err(HpoError::InvalidSpace(format!("duplicate parameter {}", p.name)));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamSpec> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

/// Parameter names of the fine-tuning search space, as config paths.
pub mod names {
    pub const OPTIMIZER: &str = "model.optimizer.target";
    pub const DROPOUT: &str = "model.net.dropout_value";
    pub const BATCH_SIZE: &str = "data.batch_size";
    pub const PATIENCE: &str = "model.scheduler.patience";
    pub const FACTOR: &str = "model.scheduler.factor";
    pub const WEIGHT_DECAY: &str = "model.optimizer.weight_decay";
    pub const LR: &str = "model.optimizer.lr";
}

/// The seven-parameter fine-tuning search space.
pub fn define_space() -> SearchSpace {
    SearchSpace {
        params: vec![
            ParamSpec::categorical(names::OPTIMIZER, ["adam".into(), "sgd".into()]),
            ParamSpec::float(names::DROPOUT, 0.3, 0.6),
            ParamSpec::categorical(names::BATCH_SIZE, [32.into(), 64.into(), 128.into()]),
            ParamSpec::int(names::PATIENCE, 5, 10),
            ParamSpec::float(names::FACTOR, 0.1, 0.5),
            ParamSpec::log_float(names::WEIGHT_DECAY, 1e-5, 1e-3),
            ParamSpec::log_float(names::LR, 1e-4, 1e-2),
        ],
    }
}
