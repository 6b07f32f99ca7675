//! Hyperparameter search spaces: declaration, sampling, and the `[0, 1]`
//! feature encoding consumed by every surrogate.

use std::collections::HashSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::rng::Rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpaceError {
    #[error("invalid JSON: {0}")]
    Json(String),
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
    #[error("{path}: duplicate parameter name `{name}`")]
    DuplicateName { path: String, name: String },
    #[error("{path}: parameter `{name}` has invalid bounds: {message}")]
    InvalidBounds {
        path: String,
        name: String,
        message: String,
    },
    #[error("{path}: parameter `{name}` uses log10 scale but low = {low} is not positive")]
    LogScaleNonPositive { path: String, name: String, low: f64 },
    #[error("{path}: categorical parameter `{name}` {message}")]
    InvalidChoices {
        path: String,
        name: String,
        message: String,
    },
    #[error("configuration has {got} values but the space has {expected} parameters")]
    Arity { expected: usize, got: usize },
    #[error("parameter `{name}`: value {value} is outside its domain")]
    OutOfBounds { name: String, value: String },
    #[error("parameter `{name}`: expected a {expected} value")]
    KindMismatch { name: String, expected: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Linear,
    Log10,
}

impl Scale {
    fn forward(self, v: f64) -> f64 {
        match self {
            Scale::Linear => v,
            Scale::Log10 => v.log10(),
        }
    }

    fn inverse(self, v: f64) -> f64 {
        match self {
            Scale::Linear => v,
            Scale::Log10 => 10f64.powf(v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ParamKind {
    Continuous { low: f64, high: f64, scale: Scale },
    Integer { low: i64, high: i64, scale: Scale },
    Categorical { choices: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ParamValue {
    Real(f64),
    Int(i64),
    Choice(usize),
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Real(v) => write!(f, "{v}"),
            ParamValue::Int(v) => write!(f, "{v}"),
            ParamValue::Choice(i) => write!(f, "{i}"),
        }
    }
}

/// One assignment of a value to every parameter, in canonical order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Configuration {
    pub values: Vec<ParamValue>,
}

impl Configuration {
    pub fn new(values: Vec<ParamValue>) -> Self {
        Self { values }
    }
}

/// Normalized numeric representation of a configuration.
pub type FeatureVector = Vec<f64>;

fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

impl ParamSpec {
    pub fn continuous(name: &str, low: f64, high: f64, scale: Scale) -> Result<Self, SpaceError> {
        let spec = Self {
            name: name.to_string(),
            kind: ParamKind::Continuous { low, high, scale },
        };
        spec.validate("$")?;
        Ok(spec)
    }

    pub fn integer(name: &str, low: i64, high: i64, scale: Scale) -> Result<Self, SpaceError> {
        let spec = Self {
            name: name.to_string(),
            kind: ParamKind::Integer { low, high, scale },
        };
        spec.validate("$")?;
        Ok(spec)
    }

    pub fn categorical<S: AsRef<str>>(name: &str, choices: &[S]) -> Result<Self, SpaceError> {
        let spec = Self {
            name: name.to_string(),
            kind: ParamKind::Categorical {
                choices: choices.iter().map(|c| c.as_ref().to_string()).collect(),
            },
        };
        spec.validate("$")?;
        Ok(spec)
    }

    fn validate(&self, path: &str) -> Result<(), SpaceError> {
        let bounds = |message: String| SpaceError::InvalidBounds {
            path: path.to_string(),
            name: self.name.clone(),
            message,
        };
        match &self.kind {
            ParamKind::Continuous { low, high, scale } => {
                if !low.is_finite() || !high.is_finite() {
                    return Err(bounds("bounds must be finite".into()));
                }
                if low >= high {
                    return Err(bounds(format!("low {low} must be < high {high}")));
                }
                if *scale == Scale::Log10 && *low <= 0.0 {
                    return Err(SpaceError::LogScaleNonPositive {
                        path: path.to_string(),
                        name: self.name.clone(),
                        low: *low,
                    });
                }
            }
            ParamKind::Integer { low, high, scale } => {
                if low > high {
                    return Err(bounds(format!("low {low} must be <= high {high}")));
                }
                if *scale == Scale::Log10 && *low <= 0 {
                    return Err(SpaceError::LogScaleNonPositive {
                        path: path.to_string(),
                        name: self.name.clone(),
                        low: *low as f64,
                    });
                }
            }
            ParamKind::Categorical { choices } => {
                let distinct: HashSet<&String> = choices.iter().collect();
                if choices.len() < 2 {
                    return Err(SpaceError::InvalidChoices {
                        path: path.to_string(),
                        name: self.name.clone(),
                        message: "needs at least 2 choices".into(),
                    });
                }
                if distinct.len() != choices.len() {
                    return Err(SpaceError::InvalidChoices {
                        path: path.to_string(),
                        name: self.name.clone(),
                        message: "has repeated choices".into(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Number of feature components this parameter occupies when encoded.
    pub fn width(&self) -> usize {
        match &self.kind {
            ParamKind::Categorical { choices } => choices.len(),
            _ => 1,
        }
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self.kind, ParamKind::Categorical { .. })
    }

    /// Position of a numeric value on `[0, 1]` after scaling. `None` for
    /// categoricals or mismatched values.
    pub fn unit_position(&self, value: &ParamValue) -> Option<f64> {
        let (v, low, high, scale) = match (&self.kind, value) {
            (ParamKind::Continuous { low, high, scale }, ParamValue::Real(v)) => (*v, *low, *high, *scale),
            (ParamKind::Integer { low, high, scale }, ParamValue::Int(v)) => {
                (*v as f64, *low as f64, *high as f64, *scale)
            }
            _ => return None,
        };
        let (lo, hi) = (scale.forward(low), scale.forward(high));
        if hi == lo {
            return Some(0.0);
        }
        Some(((scale.forward(v) - lo) / (hi - lo)).clamp(0.0, 1.0))
    }

    /// Inverse of [`unit_position`](Self::unit_position). Integers round half
    /// up and clamp to bounds.
    ///
    /// # Panics
    /// On categorical parameters.
    pub fn value_at_unit(&self, u: f64) -> ParamValue {
        match &self.kind {
            ParamKind::Continuous { low, high, scale } => {
                let (lo, hi) = (scale.forward(*low), scale.forward(*high));
                let v = scale.inverse(lo + u * (hi - lo));
                ParamValue::Real(v.clamp(*low, *high))
            }
            ParamKind::Integer { low, high, scale } => {
                let (lo, hi) = (scale.forward(*low as f64), scale.forward(*high as f64));
                let v = round_half_up(scale.inverse(lo + u * (hi - lo)));
                ParamValue::Int((v as i64).clamp(*low, *high))
            }
            ParamKind::Categorical { .. } => panic!("value_at_unit on categorical `{}`", self.name),
        }
    }

    pub fn check(&self, value: &ParamValue) -> Result<(), SpaceError> {
        let out = || SpaceError::OutOfBounds {
            name: self.name.clone(),
            value: value.to_string(),
        };
        match (&self.kind, value) {
            (ParamKind::Continuous { low, high, .. }, ParamValue::Real(v)) => {
                if v.is_finite() && v >= low && v <= high {
                    Ok(())
                } else {
                    Err(out())
                }
            }
            (ParamKind::Integer { low, high, .. }, ParamValue::Int(v)) => {
                if v >= low && v <= high {
                    Ok(())
                } else {
                    Err(out())
                }
            }
            (ParamKind::Categorical { choices }, ParamValue::Choice(i)) => {
                if *i < choices.len() {
                    Ok(())
                } else {
                    Err(out())
                }
            }
            (ParamKind::Continuous { .. }, _) => Err(SpaceError::KindMismatch {
                name: self.name.clone(),
                expected: "real",
            }),
            (ParamKind::Integer { .. }, _) => Err(SpaceError::KindMismatch {
                name: self.name.clone(),
                expected: "integer",
            }),
            (ParamKind::Categorical { .. }, _) => Err(SpaceError::KindMismatch {
                name: self.name.clone(),
                expected: "choice",
            }),
        }
    }

    fn sample(&self, rng: &mut Rng) -> ParamValue {
        match &self.kind {
            ParamKind::Categorical { choices } => ParamValue::Choice(rng.gen_range(0..choices.len())),
            _ => self.value_at_unit(rng.gen::<f64>()),
        }
    }
}

/// Ordered list of parameters. Declaration order is the canonical order for
/// configurations, feature vectors and cell keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSpace {
    params: Vec<ParamSpec>,
}

impl ConfigSpace {
    pub fn new(params: Vec<ParamSpec>) -> Result<Self, SpaceError> {
        let mut seen = HashSet::new();
        for (i, p) in params.iter().enumerate() {
            let path = format!("$.params[{i}]");
            p.validate(&path)?;
            if !seen.insert(p.name.clone()) {
                return Err(SpaceError::DuplicateName {
                    path,
                    name: p.name.clone(),
                });
            }
        }
        Ok(Self { params })
    }

    pub fn params(&self) -> &[ParamSpec] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Length of encoded feature vectors.
    pub fn encoded_dim(&self) -> usize {
        self.params.iter().map(ParamSpec::width).sum()
    }

    pub fn validate(&self, config: &Configuration) -> Result<(), SpaceError> {
        if config.values.len() != self.params.len() {
            return Err(SpaceError::Arity {
                expected: self.params.len(),
                got: config.values.len(),
            });
        }
        for (p, v) in self.params.iter().zip(&config.values) {
            p.check(v)?;
        }
        Ok(())
    }

    pub fn sample_uniform(&self, rng: &mut Rng) -> Configuration {
        Configuration::new(self.params.iter().map(|p| p.sample(rng)).collect())
    }

    /// Latin hypercube design of `n` configurations. Numeric parameters get
    /// one sample per equal-width stratum of the scaled range; categoricals
    /// are assigned round-robin and shuffled.
    pub fn latin_hypercube(&self, n: usize, rng: &mut Rng) -> Vec<Configuration> {
        assert!(n >= 1, "latin hypercube needs n >= 1");
        let mut columns: Vec<Vec<ParamValue>> = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let column = match &p.kind {
                ParamKind::Categorical { choices } => {
                    let mut idx: Vec<usize> = (0..n).map(|i| i % choices.len()).collect();
                    idx.shuffle(rng);
                    idx.into_iter().map(ParamValue::Choice).collect()
                }
                _ => {
                    let mut strata: Vec<usize> = (0..n).collect();
                    strata.shuffle(rng);
                    strata
                        .into_iter()
                        .map(|s| p.value_at_unit((s as f64 + rng.gen::<f64>()) / n as f64))
                        .collect()
                }
            };
            columns.push(column);
        }
        (0..n)
            .map(|i| Configuration::new(columns.iter().map(|c| c[i]).collect()))
            .collect()
    }

    pub fn encode(&self, config: &Configuration) -> Result<FeatureVector, SpaceError> {
        self.validate(config)?;
        let mut out = Vec::with_capacity(self.encoded_dim());
        for (p, v) in self.params.iter().zip(&config.values) {
            match (&p.kind, v) {
                (ParamKind::Categorical { choices }, ParamValue::Choice(i)) => {
                    out.extend((0..choices.len()).map(|c| if c == *i { 1.0 } else { 0.0 }));
                }
                _ => out.push(p.unit_position(v).expect("validated numeric value")),
            }
        }
        Ok(out)
    }

    /// Inverse of [`encode`](Self::encode): integers are rounded, categorical
    /// blocks take their arg-max.
    pub fn decode(&self, features: &[f64]) -> Result<Configuration, SpaceError> {
        if features.len() != self.encoded_dim() {
            return Err(SpaceError::Arity {
                expected: self.encoded_dim(),
                got: features.len(),
            });
        }
        let mut values = Vec::with_capacity(self.params.len());
        let mut offset = 0;
        for p in &self.params {
            let w = p.width();
            let block = &features[offset..offset + w];
            offset += w;
            values.push(match &p.kind {
                ParamKind::Categorical { .. } => {
                    let best = block
                        .iter()
                        .enumerate()
                        .fold(0, |best, (i, v)| if *v > block[best] { i } else { best });
                    ParamValue::Choice(best)
                }
                _ => p.value_at_unit(block[0].clamp(0.0, 1.0)),
            });
        }
        Ok(Configuration::new(values))
    }

    /// Parse the JSON space format. Unknown top-level keys (such as `pool`)
    /// are ignored here.
    pub fn from_json_str(text: &str) -> Result<Self, SpaceError> {
        let root: Value = serde_json::from_str(text).map_err(|e| SpaceError::Json(e.to_string()))?;
        Self::from_json_value(&root)
    }

    pub fn from_json_value(root: &Value) -> Result<Self, SpaceError> {
        let schema = |path: String, message: &str| SpaceError::Schema {
            path,
            message: message.to_string(),
        };
        let params = root
            .get("params")
            .ok_or_else(|| schema("$".into(), "missing `params` array"))?
            .as_array()
            .ok_or_else(|| schema("$.params".into(), "expected an array"))?;
        let mut specs = Vec::with_capacity(params.len());
        let mut seen = HashSet::new();
        for (i, entry) in params.iter().enumerate() {
            let path = format!("$.params[{i}]");
            let obj = entry
                .as_object()
                .ok_or_else(|| schema(path.clone(), "expected an object"))?;
            let name = obj
                .get("name")
                .and_then(Value::as_str)
                .ok_or_else(|| schema(format!("{path}.name"), "expected a string"))?
                .to_string();
            if name.is_empty() {
                return Err(schema(format!("{path}.name"), "must not be empty"));
            }
            let kind = obj
                .get("kind")
                .and_then(Value::as_str)
                .ok_or_else(|| schema(format!("{path}.kind"), "expected a string"))?;
            let scale = match obj.get("scale") {
                None | Some(Value::Null) => Scale::Linear,
                Some(Value::String(s)) if s == "linear" => Scale::Linear,
                Some(Value::String(s)) if s == "log10" => Scale::Log10,
                Some(_) => return Err(schema(format!("{path}.scale"), "expected \"linear\" or \"log10\"")),
            };
            let kind = match kind {
                "continuous" => {
                    let num = |key: &str| {
                        obj.get(key)
                            .and_then(Value::as_f64)
                            .ok_or_else(|| schema(format!("{path}.{key}"), "expected a number"))
                    };
                    ParamKind::Continuous {
                        low: num("low")?,
                        high: num("high")?,
                        scale,
                    }
                }
                "integer" => {
                    let int = |key: &str| {
                        obj.get(key)
                            .and_then(Value::as_i64)
                            .ok_or_else(|| schema(format!("{path}.{key}"), "expected an integer"))
                    };
                    ParamKind::Integer {
                        low: int("low")?,
                        high: int("high")?,
                        scale,
                    }
                }
                "categorical" => {
                    if obj.contains_key("low") || obj.contains_key("high") {
                        return Err(schema(path.clone(), "categorical parameters take no bounds"));
                    }
                    if obj.get("scale").is_some_and(|s| !s.is_null()) {
                        return Err(schema(format!("{path}.scale"), "categorical parameters take no scale"));
                    }
                    let choices = obj
                        .get("choices")
                        .and_then(Value::as_array)
                        .ok_or_else(|| schema(format!("{path}.choices"), "expected an array of strings"))?
                        .iter()
                        .enumerate()
                        .map(|(j, c)| {
                            c.as_str()
                                .map(str::to_string)
                                .ok_or_else(|| schema(format!("{path}.choices[{j}]"), "expected a string"))
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                    ParamKind::Categorical { choices }
                }
                _ => {
                    return Err(schema(
                        format!("{path}.kind"),
                        "expected \"continuous\", \"integer\" or \"categorical\"",
                    ))
                }
            };
            let spec = ParamSpec { name, kind };
            if !seen.insert(spec.name.clone()) {
                return Err(SpaceError::DuplicateName { path, name: spec.name });
            }
            spec.validate(&path)?;
            specs.push(spec);
        }
        Ok(Self { params: specs })
    }

    pub fn to_json_value(&self) -> Value {
        let params: Vec<Value> = self
            .params
            .iter()
            .map(|p| match &p.kind {
                ParamKind::Continuous { low, high, scale } => serde_json::json!({
                    "name": p.name, "kind": "continuous", "low": low, "high": high, "scale": scale,
                }),
                ParamKind::Integer { low, high, scale } => serde_json::json!({
                    "name": p.name, "kind": "integer", "low": low, "high": high, "scale": scale,
                }),
                ParamKind::Categorical { choices } => serde_json::json!({
                    "name": p.name, "kind": "categorical", "choices": choices,
                }),
            })
            .collect();
        serde_json::json!({ "params": params })
    }
}
