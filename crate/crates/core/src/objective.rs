use std::collections::BTreeMap;

use thiserror::Error;

use crate::space::{ConfigSpace, Configuration};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{0}")]
pub struct ObjectiveError(pub String);

/// Outcome of one engine evaluation. Lower scores are better.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub score: f64,
    pub meta: BTreeMap<String, f64>,
}

impl Evaluation {
    pub fn score(score: f64) -> Self {
        Self {
            score,
            meta: BTreeMap::new(),
        }
    }
}

/// The expensive function being minimized. `seed` is a per-evaluation stream
/// derived by the optimizer, so stochastic engines stay reproducible.
pub trait Objective: Sync {
    fn name(&self) -> &str;

    /// Canonical search space.
    fn space(&self) -> &ConfigSpace;

    fn evaluate(&self, config: &Configuration, seed: u64) -> Result<Evaluation, ObjectiveError>;
}
