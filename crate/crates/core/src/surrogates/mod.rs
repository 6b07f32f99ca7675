//! The surrogate pool and explained-variance selection.
//!
//! Each pool entry is scored by the residual variance ratio
//! `Var(y - s(D)) / Var(y)` of its k-fold out-of-fold predictions; the entry
//! with the smallest ratio (lowest pool index on ties) is refitted on all
//! data and used for acquisition.

mod forest;
mod gbm;
mod gp;
mod tree;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use forest::RandomForest;
pub use gbm::GradientBoosting;
pub use gp::{kernel_matrix, rbf, standardization, GaussianProcess};
pub use tree::{RegressionTree, TreeParams};

use crate::rng::{derive_seed, rng_from_seed, stream};
use crate::space::FeatureVector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurrogateError {
    #[error("expected feature vectors of dimension {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("{x} feature vectors but {y} targets")]
    LengthMismatch { x: usize, y: usize },
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("training data contains non-finite values")]
    NonFiniteInput,
    #[error("fold count must be at least 2, got {0}")]
    InvalidFolds(usize),
    #[error("GP Cholesky factorization failed even with jitter {jitter:e}")]
    CholeskyFailed { jitter: f64 },
    #[error("invalid surrogate spec: {0}")]
    InvalidSpec(String),
    #[error("cross-validated predictions are not finite")]
    NonFiniteRatio,
    #[error("surrogate pool is empty")]
    EmptyPool,
    #[error("every surrogate in the pool failed: {0}")]
    AllFailed(String),
    #[error("invalid pool JSON: {0}")]
    PoolJson(String),
}

/// A trained regressor over encoded feature vectors.
pub trait Predictor: Send + Sync {
    fn input_dim(&self) -> usize;

    fn predict_row(&self, row: &[f64]) -> f64;

    fn predict(&self, rows: &[FeatureVector]) -> Result<Vec<f64>, SurrogateError> {
        let dim = self.input_dim();
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(SurrogateError::DimensionMismatch {
                expected: dim,
                got: bad.len(),
            });
        }
        Ok(rows.iter().map(|r| self.predict_row(r)).collect())
    }
}

/// Something that can be trained into a [`Predictor`]. Implemented by
/// [`SurrogateSpec`]; tests plug in their own doubles.
pub trait Learner: Sync {
    type Model: Predictor;

    fn fit(&self, x: &[FeatureVector], y: &[f64], seed: u64) -> Result<Self::Model, SurrogateError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    RandomForest,
    GaussianProcess,
    GradientBoosting,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::RandomForest => "random_forest",
            Family::GaussianProcess => "gaussian_process",
            Family::GradientBoosting => "gradient_boosting",
        }
    }
}

fn default_min_leaf() -> usize {
    2
}

fn default_signal_variance() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum SurrogateKind {
    RandomForest {
        n_trees: usize,
        /// `None` = unbounded.
        #[serde(default)]
        max_depth: Option<usize>,
        #[serde(default = "default_min_leaf")]
        min_leaf: usize,
    },
    GaussianProcess {
        length_scale: f64,
        #[serde(default = "default_signal_variance")]
        signal_variance: f64,
        noise_variance: f64,
    },
    GradientBoosting {
        n_rounds: usize,
        learning_rate: f64,
        max_depth: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSpec {
    pub pool_index: usize,
    #[serde(flatten)]
    pub kind: SurrogateKind,
}

impl SurrogateSpec {
    pub fn new(pool_index: usize, kind: SurrogateKind) -> Self {
        Self { pool_index, kind }
    }

    pub fn random_forest(n_trees: usize, max_depth: Option<usize>) -> SurrogateKind {
        SurrogateKind::RandomForest {
            n_trees,
            max_depth,
            min_leaf: 2,
        }
    }

    pub fn gaussian_process(length_scale: f64, noise_variance: f64) -> SurrogateKind {
        SurrogateKind::GaussianProcess {
            length_scale,
            signal_variance: 1.0,
            noise_variance,
        }
    }

    pub fn gradient_boosting(n_rounds: usize, learning_rate: f64, max_depth: usize) -> SurrogateKind {
        SurrogateKind::GradientBoosting {
            n_rounds,
            learning_rate,
            max_depth,
        }
    }

    pub fn family(&self) -> Family {
        match self.kind {
            SurrogateKind::RandomForest { .. } => Family::RandomForest,
            SurrogateKind::GaussianProcess { .. } => Family::GaussianProcess,
            SurrogateKind::GradientBoosting { .. } => Family::GradientBoosting,
        }
    }

    /// Compact hyperparameter description, e.g. `n_trees=64;max_depth=8;min_leaf=2`.
    pub fn hyper_summary(&self) -> String {
        match self.kind {
            SurrogateKind::RandomForest {
                n_trees,
                max_depth,
                min_leaf,
            } => format!(
                "n_trees={n_trees};max_depth={};min_leaf={min_leaf}",
                max_depth.map_or("none".to_string(), |d| d.to_string())
            ),
            SurrogateKind::GaussianProcess {
                length_scale,
                signal_variance,
                noise_variance,
            } => {
                format!("length_scale={length_scale};signal_variance={signal_variance};noise_variance={noise_variance}")
            }
            SurrogateKind::GradientBoosting {
                n_rounds,
                learning_rate,
                max_depth,
            } => format!("n_rounds={n_rounds};learning_rate={learning_rate};max_depth={max_depth}"),
        }
    }

    pub fn validate(&self) -> Result<(), SurrogateError> {
        let bad = |m: &str| Err(SurrogateError::InvalidSpec(format!("{}: {m}", self.family().as_str())));
        match self.kind {
            SurrogateKind::RandomForest {
                n_trees,
                max_depth,
                min_leaf,
            } => {
                if n_trees < 1 || min_leaf < 1 || max_depth == Some(0) {
                    return bad("n_trees, max_depth and min_leaf must be >= 1");
                }
            }
            SurrogateKind::GaussianProcess {
                length_scale,
                signal_variance,
                noise_variance,
            } => {
                if !(length_scale > 0.0 && length_scale.is_finite()) {
                    return bad("length_scale must be > 0");
                }
                if !(signal_variance > 0.0 && signal_variance.is_finite()) {
                    return bad("signal_variance must be > 0");
                }
                if !(noise_variance >= 0.0 && noise_variance.is_finite()) {
                    return bad("noise_variance must be >= 0");
                }
            }
            SurrogateKind::GradientBoosting {
                n_rounds,
                learning_rate,
                max_depth,
            } => {
                if n_rounds < 1 || max_depth < 1 {
                    return bad("n_rounds and max_depth must be >= 1");
                }
                if !(learning_rate > 0.0 && learning_rate <= 1.0) {
                    return bad("learning_rate must be in (0, 1]");
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FittedModel {
    Forest(RandomForest),
    Gp(GaussianProcess),
    Gbm(GradientBoosting),
}

impl Predictor for FittedModel {
    fn input_dim(&self) -> usize {
        match self {
            FittedModel::Forest(m) => m.input_dim(),
            FittedModel::Gp(m) => m.input_dim(),
            FittedModel::Gbm(m) => m.input_dim(),
        }
    }

    fn predict_row(&self, row: &[f64]) -> f64 {
        match self {
            FittedModel::Forest(m) => m.predict_row(row),
            FittedModel::Gp(m) => m.predict_row(row),
            FittedModel::Gbm(m) => m.predict_row(row),
        }
    }
}

/// Checks shared by every fit: equal lengths, at least two rows, one
/// dimension, finite values. Returns the dimension.
pub fn check_training_data(x: &[FeatureVector], y: &[f64]) -> Result<usize, SurrogateError> {
    if x.len() != y.len() {
        return Err(SurrogateError::LengthMismatch { x: x.len(), y: y.len() });
    }
    if x.len() < 2 {
        return Err(SurrogateError::TooFewSamples { need: 2, got: x.len() });
    }
    let dim = x[0].len();
    if dim == 0 {
        return Err(SurrogateError::DimensionMismatch { expected: 1, got: 0 });
    }
    if let Some(bad) = x.iter().find(|r| r.len() != dim) {
        return Err(SurrogateError::DimensionMismatch {
            expected: dim,
            got: bad.len(),
        });
    }
    if !y.iter().all(|v| v.is_finite()) || !x.iter().flatten().all(|v| v.is_finite()) {
        return Err(SurrogateError::NonFiniteInput);
    }
    Ok(dim)
}

impl Learner for SurrogateSpec {
    type Model = FittedModel;

    fn fit(&self, x: &[FeatureVector], y: &[f64], seed: u64) -> Result<FittedModel, SurrogateError> {
        self.validate()?;
        check_training_data(x, y)?;
        Ok(match self.kind {
            SurrogateKind::RandomForest {
                n_trees,
                max_depth,
                min_leaf,
            } => FittedModel::Forest(RandomForest::fit(x, y, n_trees, max_depth, min_leaf, seed)),
            SurrogateKind::GaussianProcess {
                length_scale,
                signal_variance,
                noise_variance,
            } => FittedModel::Gp(GaussianProcess::fit(
                x,
                y,
                length_scale,
                signal_variance,
                noise_variance,
            )?),
            SurrogateKind::GradientBoosting {
                n_rounds,
                learning_rate,
                max_depth,
            } => FittedModel::Gbm(GradientBoosting::fit(x, y, n_rounds, learning_rate, max_depth)),
        })
    }
}

/// Model trained on all data for the current iteration.
#[derive(Debug, Clone)]
pub struct FittedSurrogate<M> {
    pub pool_index: usize,
    pub model: M,
    pub train_size: usize,
}

pub fn population_variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

/// `Var(y - pred) / Var(y)` with population variances; `1.0` when `y` is
/// (numerically) constant.
pub fn residual_variance_ratio(y: &[f64], pred: &[f64]) -> f64 {
    let var_y = population_variance(y);
    if var_y < 1e-12 {
        return 1.0;
    }
    let resid: Vec<f64> = y.iter().zip(pred).map(|(a, b)| a - b).collect();
    population_variance(&resid) / var_y
}

/// Out-of-fold residual variance ratio of one learner.
pub fn cv_residual_variance_ratio<L: Learner + ?Sized>(
    learner: &L,
    x: &[FeatureVector],
    y: &[f64],
    k: usize,
    seed: u64,
) -> Result<f64, SurrogateError> {
    if k < 2 {
        return Err(SurrogateError::InvalidFolds(k));
    }
    if x.len() < 2 * k {
        return Err(SurrogateError::TooFewSamples {
            need: 2 * k,
            got: x.len(),
        });
    }
    check_training_data(x, y)?;
    if population_variance(y) < 1e-12 {
        return Ok(1.0);
    }
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let mut out_of_fold = vec![0.0; n];
    for fold in 0..k {
        let (start, end) = (fold * n / k, (fold + 1) * n / k);
        let held = &order[start..end];
        let train: Vec<usize> = order[..start].iter().chain(&order[end..]).copied().collect();
        let tx: Vec<FeatureVector> = train.iter().map(|&i| x[i].clone()).collect();
        let ty: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let model = learner.fit(&tx, &ty, derive_seed(seed, fold as u64))?;
        let hx: Vec<FeatureVector> = held.iter().map(|&i| x[i].clone()).collect();
        for (&i, p) in held.iter().zip(model.predict(&hx)?) {
            out_of_fold[i] = p;
        }
    }
    let ratio = residual_variance_ratio(y, &out_of_fold);
    if ratio.is_finite() {
        Ok(ratio)
    } else {
        Err(SurrogateError::NonFiniteRatio)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub pool_index: usize,
    /// `f64::INFINITY` when the entry failed.
    pub ratio: f64,
    pub failure: Option<String>,
}

/// Pool entries sorted by ascending ratio, ties by pool index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateRanking {
    pub entries: Vec<RankEntry>,
}

impl SurrogateRanking {
    pub fn winner(&self) -> &RankEntry {
        &self.entries[0]
    }
}

#[derive(Debug, Clone)]
pub struct Selection<M> {
    pub ranking: SurrogateRanking,
    pub fitted: FittedSurrogate<M>,
}

/// Per-entry CV seed; exposed so the ranking can be recomputed independently.
pub fn pool_entry_seed(master: u64, pool_index: usize) -> u64 {
    derive_seed(derive_seed(master, stream::SELECTION), pool_index as u64)
}

/// Rank every learner by its CV residual variance ratio, then refit the
/// winner on all of `x`/`y`. Entries whose fit fails rank last with an
/// infinite ratio.
pub fn select_surrogate<L: Learner>(
    pool: &[L],
    x: &[FeatureVector],
    y: &[f64],
    k: usize,
    seed: u64,
) -> Result<Selection<L::Model>, SurrogateError> {
    if pool.is_empty() {
        return Err(SurrogateError::EmptyPool);
    }
    if k < 2 {
        return Err(SurrogateError::InvalidFolds(k));
    }
    if x.len() < 2 * k {
        return Err(SurrogateError::TooFewSamples {
            need: 2 * k,
            got: x.len(),
        });
    }
    let mut entries: Vec<RankEntry> = pool
        .par_iter()
        .enumerate()
        .map(
            |(i, learner)| match cv_residual_variance_ratio(learner, x, y, k, pool_entry_seed(seed, i)) {
                Ok(ratio) => RankEntry {
                    pool_index: i,
                    ratio,
                    failure: None,
                },
                Err(e) => RankEntry {
                    pool_index: i,
                    ratio: f64::INFINITY,
                    failure: Some(e.to_string()),
                },
            },
        )
        .collect();
    entries.sort_by(|a, b| a.ratio.total_cmp(&b.ratio).then(a.pool_index.cmp(&b.pool_index)));
    if entries.iter().all(|e| e.failure.is_some()) {
        let reasons: Vec<String> = entries
            .iter()
            .map(|e| format!("[{}] {}", e.pool_index, e.failure.as_deref().unwrap_or("")))
            .collect();
        return Err(SurrogateError::AllFailed(reasons.join("; ")));
    }
    let winner = entries[0].pool_index;
    let model = pool[winner].fit(x, y, derive_seed(pool_entry_seed(seed, winner), stream::FINAL_FIT))?;
    Ok(Selection {
        ranking: SurrogateRanking { entries },
        fitted: FittedSurrogate {
            pool_index: winner,
            model,
            train_size: x.len(),
        },
    })
}

/// RF {64, 256 trees} x {unbounded, depth 8}; GP length scale
/// {0.1, 0.3, 1.0} x noise {1e-6, 1e-2}; GBM {100, 300 rounds} x
/// learning rate {0.05, 0.1} at depth 3.
pub fn default_pool() -> Vec<SurrogateSpec> {
    let mut kinds = Vec::new();
    for n_trees in [64, 256] {
        for depth in [None, Some(8)] {
            kinds.push(SurrogateSpec::random_forest(n_trees, depth));
        }
    }
    for length_scale in [0.1, 0.3, 1.0] {
        for noise in [1e-6, 1e-2] {
            kinds.push(SurrogateSpec::gaussian_process(length_scale, noise));
        }
    }
    for n_rounds in [100, 300] {
        for lr in [0.05, 0.1] {
            kinds.push(SurrogateSpec::gradient_boosting(n_rounds, lr, 3));
        }
    }
    kinds
        .into_iter()
        .enumerate()
        .map(|(i, k)| SurrogateSpec::new(i, k))
        .collect()
}

/// Parse a pool: either a bare JSON array of spec objects or an object with
/// a `pool` array (the space file may carry one). Pool indices follow array
/// order.
pub fn parse_pool(text: &str) -> Result<Vec<SurrogateSpec>, SurrogateError> {
    let root: Value = serde_json::from_str(text).map_err(|e| SurrogateError::PoolJson(e.to_string()))?;
    let items = match &root {
        Value::Array(items) => items,
        Value::Object(obj) => obj
            .get("pool")
            .and_then(Value::as_array)
            .ok_or_else(|| SurrogateError::PoolJson("expected a `pool` array".into()))?,
        _ => return Err(SurrogateError::PoolJson("expected an array or an object".into())),
    };
    if items.is_empty() {
        return Err(SurrogateError::EmptyPool);
    }
    items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let kind: SurrogateKind = serde_json::from_value(item.clone())
                .map_err(|e| SurrogateError::PoolJson(format!("$.pool[{i}]: {e}")))?;
            let spec = SurrogateSpec::new(i, kind);
            spec.validate()?;
            Ok(spec)
        })
        .collect()
}

/// Ranking as CSV: `pool_index,family,hyper,ratio,selected`.
pub fn ranking_csv(ranking: &SurrogateRanking, pool: &[SurrogateSpec]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["pool_index", "family", "hyper", "ratio", "selected"])
        .expect("in-memory write");
    for (pos, e) in ranking.entries.iter().enumerate() {
        let spec = &pool[e.pool_index];
        let ratio = if e.failure.is_some() {
            "failed".to_string()
        } else {
            e.ratio.to_string()
        };
        w.write_record([
            e.pool_index.to_string(),
            spec.family().as_str().to_string(),
            spec.hyper_summary(),
            ratio,
            (pos == 0).to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}
