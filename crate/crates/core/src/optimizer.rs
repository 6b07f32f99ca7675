//! The search loop: Latin hypercube start, then per iteration an anomaly
//! check, surrogate selection over the pool, candidate ranking and an
//! exploit/explore batch, until the evaluation budget is spent.

use std::collections::BTreeMap;
use std::time::Instant;

use log::{debug, info, warn};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::acquisition::{
    allocate_batch, generate_candidates, rank_candidates, Allocation, ExplorationMemory, RankedCandidates, Role,
    DEFAULT_BATCH_SIZE, DEFAULT_EXPLOIT_FRACTION, DEFAULT_N_BATCHES, DEFAULT_RESOLUTION,
};
use crate::objective::Objective;
use crate::rng::{derive_seed, rng_from_seed, stream};
use crate::space::{ConfigSpace, Configuration, FeatureVector, SpaceError};
use crate::surrogates::{select_surrogate, FittedModel, Learner, SurrogateSpec};

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error("budget of {budget} evaluations is below the initial design size {n_init}")]
    BudgetTooSmall { budget: usize, n_init: usize },
    #[error("invalid options: {0}")]
    InvalidOptions(String),
    #[error("every evaluation in iteration {iteration} failed; last error: {last_error}")]
    AllEvaluationsFailed { iteration: usize, last_error: String },
    #[error("no successful evaluations recorded")]
    NoValidRecords,
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error("could not build worker pool: {0}")]
    Workers(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRecord {
    pub eval_index: usize,
    /// 0 is the initial design.
    pub iteration: usize,
    pub role: Role,
    pub config: Configuration,
    /// `None` marks a failed evaluation.
    pub score: Option<f64>,
    pub failure: Option<String>,
    pub wall_time_ms: f64,
    pub engine_meta: BTreeMap<String, f64>,
}

impl EvalRecord {
    pub fn is_failed(&self) -> bool {
        self.score.is_none()
    }
}

/// Append-only record of every evaluation in a run.
#[derive(Debug, Clone, Serialize)]
pub struct TrialDatabase {
    space: ConfigSpace,
    records: Vec<EvalRecord>,
}

impl TrialDatabase {
    pub fn new(space: ConfigSpace) -> Self {
        Self {
            space,
            records: Vec::new(),
        }
    }

    pub fn space(&self) -> &ConfigSpace {
        &self.space
    }

    pub fn records(&self) -> &[EvalRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn valid(&self) -> impl Iterator<Item = &EvalRecord> {
        self.records.iter().filter(|r| !r.is_failed())
    }

    /// Encoded configurations and scores of every successful evaluation.
    pub fn training_data(&self) -> Result<(Vec<FeatureVector>, Vec<f64>), SpaceError> {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for r in self.valid() {
            x.push(self.space.encode(&r.config)?);
            y.push(r.score.expect("valid record"));
        }
        Ok((x, y))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnomalyReport {
    pub flagged: bool,
    pub duplicate_fraction: f64,
    pub message: String,
}

/// Largest group of scores lying pairwise within `epsilon`, as a fraction of
/// the successful evaluations.
pub fn duplicate_fraction(scores: &[f64], epsilon: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut largest = 1;
    let mut lo = 0;
    for hi in 0..sorted.len() {
        while sorted[hi] - sorted[lo] > epsilon {
            lo += 1;
        }
        largest = largest.max(hi - lo + 1);
    }
    largest as f64 / sorted.len() as f64
}

/// Append `new_records` and check the whole database for clusters of
/// near-identical scores. Non-finite scores are converted to failures.
pub fn update_trials(
    db: &mut TrialDatabase,
    new_records: Vec<EvalRecord>,
    epsilon: f64,
    dup_threshold: f64,
) -> AnomalyReport {
    for mut r in new_records {
        if let Some(s) = r.score {
            if !s.is_finite() {
                r.score = None;
                r.failure = Some(format!("non-finite score {s}"));
            }
        }
        db.records.push(r);
    }
    let scores: Vec<f64> = db.valid().filter_map(|r| r.score).collect();
    let fraction = duplicate_fraction(&scores, epsilon);
    let flagged = !scores.is_empty() && fraction >= dup_threshold;
    let message = if flagged {
        format!(
            "{:.0}% of {} scores are identical within {epsilon:e} (threshold {:.0}%)",
            fraction * 100.0,
            scores.len(),
            dup_threshold * 100.0
        )
    } else {
        String::new()
    };
    AnomalyReport {
        flagged,
        duplicate_fraction: fraction,
        message,
    }
}

/// Successful record with the lowest score; earliest wins ties.
pub fn best(db: &TrialDatabase) -> Result<&EvalRecord, OptimizeError> {
    let mut best: Option<&EvalRecord> = None;
    for r in db.valid() {
        if best.is_none_or(|b| r.score < b.score) {
            best = Some(r);
        }
    }
    best.ok_or(OptimizeError::NoValidRecords)
}

/// How each iteration obtains its surrogate.
#[derive(Debug, Clone, PartialEq)]
pub enum SearchPolicy {
    /// Re-select from the pool every iteration.
    Dynamic(Vec<SurrogateSpec>),
    /// Always fit this one spec.
    Fixed(SurrogateSpec),
    /// No surrogate; every slot explores.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BudgetPolicy {
    pub max_engine_evals: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizerOptions {
    /// Evaluations per iteration.
    pub parallel_slots: usize,
    /// Threads evaluating a batch; `None` uses the ambient rayon pool.
    /// Never changes results.
    pub workers: Option<usize>,
    pub exploit_fraction: f64,
    pub folds: usize,
    pub resolution: usize,
    pub candidate_batch_size: usize,
    pub candidate_batches: usize,
    /// Consecutive rejections before sampling gives up; `None` means
    /// `50 * candidate_batch_size`.
    pub max_attempts: Option<usize>,
    pub dup_epsilon: f64,
    pub dup_threshold: f64,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        Self {
            parallel_slots: 4,
            workers: None,
            exploit_fraction: DEFAULT_EXPLOIT_FRACTION,
            folds: 3,
            resolution: DEFAULT_RESOLUTION,
            candidate_batch_size: DEFAULT_BATCH_SIZE,
            candidate_batches: DEFAULT_N_BATCHES,
            max_attempts: None,
            dup_epsilon: 1e-9,
            dup_threshold: 0.8,
        }
    }
}

impl OptimizerOptions {
    pub fn validate(&self) -> Result<(), OptimizeError> {
        let bad = |m: &str| Err(OptimizeError::InvalidOptions(m.to_string()));
        if self.parallel_slots < 1 {
            return bad("parallel_slots must be >= 1");
        }
        if self.workers == Some(0) {
            return bad("workers must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.exploit_fraction) {
            return bad("exploit_fraction must lie in [0, 1]");
        }
        if self.folds < 2 {
            return bad("folds must be >= 2");
        }
        if self.resolution < 1 {
            return bad("resolution must be >= 1");
        }
        if self.candidate_batch_size < 1 || self.candidate_batches < 1 {
            return bad("candidate batch size and count must be >= 1");
        }
        if self.max_attempts == Some(0) {
            return bad("max_attempts must be >= 1");
        }
        if self.dup_epsilon.is_nan() || self.dup_epsilon < 0.0 {
            return bad("dup_epsilon must be >= 0");
        }
        if !(self.dup_threshold > 0.0 && self.dup_threshold <= 1.0) {
            return bad("dup_threshold must lie in (0, 1]");
        }
        Ok(())
    }

    fn attempts(&self) -> usize {
        self.max_attempts.unwrap_or(50 * self.candidate_batch_size)
    }
}

pub fn initial_design_size(space: &ConfigSpace) -> usize {
    (2 * space.len()).max(8)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectedSurrogate {
    pub pool_index: usize,
    pub family: &'static str,
    pub hyper: String,
    /// CV ratio; absent for fixed-surrogate runs, which skip ranking.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationSummary {
    pub iteration: usize,
    pub selected: Option<SelectedSurrogate>,
    pub anomaly: AnomalyReport,
    pub n_candidates: usize,
    pub n_exploit: usize,
    pub n_explore: usize,
    pub n_failed: usize,
    /// Best successful score after this iteration.
    pub incumbent_best: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub best: EvalRecord,
    pub trace: Vec<IterationSummary>,
    pub db: TrialDatabase,
    /// Set when the search stopped early because no unvisited cells remained.
    pub exhausted: bool,
    #[serde(skip)]
    pub memory: ExplorationMemory,
}

impl RunResult {
    pub fn evaluations(&self) -> &[EvalRecord] {
        self.db.records()
    }

    /// Surrogate that proposed the batch containing `record`.
    pub fn selected_for(&self, record: &EvalRecord) -> Option<&SelectedSurrogate> {
        self.trace.get(record.iteration).and_then(|t| t.selected.as_ref())
    }
}

struct Proposal {
    model: Option<FittedModel>,
    selected: Option<SelectedSurrogate>,
}

fn propose(
    policy: &SearchPolicy,
    db: &TrialDatabase,
    options: &OptimizerOptions,
    iter_seed: u64,
) -> Result<Proposal, OptimizeError> {
    let none = Proposal {
        model: None,
        selected: None,
    };
    let valid = db.valid().count();
    match policy {
        SearchPolicy::Random => Ok(none),
        SearchPolicy::Dynamic(pool) => {
            if valid < 2 * options.folds {
                return Ok(none);
            }
            let (x, y) = db.training_data()?;
            match select_surrogate(pool, &x, &y, options.folds, iter_seed) {
                Ok(sel) => {
                    let spec = &pool[sel.fitted.pool_index];
                    debug!(
                        "ranking: {:?}",
                        sel.ranking
                            .entries
                            .iter()
                            .map(|e| (e.pool_index, e.ratio))
                            .collect::<Vec<_>>()
                    );
                    Ok(Proposal {
                        selected: Some(SelectedSurrogate {
                            pool_index: sel.fitted.pool_index,
                            family: spec.family().as_str(),
                            hyper: spec.hyper_summary(),
                            ratio: Some(sel.ranking.winner().ratio),
                        }),
                        model: Some(sel.fitted.model),
                    })
                }
                Err(e) => {
                    warn!("surrogate selection failed, exploring instead: {e}");
                    Ok(none)
                }
            }
        }
        SearchPolicy::Fixed(spec) => {
            if valid < 2 {
                return Ok(none);
            }
            let (x, y) = db.training_data()?;
            match spec.fit(&x, &y, derive_seed(iter_seed, stream::FINAL_FIT)) {
                Ok(model) => Ok(Proposal {
                    selected: Some(SelectedSurrogate {
                        pool_index: spec.pool_index,
                        family: spec.family().as_str(),
                        hyper: spec.hyper_summary(),
                        ratio: None,
                    }),
                    model: Some(model),
                }),
                Err(e) => {
                    warn!("fixed surrogate fit failed, exploring instead: {e}");
                    Ok(none)
                }
            }
        }
    }
}

fn evaluate_batch<O: Objective + ?Sized>(
    objective: &O,
    batch: Vec<Allocation>,
    iteration: usize,
    first_index: usize,
    master_seed: u64,
    workers: Option<&rayon::ThreadPool>,
) -> Vec<EvalRecord> {
    let eval_seeds = derive_seed(master_seed, stream::EVALUATION);
    let work = || {
        batch
            .into_par_iter()
            .enumerate()
            .map(|(i, a)| {
                let eval_index = first_index + i;
                let started = Instant::now();
                let outcome = objective.evaluate(&a.config, derive_seed(eval_seeds, eval_index as u64));
                let wall_time_ms = started.elapsed().as_secs_f64() * 1e3;
                let (score, failure, engine_meta) = match outcome {
                    Ok(e) => (Some(e.score), None, e.meta),
                    Err(e) => (None, Some(e.to_string()), BTreeMap::new()),
                };
                EvalRecord {
                    eval_index,
                    iteration,
                    role: a.role,
                    config: a.config,
                    score,
                    failure,
                    wall_time_ms,
                    engine_meta,
                }
            })
            .collect::<Vec<_>>()
    };
    match workers {
        Some(pool) => pool.install(work),
        None => work(),
    }
}

fn incumbent(db: &TrialDatabase) -> Option<f64> {
    best(db).ok().and_then(|r| r.score)
}

/// Run one search under a fixed evaluation budget.
pub fn run<O: Objective + ?Sized>(
    objective: &O,
    space: &ConfigSpace,
    policy: &SearchPolicy,
    budget: BudgetPolicy,
    options: &OptimizerOptions,
    master_seed: u64,
) -> Result<RunResult, OptimizeError> {
    options.validate()?;
    if let SearchPolicy::Dynamic(pool) = policy {
        if pool.is_empty() {
            return Err(OptimizeError::InvalidOptions("surrogate pool is empty".into()));
        }
    }
    let n_init = initial_design_size(space);
    if budget.max_engine_evals < n_init {
        return Err(OptimizeError::BudgetTooSmall {
            budget: budget.max_engine_evals,
            n_init,
        });
    }
    let workers = match options.workers {
        Some(n) => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| OptimizeError::Workers(e.to_string()))?,
        ),
        None => None,
    };
    let attempts = options.attempts();
    let mut memory = ExplorationMemory::new(options.resolution);
    let mut db = TrialDatabase::new(space.clone());
    let mut trace = Vec::new();

    // initial design; a design point whose cell is already taken is redrawn
    let mut init_rng = rng_from_seed(derive_seed(master_seed, stream::INIT_DESIGN));
    let mut init = Vec::with_capacity(n_init);
    for c in space.latin_hypercube(n_init, &mut init_rng) {
        let mut candidate = c;
        let mut tries = 0;
        while !memory.insert(memory.key(space, &candidate)) && tries < attempts {
            candidate = space.sample_uniform(&mut init_rng);
            tries += 1;
        }
        if tries < attempts {
            init.push(Allocation {
                config: candidate,
                role: Role::Init,
            });
        }
    }
    let records = evaluate_batch(objective, init, 0, 0, master_seed, workers.as_ref());
    let mut anomaly = record_batch(&mut db, records, 0, options)?;
    trace.push(IterationSummary {
        iteration: 0,
        selected: None,
        anomaly: anomaly.clone(),
        n_candidates: 0,
        n_exploit: 0,
        n_explore: 0,
        n_failed: db.records().iter().filter(|r| r.is_failed()).count(),
        incumbent_best: incumbent(&db),
    });

    let mut exhausted = false;
    let mut iteration = 1;
    while db.len() < budget.max_engine_evals {
        let remaining = budget.max_engine_evals - db.len();
        let n_slots = options.parallel_slots.min(remaining);
        let iter_seed = derive_seed(master_seed, iteration as u64);

        let proposal = if anomaly.flagged {
            info!("iteration {iteration}: {}; exploring only", anomaly.message);
            Proposal {
                model: None,
                selected: None,
            }
        } else {
            propose(policy, &db, options, iter_seed)?
        };
        let mut exploit_fraction = options.exploit_fraction;
        let mut ranked = RankedCandidates::default();
        let mut n_candidates = 0;
        match &proposal.model {
            Some(model) if exploit_fraction > 0.0 => {
                let mut rng = rng_from_seed(derive_seed(iter_seed, stream::CANDIDATES));
                let candidates = generate_candidates(
                    space,
                    &memory,
                    options.candidate_batch_size,
                    options.candidate_batches,
                    attempts,
                    &mut rng,
                );
                n_candidates = candidates.len();
                if !candidates.is_empty() {
                    match rank_candidates(model, space, candidates, options.candidate_batch_size) {
                        Ok(r) => ranked = r,
                        Err(e) => warn!("ranking failed, exploring instead: {e}"),
                    }
                }
            }
            _ => exploit_fraction = 0.0,
        }
        let mut rng = rng_from_seed(derive_seed(iter_seed, stream::ALLOCATION));
        let batch = allocate_batch(
            &ranked,
            space,
            &mut memory,
            n_slots,
            exploit_fraction,
            attempts,
            &mut rng,
        );
        if batch.is_empty() {
            warn!("no unvisited cells left after {} evaluations", db.len());
            exhausted = true;
            break;
        }
        let n_exploit = batch.iter().filter(|a| a.role == Role::Exploit).count();
        let n_explore = batch.len() - n_exploit;
        let records = evaluate_batch(objective, batch, iteration, db.len(), master_seed, workers.as_ref());
        let n_failed = records
            .iter()
            .filter(|r| r.score.is_none_or(|s| !s.is_finite()))
            .count();
        anomaly = record_batch(&mut db, records, iteration, options)?;
        let summary = IterationSummary {
            iteration,
            selected: proposal.selected,
            anomaly: anomaly.clone(),
            n_candidates,
            n_exploit,
            n_explore,
            n_failed,
            incumbent_best: incumbent(&db),
        };
        info!(
            "iteration {iteration}: surrogate {} ({} exploit / {} explore), incumbent {:?}",
            summary.selected.as_ref().map_or("none", |s| s.family),
            n_exploit,
            n_explore,
            summary.incumbent_best
        );
        trace.push(summary);
        iteration += 1;
    }
    let best = best(&db)?.clone();
    Ok(RunResult {
        best,
        trace,
        db,
        exhausted,
        memory,
    })
}

/// Append a batch; abort if every evaluation in it failed.
fn record_batch(
    db: &mut TrialDatabase,
    records: Vec<EvalRecord>,
    iteration: usize,
    options: &OptimizerOptions,
) -> Result<AnomalyReport, OptimizeError> {
    let start = db.len();
    let report = update_trials(db, records, options.dup_epsilon, options.dup_threshold);
    let batch = &db.records()[start..];
    if !batch.is_empty() && batch.iter().all(EvalRecord::is_failed) {
        return Err(OptimizeError::AllEvaluationsFailed {
            iteration,
            last_error: batch.last().and_then(|r| r.failure.clone()).unwrap_or_default(),
        });
    }
    Ok(report)
}

/// Per-evaluation trace: `iteration,eval_index,score,incumbent_best,
/// selected_family,selected_ratio,batch_role,wall_time_ms` followed by one
/// column per parameter.
pub fn trace_csv(result: &RunResult) -> String {
    let space = result.db.space();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = [
        "iteration",
        "eval_index",
        "score",
        "incumbent_best",
        "selected_family",
        "selected_ratio",
        "batch_role",
        "wall_time_ms",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(space.params().iter().map(|p| p.name.clone()));
    w.write_record(&header).expect("in-memory write");
    let mut incumbent: Option<f64> = None;
    for r in result.evaluations() {
        if let Some(s) = r.score {
            incumbent = Some(incumbent.map_or(s, |b: f64| b.min(s)));
        }
        let selected = result.selected_for(r);
        let mut row = vec![
            r.iteration.to_string(),
            r.eval_index.to_string(),
            r.score.map_or(String::new(), |s| s.to_string()),
            incumbent.map_or(String::new(), |s| s.to_string()),
            selected.map_or("none".to_string(), |s| s.family.to_string()),
            selected.and_then(|s| s.ratio).map_or(String::new(), |v| v.to_string()),
            r.role.to_string(),
            format!("{:.3}", r.wall_time_ms),
        ];
        row.extend(r.config.values.iter().map(|v| v.to_string()));
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}
