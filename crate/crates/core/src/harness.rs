//! Benchmark runner: every (strategy, seed) cell gets the same budget and the
//! same seed-derived initial design, so differences come from acquisition.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::objective::Objective;
use crate::optimizer::{run, BudgetPolicy, OptimizerOptions, RunResult, SearchPolicy};
use crate::space::ConfigSpace;
use crate::surrogates::SurrogateSpec;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("benchmark needs at least one strategy and one seed")]
    EmptyGrid,
    #[error("cannot export an empty table")]
    EmptyTable,
    #[error("unknown strategy `{0}` (expected dss, fixed_rf, fixed_gp, fixed_gbm or random)")]
    UnknownStrategy(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed benchmark csv at record {record}: {message}")]
    Malformed { record: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Dss,
    FixedRf,
    FixedGp,
    FixedGbm,
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Dss,
        Strategy::FixedRf,
        Strategy::FixedGp,
        Strategy::FixedGbm,
        Strategy::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Dss => "dss",
            Strategy::FixedRf => "fixed_rf",
            Strategy::FixedGp => "fixed_gp",
            Strategy::FixedGbm => "fixed_gbm",
            Strategy::Random => "random",
        }
    }

    /// The surrogate a fixed strategy fits every iteration.
    pub fn fixed_spec(self) -> Option<SurrogateSpec> {
        match self {
            Strategy::FixedRf => Some(SurrogateSpec::new(0, SurrogateSpec::random_forest(256, None))),
            Strategy::FixedGp => Some(SurrogateSpec::new(0, SurrogateSpec::gaussian_process(0.3, 1e-2))),
            Strategy::FixedGbm => Some(SurrogateSpec::new(0, SurrogateSpec::gradient_boosting(300, 0.1, 3))),
            _ => None,
        }
    }

    pub fn policy(self, pool: &[SurrogateSpec]) -> SearchPolicy {
        match self {
            Strategy::Dss => SearchPolicy::Dynamic(pool.to_vec()),
            Strategy::Random => SearchPolicy::Random,
            fixed => SearchPolicy::Fixed(fixed.fixed_spec().expect("fixed strategy")),
        }
    }

    /// Comma-separated list, e.g. `dss,random`.
    pub fn parse_list(text: &str) -> Result<Vec<Strategy>, HarnessError> {
        text.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect()
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| HarnessError::UnknownStrategy(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TracePoint {
    pub eval_index: usize,
    pub score: Option<f64>,
    pub incumbent_best: Option<f64>,
    pub selected_family: String,
    pub batch_role: String,
}

/// One (strategy, seed) cell. `failure` is set when the run aborted; its
/// trace is then empty. Wall time is excluded from equality.
#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkRow {
    pub strategy: Strategy,
    pub objective: String,
    pub seed: u64,
    pub budget: usize,
    pub best_score: Option<f64>,
    /// 1-based number of evaluations spent when the best score first appeared.
    pub evals_to_best: Option<usize>,
    pub wall_time_ms: f64,
    pub trace: Vec<TracePoint>,
    pub failure: Option<String>,
}

impl PartialEq for BenchmarkRow {
    fn eq(&self, other: &Self) -> bool {
        self.strategy == other.strategy
            && self.objective == other.objective
            && self.seed == other.seed
            && self.budget == other.budget
            && self.best_score == other.best_score
            && self.evals_to_best == other.evals_to_best
            && self.trace == other.trace
            && self.failure == other.failure
    }
}

impl BenchmarkRow {
    fn from_trace(
        strategy: Strategy,
        objective: String,
        seed: u64,
        budget: usize,
        trace: Vec<TracePoint>,
        failure: Option<String>,
    ) -> Self {
        let mut best: Option<(f64, usize)> = None;
        for (i, p) in trace.iter().enumerate() {
            if let Some(s) = p.score {
                if best.is_none_or(|(b, _)| s < b) {
                    best = Some((s, i + 1));
                }
            }
        }
        Self {
            strategy,
            objective,
            seed,
            budget,
            best_score: best.map(|b| b.0),
            evals_to_best: best.map(|b| b.1),
            wall_time_ms: 0.0,
            trace,
            failure,
        }
    }

    fn from_run(strategy: Strategy, objective: &str, seed: u64, budget: usize, result: &RunResult) -> Self {
        let mut incumbent: Option<f64> = None;
        let trace = result
            .evaluations()
            .iter()
            .map(|r| {
                if let Some(s) = r.score {
                    incumbent = Some(incumbent.map_or(s, |b: f64| b.min(s)));
                }
                TracePoint {
                    eval_index: r.eval_index,
                    score: r.score,
                    incumbent_best: incumbent,
                    selected_family: result.selected_for(r).map_or("none", |s| s.family).to_string(),
                    batch_role: r.role.to_string(),
                }
            })
            .collect();
        Self::from_trace(strategy, objective.to_string(), seed, budget, trace, None)
    }

    pub fn is_failed(&self) -> bool {
        self.failure.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkTable {
    pub rows: Vec<BenchmarkRow>,
}

/// A benchmark row together with the full run that produced it.
pub struct BenchmarkCell {
    pub row: BenchmarkRow,
    pub run: Option<RunResult>,
}

/// Run every (strategy, seed) pair, cells in parallel, and return them in
/// canonical order: strategies as given, seeds as given within each.
pub fn run_benchmark_cells<O: Objective + ?Sized>(
    strategies: &[Strategy],
    objective: &O,
    space: &ConfigSpace,
    budget: usize,
    seeds: &[u64],
    options: &OptimizerOptions,
    pool: &[SurrogateSpec],
) -> Result<Vec<BenchmarkCell>, HarnessError> {
    if strategies.is_empty() || seeds.is_empty() {
        return Err(HarnessError::EmptyGrid);
    }
    let grid: Vec<(Strategy, u64)> = strategies
        .iter()
        .flat_map(|&s| seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let cells = grid
        .par_iter()
        .map(|&(strategy, seed)| {
            let start = Instant::now();
            let outcome = run(
                objective,
                space,
                &strategy.policy(pool),
                BudgetPolicy {
                    max_engine_evals: budget,
                },
                options,
                seed,
            );
            let wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
            let (mut row, run) = match outcome {
                Ok(result) => (
                    BenchmarkRow::from_run(strategy, objective.name(), seed, budget, &result),
                    Some(result),
                ),
                Err(e) => {
                    log::warn!("{strategy} seed {seed} failed: {e}");
                    (
                        BenchmarkRow::from_trace(
                            strategy,
                            objective.name().to_string(),
                            seed,
                            budget,
                            Vec::new(),
                            Some(e.to_string()),
                        ),
                        None,
                    )
                }
            };
            row.wall_time_ms = wall_time_ms;
            BenchmarkCell { row, run }
        })
        .collect();
    Ok(cells)
}

pub fn run_benchmark<O: Objective + ?Sized>(
    strategies: &[Strategy],
    objective: &O,
    space: &ConfigSpace,
    budget: usize,
    seeds: &[u64],
    options: &OptimizerOptions,
    pool: &[SurrogateSpec],
) -> Result<BenchmarkTable, HarnessError> {
    let cells = run_benchmark_cells(strategies, objective, space, budget, seeds, options, pool)?;
    Ok(BenchmarkTable {
        rows: cells.into_iter().map(|c| c.row).collect(),
    })
}

const HEADER: [&str; 9] = [
    "strategy",
    "objective",
    "seed",
    "budget",
    "eval_index",
    "score",
    "incumbent_best",
    "selected_family",
    "batch_role",
];

const FAILED_ROLE: &str = "failed";

fn opt_f64(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

impl BenchmarkTable {
    pub fn rows_for(&self, strategy: Strategy) -> impl Iterator<Item = &BenchmarkRow> {
        self.rows.iter().filter(move |r| r.strategy == strategy)
    }

    /// Lower median of the best scores of the non-failed rows of `strategy`.
    pub fn median_best(&self, strategy: Strategy) -> Option<f64> {
        let scores: Vec<f64> = self.rows_for(strategy).filter_map(|r| r.best_score).collect();
        quantile(&scores, 0.5)
    }

    /// One line per evaluation; an aborted cell is a single line with
    /// `batch_role=failed` and the error message under `selected_family`.
    pub fn to_csv_string(&self) -> Result<String, HarnessError> {
        if self.rows.is_empty() {
            return Err(HarnessError::EmptyTable);
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(HEADER)?;
        for row in &self.rows {
            let lead = [
                row.strategy.to_string(),
                row.objective.clone(),
                row.seed.to_string(),
                row.budget.to_string(),
            ];
            if let Some(msg) = &row.failure {
                let tail = [
                    String::new(),
                    String::new(),
                    String::new(),
                    msg.clone(),
                    FAILED_ROLE.into(),
                ];
                w.write_record(lead.iter().chain(&tail))?;
                continue;
            }
            for p in &row.trace {
                let tail = [
                    p.eval_index.to_string(),
                    opt_f64(p.score),
                    opt_f64(p.incumbent_best),
                    p.selected_family.clone(),
                    p.batch_role.clone(),
                ];
                w.write_record(lead.iter().chain(&tail))?;
            }
        }
        let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
    }

    pub fn from_csv_str(text: &str) -> Result<Self, HarnessError> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        if header != HEADER {
            return Err(HarnessError::Malformed {
                record: 0,
                message: format!("expected header {}", HEADER.join(",")),
            });
        }
        let mut rows: Vec<BenchmarkRow> = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let record = i + 1;
            let bad = |message: String| HarnessError::Malformed { record, message };
            let field = |j: usize| rec.get(j).unwrap_or("");
            let opt = |j: usize| -> Result<Option<f64>, HarnessError> {
                match field(j) {
                    "" => Ok(None),
                    s => s.parse().map(Some).map_err(|_| bad(format!("bad number `{s}`"))),
                }
            };
            let strategy: Strategy = field(0).parse()?;
            let objective = field(1).to_string();
            let seed: u64 = field(2).parse().map_err(|_| bad("bad seed".into()))?;
            let budget: usize = field(3).parse().map_err(|_| bad("bad budget".into()))?;
            if field(8) == FAILED_ROLE {
                rows.push(BenchmarkRow::from_trace(
                    strategy,
                    objective,
                    seed,
                    budget,
                    Vec::new(),
                    Some(field(7).to_string()),
                ));
                continue;
            }
            let point = TracePoint {
                eval_index: field(4).parse().map_err(|_| bad("bad eval_index".into()))?,
                score: opt(5)?,
                incumbent_best: opt(6)?,
                selected_family: field(7).to_string(),
                batch_role: field(8).to_string(),
            };
            let continues = rows.last().is_some_and(|r| {
                r.failure.is_none()
                    && r.strategy == strategy
                    && r.objective == objective
                    && r.seed == seed
                    && r.budget == budget
            });
            if continues {
                rows.last_mut().expect("checked").trace.push(point);
            } else {
                rows.push(BenchmarkRow::from_trace(
                    strategy,
                    objective,
                    seed,
                    budget,
                    vec![point],
                    None,
                ));
            }
        }
        // best_score / evals_to_best derive from the completed traces
        let rows = rows
            .into_iter()
            .map(|r| BenchmarkRow::from_trace(r.strategy, r.objective, r.seed, r.budget, r.trace, r.failure))
            .collect();
        Ok(Self { rows })
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut keys: Vec<(Strategy, String)> = Vec::new();
        for r in &self.rows {
            let key = (r.strategy, r.objective.clone());
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        keys.into_iter()
            .map(|(strategy, objective)| {
                let ok: Vec<&BenchmarkRow> = self
                    .rows
                    .iter()
                    .filter(|r| r.strategy == strategy && r.objective == objective && !r.is_failed())
                    .collect();
                let best: Vec<f64> = ok.iter().filter_map(|r| r.best_score).collect();
                let evals: Vec<f64> = ok.iter().filter_map(|r| r.evals_to_best.map(|e| e as f64)).collect();
                SummaryRow {
                    strategy,
                    objective,
                    median_best: quantile(&best, 0.5),
                    iqr_best: quantile(&best, 0.75).zip(quantile(&best, 0.25)).map(|(hi, lo)| hi - lo),
                    median_evals_to_best: quantile(&evals, 0.5),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub strategy: Strategy,
    pub objective: String,
    pub median_best: Option<f64>,
    pub iqr_best: Option<f64>,
    pub median_evals_to_best: Option<f64>,
}

/// `sorted[floor(p * (n - 1))]`; at p = 0.5 this is the lower median.
pub fn quantile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(sorted[(p * (sorted.len() - 1) as f64).floor() as usize])
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "strategy",
        "objective",
        "median_best",
        "iqr_best",
        "median_evals_to_best",
    ])
    .expect("in-memory write");
    for r in rows {
        w.write_record([
            r.strategy.to_string(),
            r.objective.clone(),
            opt_f64(r.median_best),
            opt_f64(r.iqr_best),
            opt_f64(r.median_evals_to_best),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{Evaluation, ObjectiveError};
    use crate::space::Configuration;
    use crate::surrogates::default_pool;
    use crate::synthetic::SyntheticObjective;

    fn small_options() -> OptimizerOptions {
        OptimizerOptions {
            candidate_batch_size: 64,
            candidate_batches: 2,
            ..OptimizerOptions::default()
        }
    }

    fn branin_table(strategies: &[Strategy], seeds: &[u64]) -> BenchmarkTable {
        let obj = SyntheticObjective::branin();
        run_benchmark(
            strategies,
            &obj,
            obj.space(),
            16,
            seeds,
            &small_options(),
            &default_pool(),
        )
        .unwrap()
    }

    #[test]
    fn random_rows_have_monotone_traces() {
        let t = branin_table(&[Strategy::Random], &[1, 2, 3]);
        assert_eq!(t.rows.len(), 3);
        for row in &t.rows {
            assert_eq!(row.trace.len(), 16);
            let inc: Vec<f64> = row.trace.iter().map(|p| p.incumbent_best.unwrap()).collect();
            assert!(inc.windows(2).all(|w| w[1] <= w[0]));
            assert_eq!(row.best_score, inc.last().copied());
        }
    }

    #[test]
    fn rows_follow_canonical_order_and_repeat() {
        let strategies = [Strategy::Random, Strategy::FixedGp];
        let a = branin_table(&strategies, &[5, 4]);
        let order: Vec<(Strategy, u64)> = a.rows.iter().map(|r| (r.strategy, r.seed)).collect();
        assert_eq!(
            order,
            vec![
                (Strategy::Random, 5),
                (Strategy::Random, 4),
                (Strategy::FixedGp, 5),
                (Strategy::FixedGp, 4)
            ]
        );
        assert_eq!(a, branin_table(&strategies, &[5, 4]));
    }

    #[test]
    fn strategies_share_the_initial_design() {
        let t = branin_table(&[Strategy::Dss, Strategy::Random, Strategy::FixedRf], &[9]);
        let n_init = 8;
        let init = |r: &BenchmarkRow| -> Vec<Option<f64>> { r.trace[..n_init].iter().map(|p| p.score).collect() };
        assert_eq!(init(&t.rows[0]), init(&t.rows[1]));
        assert_eq!(init(&t.rows[0]), init(&t.rows[2]));
        assert!(t.rows[0].trace[..n_init].iter().all(|p| p.batch_role == "init"));
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let mut t = branin_table(&[Strategy::Dss, Strategy::Random], &[1, 2]);
        t.rows[1].failure = Some("engine exploded, badly".into());
        t.rows[1].trace.clear();
        t.rows[1].best_score = None;
        t.rows[1].evals_to_best = None;
        let text = t.to_csv_string().unwrap();
        assert_eq!(BenchmarkTable::from_csv_str(&text).unwrap(), t);
    }

    #[test]
    fn one_row_csv_has_header_plus_its_trace() {
        let mut t = branin_table(&[Strategy::Random], &[1]);
        t.rows[0].trace.truncate(1);
        let text = t.to_csv_string().unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(text.lines().next().unwrap(), HEADER.join(","));
    }

    #[test]
    fn empty_table_is_rejected() {
        assert!(matches!(
            BenchmarkTable { rows: vec![] }.to_csv_string(),
            Err(HarnessError::EmptyTable)
        ));
    }

    #[test]
    fn empty_grid_is_rejected() {
        let obj = SyntheticObjective::branin();
        let r = run_benchmark(&[], &obj, obj.space(), 16, &[1], &small_options(), &default_pool());
        assert!(matches!(r, Err(HarnessError::EmptyGrid)));
    }

    struct Broken(ConfigSpace);

    impl Objective for Broken {
        fn name(&self) -> &str {
            "broken"
        }
        fn space(&self) -> &ConfigSpace {
            &self.0
        }
        fn evaluate(&self, _: &Configuration, _: u64) -> Result<Evaluation, ObjectiveError> {
            Err(ObjectiveError("always fails".into()))
        }
    }

    #[test]
    fn failed_cells_are_marked_not_fatal() {
        let obj = Broken(SyntheticObjective::branin().space().clone());
        let t = run_benchmark(
            &[Strategy::Random],
            &obj,
            &obj.0,
            16,
            &[1, 2],
            &small_options(),
            &default_pool(),
        )
        .unwrap();
        assert_eq!(t.rows.len(), 2);
        assert!(t.rows.iter().all(BenchmarkRow::is_failed));
        assert_eq!(t.median_best(Strategy::Random), None);
    }

    #[test]
    fn quantiles_use_lower_index() {
        assert_eq!(quantile(&[4.0, 1.0, 3.0, 2.0], 0.5), Some(2.0));
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), Some(2.0));
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.75), Some(4.0));
        assert_eq!(quantile(&[], 0.5), None);
    }

    #[test]
    fn summary_aggregates_per_strategy() {
        let t = branin_table(&[Strategy::Random, Strategy::Dss], &[1, 2, 3]);
        let s = t.summary();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].strategy, Strategy::Random);
        assert_eq!(s[0].median_best, t.median_best(Strategy::Random));
        assert!(s[0].iqr_best.unwrap() >= 0.0);
        let csv = summary_csv(&s);
        assert!(csv.starts_with("strategy,objective,median_best,iqr_best,median_evals_to_best\n"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn strategy_names_parse() {
        assert_eq!(
            Strategy::parse_list("dss, random,fixed_gbm").unwrap(),
            vec![Strategy::Dss, Strategy::Random, Strategy::FixedGbm]
        );
        assert!(Strategy::parse_list("dss,bogus").is_err());
    }
}
