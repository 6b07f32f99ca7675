//! `dss` command line: optimize, benchmark, landscape, gen-data, report.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use log::info;

use crate::ffm::{generate_ctr_data, parse_dataset, Dataset, FfmObjective};
use crate::harness::{run_benchmark, summary_csv, BenchmarkTable, Strategy};
use crate::objective::Objective;
use crate::optimizer::{initial_design_size, run, trace_csv, BudgetPolicy, OptimizerOptions};
use crate::space::ConfigSpace;
use crate::surrogates::{default_pool, parse_pool, SurrogateSpec};
use crate::synthetic::{landscape_csv, GridSurface, SyntheticObjective};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "dss",
    version,
    about = "Hyperparameter optimization by dynamic surrogate switching"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one search and write its per-evaluation trace CSV.
    Optimize(OptimizeArgs),
    /// Compare strategies over several seeds under one budget.
    Benchmark(BenchmarkArgs),
    /// Export a 2-D objective on a grid as x1,x2,value rows.
    Landscape(LandscapeArgs),
    /// Write synthetic CTR data (train.ffm, valid.ffm) in libffm format.
    GenData(GenDataArgs),
    /// Summarize a benchmark CSV per strategy.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct ObjectiveArgs {
    /// branin, styblinski, ffm, or grid:PATH (a x1,x2,value CSV).
    #[arg(long, default_value = "branin")]
    pub objective: String,
    /// Search space JSON; defaults to the objective's own space.
    #[arg(long, value_name = "PATH")]
    pub space: Option<PathBuf>,
    /// ffm only: directory holding train.ffm and valid.ffm. Without it, data
    /// is generated in memory with the gen-data defaults.
    #[arg(long, value_name = "PATH")]
    pub data_dir: Option<PathBuf>,
    /// ffm only: generator seed used when --data-dir is absent.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    /// Engine evaluations per run [default: 40 synthetic, 20 ffm].
    #[arg(long)]
    pub budget: Option<usize>,
    /// Evaluations proposed per iteration.
    #[arg(long, default_value_t = 4)]
    pub parallel_slots: usize,
    /// Threads evaluating a batch; results do not depend on it [default: all cores].
    #[arg(long)]
    pub workers: Option<usize>,
    /// Share of each batch taken from the top-ranked candidates.
    #[arg(long, default_value_t = 0.75)]
    pub exploit_fraction: f64,
    /// Cross-validation folds for surrogate selection.
    #[arg(long = "k", default_value_t = 3)]
    pub k: usize,
    /// Cells per dimension in the exploration memory.
    #[arg(long, default_value_t = 16)]
    pub resolution: usize,
    /// Surrogate pool JSON [default: the built-in 14-spec pool].
    #[arg(long, value_name = "PATH")]
    pub pool: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[command(flatten)]
    pub objective: ObjectiveArgs,
    #[command(flatten)]
    pub search: SearchArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// dss, fixed_rf, fixed_gp, fixed_gbm or random.
    #[arg(long, default_value = "dss")]
    pub strategy: String,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Also write the visited exploration cells as CSV.
    #[arg(long, value_name = "PATH")]
    pub dump_memory: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[command(flatten)]
    pub objective: ObjectiveArgs,
    #[command(flatten)]
    pub search: SearchArgs,
    /// Comma-separated strategies.
    #[arg(long, default_value = "dss,fixed_rf,fixed_gp,fixed_gbm,random")]
    pub strategy: String,
    /// Comma-separated seeds; `a-b` expands to an inclusive range.
    #[arg(long, default_value = "1-10")]
    pub seeds: String,
    /// Benchmark table CSV.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Also write the per-strategy summary CSV.
    #[arg(long, value_name = "PATH")]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LandscapeArgs {
    /// branin, styblinski or grid:PATH.
    #[arg(long, default_value = "branin")]
    pub objective: String,
    /// Grid points per axis.
    #[arg(long, default_value_t = 101)]
    pub resolution: usize,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Training instances.
    #[arg(long, default_value_t = 50_000)]
    pub train: usize,
    /// Validation instances.
    #[arg(long, default_value_t = 10_000)]
    pub valid: usize,
    #[arg(long, default_value_t = 5)]
    pub fields: usize,
    #[arg(long, default_value_t = 20)]
    pub features_per_field: usize,
    /// Standard deviation of the logit noise.
    #[arg(long, default_value_t = 0.5)]
    pub noise: f64,
    #[arg(long, value_name = "PATH")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Benchmark CSV written by `benchmark`.
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
    /// Summary CSV destination [default: stdout].
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

fn usage<T>(msg: impl Into<String>) -> Result<T, CliError> {
    Err(CliError::Usage(msg.into()))
}

/// Parse `argv`, run the subcommand, return the process exit code.
pub fn main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("DSS_LOG", "error"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Optimize(a) => optimize(a),
        Command::Benchmark(a) => benchmark(a),
        Command::Landscape(a) => landscape(a),
        Command::GenData(a) => gen_data(a),
        Command::Report(a) => report(a),
    }
}

/// Write through a temporary file in the destination directory, then rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> anyhow::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).with_context(|| format!("temp file in {}", dir.display()))?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .map_err(|e| anyhow!(e.error))
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(CliError::Runtime)
}

enum Target {
    Synthetic(SyntheticObjective),
    Ffm(FfmObjective),
}

impl Target {
    fn objective(&self) -> &dyn Objective {
        match self {
            Target::Synthetic(o) => o,
            Target::Ffm(o) => o,
        }
    }

    fn default_budget(&self) -> usize {
        match self {
            Target::Synthetic(_) => 40,
            Target::Ffm(_) => 20,
        }
    }
}

fn synthetic_objective(name: &str) -> Result<SyntheticObjective, CliError> {
    if let Some(path) = name.strip_prefix("grid:") {
        let text = read_text(Path::new(path))?;
        let surface = GridSurface::from_csv(&text)
            .with_context(|| format!("loading grid {path}"))
            .map_err(CliError::Runtime)?;
        return Ok(SyntheticObjective::interpolated_grid(surface));
    }
    match name {
        "branin" => Ok(SyntheticObjective::branin()),
        "styblinski" | "styblinski_tang_2d" => Ok(SyntheticObjective::styblinski_tang_2d()),
        other => usage(format!(
            "unknown objective `{other}` (expected branin, styblinski, ffm or grid:PATH)"
        )),
    }
}

fn load_ffm_data(args: &ObjectiveArgs) -> Result<(Dataset, Dataset), CliError> {
    match &args.data_dir {
        Some(dir) => {
            let load = |file: &str| -> Result<Dataset, CliError> {
                let path = dir.join(file);
                parse_dataset(&read_text(&path)?)
                    .with_context(|| format!("parsing {}", path.display()))
                    .map_err(CliError::Runtime)
            };
            Ok((load("train.ffm")?, load("valid.ffm")?))
        }
        None => {
            let d = generate_ctr_data(args.data_seed, 50_000, 10_000, 5, 20, 0.5);
            Ok((d.train, d.valid))
        }
    }
}

/// Objective, search space and the pool embedded in the space file, if any.
fn load_target(args: &ObjectiveArgs) -> Result<(Target, ConfigSpace, Option<Vec<SurrogateSpec>>), CliError> {
    let space_file = match &args.space {
        Some(path) => {
            let text = read_text(path)?;
            let space =
                ConfigSpace::from_json_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            let value: serde_json::Value = serde_json::from_str(&text).expect("already parsed");
            let pool = match value.get("pool") {
                Some(_) => Some(parse_pool(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?),
                None => None,
            };
            Some((space, pool))
        }
        None => None,
    };
    let target = if args.objective == "ffm" {
        let (train, valid) = load_ffm_data(args)?;
        match &space_file {
            Some((space, _)) => Target::Ffm(
                FfmObjective::with_space(train, valid, space.clone()).map_err(|e| CliError::Usage(e.to_string()))?,
            ),
            None => Target::Ffm(FfmObjective::new(train, valid)),
        }
    } else {
        Target::Synthetic(synthetic_objective(&args.objective)?)
    };
    let (space, pool) = match space_file {
        Some((space, pool)) => {
            if let Target::Synthetic(obj) = &target {
                let names = |s: &ConfigSpace| s.params().iter().map(|p| p.name.clone()).collect::<Vec<_>>();
                if names(&space) != names(obj.space()) {
                    return usage(format!(
                        "space parameters {:?} do not match objective `{}` parameters {:?}",
                        names(&space),
                        obj.name(),
                        names(obj.space())
                    ));
                }
            }
            (space, pool)
        }
        None => (target.objective().space().clone(), None),
    };
    Ok((target, space, pool))
}

fn search_setup(
    args: &SearchArgs,
    target: &Target,
    space: &ConfigSpace,
    embedded_pool: Option<Vec<SurrogateSpec>>,
) -> Result<(usize, OptimizerOptions, Vec<SurrogateSpec>), CliError> {
    let options = OptimizerOptions {
        parallel_slots: args.parallel_slots,
        workers: args.workers,
        exploit_fraction: args.exploit_fraction,
        folds: args.k,
        resolution: args.resolution,
        ..OptimizerOptions::default()
    };
    options.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let budget = args.budget.unwrap_or_else(|| target.default_budget());
    let n_init = initial_design_size(space);
    if budget < n_init {
        return usage(format!("--budget {budget} is below the initial design size {n_init}"));
    }
    let pool = match &args.pool {
        Some(path) => parse_pool(&read_text(path)?).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?,
        None => embedded_pool.unwrap_or_else(default_pool),
    };
    if pool.is_empty() {
        return usage("surrogate pool is empty");
    }
    Ok((budget, options, pool))
}

fn optimize(a: OptimizeArgs) -> Result<(), CliError> {
    let strategy: Strategy = a
        .strategy
        .parse()
        .map_err(|e: crate::harness::HarnessError| CliError::Usage(e.to_string()))?;
    let (target, space, embedded) = load_target(&a.objective)?;
    let (budget, options, pool) = search_setup(&a.search, &target, &space, embedded)?;
    let result = run(
        target.objective(),
        &space,
        &strategy.policy(&pool),
        BudgetPolicy {
            max_engine_evals: budget,
        },
        &options,
        a.seed,
    )
    .context("optimization failed")?;
    write_atomic(&a.out, trace_csv(&result).as_bytes())?;
    if let Some(path) = &a.dump_memory {
        write_atomic(path, result.memory.to_csv(&space).as_bytes())?;
    }
    let config: Vec<String> = space
        .params()
        .iter()
        .zip(&result.best.config.values)
        .map(|(p, v)| format!("{}={v}", p.name))
        .collect();
    println!(
        "best score {} at evaluation {} ({}); {} evaluations written to {}",
        result.best.score.expect("best record is valid"),
        result.best.eval_index,
        config.join(", "),
        result.evaluations().len(),
        a.out.display()
    );
    Ok(())
}

/// `1,2,5-8` style seed lists.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>, String> {
    let mut seeds = Vec::new();
    for part in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let num = |s: &str| s.trim().parse::<u64>().map_err(|_| format!("bad seed `{s}`"));
        match part.split_once('-') {
            Some((lo, hi)) => {
                let (lo, hi) = (num(lo)?, num(hi)?);
                if lo > hi {
                    return Err(format!("empty seed range `{part}`"));
                }
                seeds.extend(lo..=hi);
            }
            None => seeds.push(num(part)?),
        }
    }
    if seeds.is_empty() {
        return Err("no seeds given".into());
    }
    Ok(seeds)
}

fn benchmark(a: BenchmarkArgs) -> Result<(), CliError> {
    let strategies = Strategy::parse_list(&a.strategy).map_err(|e| CliError::Usage(e.to_string()))?;
    if strategies.is_empty() {
        return usage("no strategies given");
    }
    let seeds = parse_seeds(&a.seeds).map_err(CliError::Usage)?;
    let (target, space, embedded) = load_target(&a.objective)?;
    let (budget, options, pool) = search_setup(&a.search, &target, &space, embedded)?;
    info!(
        "benchmark: {} strategies x {} seeds, budget {budget}",
        strategies.len(),
        seeds.len()
    );
    let table = run_benchmark(&strategies, target.objective(), &space, budget, &seeds, &options, &pool)
        .context("benchmark failed")?;
    write_atomic(&a.out, table.to_csv_string().context("exporting table")?.as_bytes())?;
    let summary = summary_csv(&table.summary());
    if let Some(path) = &a.summary {
        write_atomic(path, summary.as_bytes())?;
    }
    print!("{summary}");
    Ok(())
}

fn landscape(a: LandscapeArgs) -> Result<(), CliError> {
    if a.objective == "ffm" {
        return usage("landscape needs a 2-D synthetic objective (branin, styblinski or grid:PATH)");
    }
    if a.resolution < 2 {
        return usage("--resolution must be >= 2");
    }
    let obj = synthetic_objective(&a.objective)?;
    let csv = landscape_csv(&obj, a.resolution).context("building landscape")?;
    write_atomic(&a.out, csv.as_bytes())?;
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<(), CliError> {
    if a.train < 1 || a.valid < 1 || a.fields < 1 || a.features_per_field < 1 {
        return usage("--train, --valid, --fields and --features-per-field must be >= 1");
    }
    if !(a.noise >= 0.0 && a.noise.is_finite()) {
        return usage("--noise must be a finite value >= 0");
    }
    let data = generate_ctr_data(a.seed, a.train, a.valid, a.fields, a.features_per_field, a.noise);
    write_atomic(&a.out_dir.join("train.ffm"), data.train.to_libffm().as_bytes())?;
    write_atomic(&a.out_dir.join("valid.ffm"), data.valid.to_libffm().as_bytes())?;
    println!(
        "wrote {} training and {} validation instances to {} (positive rate {:.4})",
        a.train,
        a.valid,
        a.out_dir.display(),
        data.train.positive_rate()
    );
    Ok(())
}

fn report(a: ReportArgs) -> Result<(), CliError> {
    let table = BenchmarkTable::from_csv_str(&read_text(&a.input)?)
        .with_context(|| format!("reading {}", a.input.display()))?;
    let summary = summary_csv(&table.summary());
    match &a.out {
        Some(path) => write_atomic(path, summary.as_bytes())?,
        None => print!("{summary}"),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("1-3,7").unwrap(), vec![1, 2, 3, 7]);
        assert_eq!(parse_seeds(" 4 ").unwrap(), vec![4]);
        assert!(parse_seeds("3-1").is_err());
        assert!(parse_seeds("x").is_err());
        assert!(parse_seeds("").is_err());
    }

    #[test]
    fn help_shows_defaults() {
        let mut cmd = Cli::command();
        let help = cmd
            .find_subcommand_mut("optimize")
            .unwrap()
            .render_long_help()
            .to_string();
        for needle in [
            "--parallel-slots <PARALLEL_SLOTS>",
            "[default: 4]",
            "[default: 0.75]",
            "[default: 3]",
            "[default: 16]",
            "[default: 40 synthetic, 20 ffm]",
        ] {
            assert!(help.contains(needle), "missing `{needle}` in\n{help}");
        }
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(main(["dss", "optimize", "--bogus"]), EXIT_USAGE);
        assert_eq!(main(["dss"]), EXIT_USAGE);
        assert_eq!(main(["dss", "--help"]), 0);
    }
}
