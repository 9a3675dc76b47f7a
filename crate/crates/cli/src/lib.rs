//! Command-line front end: `expo norms | merge | expo | search | sweep | lab`.
//!
//! Results meant for scripts go to stdout, diagnostics to stderr. Exit codes:
//! 0 success, 1 usage or configuration error, 2 evaluator failure, 3 data,
//! format or compatibility error.

mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use expo_core::alpha_search::{
    self, run_search, CheckpointObjective, EvaluatorSpec, Outcome, SearchAbort, SearchConfig,
    SearchError, SearchTrace, Strategy, TraceRecorder,
};
use expo_core::model_arith::{
    lincomb_checkpoint, norm_report, ArithError, CastPolicy, MergeMode, MergeSpec, MergeSummary,
};
use expo_core::synthetic_lab::{run_experiment, Experiment, LabError, LabSettings};
use expo_core::tensor_store::{Checkpoint, StoreError};

pub use config::expand_config;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_EVALUATOR: i32 = 2;
pub const EXIT_DATA: i32 = 3;

/// Default work directory when neither `--workdir` nor `EXPO_WORKDIR` is set.
pub const DEFAULT_WORKDIR: &str = "./expo-work";

#[derive(Debug, Parser)]
#[command(
    name = "expo",
    version,
    about = "Checkpoint delta arithmetic and extrapolation search"
)]
struct Cli {
    /// Worker threads for parallel evaluation and lab seeds.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    /// JSON object of flag values; explicit flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Per-tensor and global Frobenius norms of A - B.
    Norms(NormsArgs),
    /// Linear combination of two checkpoints.
    Merge(MergeArgs),
    /// tuned + alpha * (tuned - base).
    Expo(ExpoArgs),
    /// Search for the best extrapolation coefficient.
    Search(SearchArgs),
    /// Score a fixed list of coefficients.
    Sweep(SweepArgs),
    /// Run a synthetic lab experiment.
    Lab(LabArgs),
}

#[derive(Debug, Args)]
struct NormsArgs {
    #[arg(long, value_name = "CKPT")]
    a: PathBuf,
    #[arg(long, value_name = "CKPT")]
    b: PathBuf,
    /// CSV path; the aggregate JSON goes next to it with a .json extension.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Cast {
    Preserve,
    F32,
}

impl From<Cast> for CastPolicy {
    fn from(c: Cast) -> Self {
        match c {
            Cast::Preserve => CastPolicy::PreserveInput,
            Cast::F32 => CastPolicy::ForceF32,
        }
    }
}

#[derive(Debug, Args)]
struct MergeArgs {
    #[arg(long, value_name = "CKPT")]
    base: PathBuf,
    #[arg(long, value_name = "CKPT")]
    tuned: PathBuf,
    #[arg(long, allow_negative_numbers = true, conflicts_with_all = ["alpha", "c0", "c1"])]
    gamma: Option<f64>,
    #[arg(long, allow_negative_numbers = true, conflicts_with_all = ["c0", "c1"])]
    alpha: Option<f64>,
    #[arg(long, allow_negative_numbers = true, requires = "c1")]
    c0: Option<f64>,
    #[arg(long, allow_negative_numbers = true, requires = "c0")]
    c1: Option<f64>,
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "preserve")]
    cast: Cast,
}

#[derive(Debug, Args)]
struct ExpoArgs {
    #[arg(long, value_name = "CKPT")]
    base: PathBuf,
    #[arg(long, value_name = "CKPT")]
    tuned: PathBuf,
    #[arg(long, allow_negative_numbers = true)]
    alpha: f64,
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "preserve")]
    cast: Cast,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, value_name = "CKPT")]
    base: PathBuf,
    #[arg(long, value_name = "CKPT")]
    tuned: PathBuf,
    /// Shell command containing `{candidate}`; prints the score last.
    #[arg(long, value_name = "TEMPLATE")]
    evaluator_cmd: Option<String>,
    /// JSON lines of `{"alpha": .., "score": ..}`.
    #[arg(long, value_name = "FILE")]
    scores_file: Option<PathBuf>,
    /// `quadratic` or `lab-reward`.
    #[arg(long, value_name = "NAME")]
    builtin: Option<String>,
    /// Builtin evaluator parameter, repeatable.
    #[arg(long = "param", value_name = "KEY=VALUE")]
    params: Vec<String>,
    /// Seconds before an evaluator command is killed.
    #[arg(long, value_name = "SECS")]
    timeout: Option<f64>,
    /// Where candidate checkpoints are written [env: EXPO_WORKDIR].
    #[arg(long, value_name = "DIR")]
    workdir: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "preserve")]
    cast: Cast,
}

#[derive(Debug, Args)]
struct SearchArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// Grid range `lo:hi` or `lo:hi:interval`.
    #[arg(long, value_name = "LO:HI", conflicts_with = "adaptive")]
    range: Option<String>,
    #[arg(long)]
    interval: Option<f64>,
    #[arg(long)]
    adaptive: bool,
    #[arg(long, default_value_t = 1.0)]
    initial_interval: f64,
    #[arg(long, default_value_t = 0.1)]
    min_interval: f64,
    /// Evaluation budget, baseline included.
    #[arg(long, default_value_t = 20)]
    max_evals: usize,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    threshold: f64,
    #[arg(long, default_value_t = 0.1)]
    min_probe: f64,
    /// Trace file; defaults to `trace.json` in the work directory.
    #[arg(long, value_name = "FILE")]
    trace: Option<PathBuf>,
    /// Reuse scores already recorded in the trace file.
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// Comma-separated coefficients; the baseline 0 is always included.
    #[arg(
        long,
        value_delimiter = ',',
        required = true,
        allow_negative_numbers = true
    )]
    alphas: Vec<f64>,
    /// Curve CSV; a JSON copy goes next to it.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct LabArgs {
    /// varying-steps, bias, optimizers or interpolation.
    #[arg(long)]
    experiment: String,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Full-run training steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    n_pairs: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
}

/// An error with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<ArithError> for CliError {
    fn from(e: ArithError) -> Self {
        let code = match e {
            ArithError::InvalidSpec(_) => EXIT_USAGE,
            _ => EXIT_DATA,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<SearchError> for CliError {
    fn from(e: SearchError) -> Self {
        match e {
            SearchError::Arith(a) => a.into(),
            SearchError::InvalidConfig(_) => CliError::usage(e.to_string()),
            SearchError::Evaluator { .. } => Self {
                code: EXIT_EVALUATOR,
                message: e.to_string(),
            },
            SearchError::Trace { .. } => CliError::data(e.to_string()),
        }
    }
}

impl From<LabError> for CliError {
    fn from(e: LabError) -> Self {
        match e {
            LabError::Search(s) => s.into(),
            LabError::InvalidWorld(_) | LabError::InvalidConfig(_) => {
                CliError::usage(e.to_string())
            }
            LabError::Diverged { .. } => CliError::data(e.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let command = Cli::command()
        .args_override_self(true)
        .mut_subcommands(|s| s.args_override_self(true));
    let cli = match command
        .try_get_matches_from(args)
        .and_then(|m| Cli::from_arg_matches(&m))
    {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

fn dispatch(cli: Cli) -> CliResult {
    let jobs = match cli.jobs {
        Some(0) => return Err(CliError::usage("--jobs must be at least 1")),
        Some(n) => n,
        None => 1,
    };
    if cli.jobs.is_some() {
        // Ignore the error if a pool already exists (repeated in-process runs).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    match cli.command {
        Command::Norms(a) => norms(a),
        Command::Merge(a) => merge(a),
        Command::Expo(a) => expo(a),
        Command::Search(a) => search(a, jobs),
        Command::Sweep(a) => sweep(a, jobs),
        Command::Lab(a) => lab(a),
    }
}

fn open(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::open(path).map_err(|e| store_error(path, e))
}

fn store_error(path: &Path, e: StoreError) -> CliError {
    CliError::data(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, contents)
        .map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

fn json_sibling(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn norms(args: NormsArgs) -> CliResult {
    if args.out.extension().is_some_and(|e| e == "json") {
        return Err(CliError::usage(
            "--out names the CSV file, not the .json aggregate",
        ));
    }
    let a = open(&args.a)?;
    let b = open(&args.b)?;
    let report = norm_report(&a, &b)?;
    write_file(&args.out, report.to_csv())?;
    let aggregate = report.aggregate_json();
    let text = serde_json::to_string_pretty(&aggregate).expect("aggregate serializes");
    write_file(&json_sibling(&args.out), text)?;
    println!("{aggregate}");
    Ok(())
}

fn merge_mode(args: &MergeArgs) -> CliResult<MergeMode> {
    match (args.gamma, args.alpha, args.c0, args.c1) {
        (Some(gamma), None, None, None) => Ok(MergeMode::Interpolate { gamma }),
        (None, Some(alpha), None, None) => Ok(MergeMode::Extrapolate { alpha }),
        (None, None, Some(c0), Some(c1)) => Ok(MergeMode::LinComb { c0, c1 }),
        _ => Err(CliError::usage(
            "give exactly one of --gamma, --alpha or --c0 with --c1",
        )),
    }
}

fn run_merge(base: &Path, tuned: &Path, spec: &MergeSpec, out: &Path) -> CliResult<MergeSummary> {
    spec.validate()?;
    let base = open(base)?;
    let tuned = open(tuned)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))?;
    }
    Ok(lincomb_checkpoint(&base, &tuned, spec, out, None)?)
}

fn merge(args: MergeArgs) -> CliResult {
    let spec = MergeSpec::new(merge_mode(&args)?).with_cast(args.cast.into());
    let summary = run_merge(&args.base, &args.tuned, &spec, &args.out)?;
    println!(
        "{}",
        serde_json::to_string(&summary).expect("summary serializes")
    );
    Ok(())
}

fn expo(args: ExpoArgs) -> CliResult {
    let spec =
        MergeSpec::new(MergeMode::Extrapolate { alpha: args.alpha }).with_cast(args.cast.into());
    let summary = run_merge(&args.base, &args.tuned, &spec, &args.out)?;
    let line = serde_json::json!({
        "output": summary.output,
        "alpha": args.alpha,
        "tensors": summary.tensor_count,
        "elements": summary.element_count,
        "delta_frobenius": summary.delta_frobenius,
        "step_frobenius": args.alpha * summary.delta_frobenius,
    });
    println!("{line}");
    Ok(())
}

fn evaluator_spec(args: &EvalArgs) -> CliResult<EvaluatorSpec> {
    let given = [
        args.evaluator_cmd.is_some(),
        args.scores_file.is_some(),
        args.builtin.is_some(),
    ];
    if given.iter().filter(|&&g| g).count() != 1 {
        return Err(CliError::usage(
            "give exactly one of --evaluator-cmd, --scores-file or --builtin",
        ));
    }
    if !args.params.is_empty() && args.builtin.is_none() {
        return Err(CliError::usage(
            "--param only applies to --builtin evaluators",
        ));
    }
    if args.timeout.is_some() && args.evaluator_cmd.is_none() {
        return Err(CliError::usage("--timeout only applies to --evaluator-cmd"));
    }
    let spec = if let Some(template) = &args.evaluator_cmd {
        EvaluatorSpec::ExternalCommand {
            template: template.clone(),
            timeout_secs: args.timeout,
        }
    } else if let Some(path) = &args.scores_file {
        EvaluatorSpec::ScoreFile { path: path.clone() }
    } else {
        let name = args.builtin.as_deref().unwrap_or_default();
        let kind = alpha_search::BuiltinKind::parse(name).ok_or_else(|| {
            CliError::usage(format!(
                "unknown builtin evaluator {name:?} (expected quadratic or lab-reward)"
            ))
        })?;
        let mut params = BTreeMap::new();
        for p in &args.params {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("--param {p:?} is not KEY=VALUE")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| CliError::usage(format!("--param {k}: {v:?} is not a number")))?;
            params.insert(k.trim().replace('-', "_"), v);
        }
        EvaluatorSpec::Builtin { name: kind, params }
    };
    spec.validate()?;
    Ok(spec)
}

fn workdir(args: &EvalArgs) -> PathBuf {
    args.workdir
        .clone()
        .or_else(|| std::env::var_os("EXPO_WORKDIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_WORKDIR))
}

fn parse_range(range: &str, interval: Option<f64>) -> CliResult<Strategy> {
    let parts: Vec<&str> = range.split(':').collect();
    let num = |s: &str| -> CliResult<f64> {
        s.trim()
            .parse()
            .map_err(|_| CliError::usage(format!("--range {range:?}: {s:?} is not a number")))
    };
    let (lo, hi, step) = match parts.as_slice() {
        [lo, hi] => (num(lo)?, num(hi)?, None),
        [lo, hi, step] => (num(lo)?, num(hi)?, Some(num(step)?)),
        _ => {
            return Err(CliError::usage(format!(
                "--range {range:?} is not LO:HI[:INTERVAL]"
            )))
        }
    };
    let interval = match (step, interval) {
        (Some(a), Some(b)) if a != b => {
            return Err(CliError::usage("--range interval and --interval disagree"))
        }
        (Some(a), _) | (None, Some(a)) => a,
        (None, None) => return Err(CliError::usage("grid search needs --interval")),
    };
    Ok(Strategy::Grid { lo, hi, interval })
}

fn search_config(args: &SearchArgs, jobs: usize) -> CliResult<SearchConfig> {
    let strategy = match (&args.range, args.adaptive) {
        (Some(range), false) => parse_range(range, args.interval)?,
        (None, true) => Strategy::Adaptive {
            initial_interval: args.initial_interval,
            min_interval: args.min_interval,
            max_evaluations: args.max_evals,
        },
        _ => return Err(CliError::usage("give either --range or --adaptive")),
    };
    let config = SearchConfig::new(strategy)
        .with_threshold(args.threshold)
        .with_min_probe(args.min_probe)
        .with_jobs(jobs);
    config.validate()?;
    Ok(config)
}

fn outcome_line(trace: &SearchTrace) -> String {
    match &trace.outcome {
        Some(Outcome::Optimal { alpha, score }) => format!(
            "optimal alpha = {alpha} (score {score} over baseline {})",
            trace.baseline.unwrap_or(f64::NAN)
        ),
        _ => "no improvement".to_string(),
    }
}

fn search(args: SearchArgs, jobs: usize) -> CliResult {
    let spec = evaluator_spec(&args.eval)?;
    let config = search_config(&args, jobs)?;
    let workdir = workdir(&args.eval);
    let trace_path = args
        .trace
        .clone()
        .unwrap_or_else(|| workdir.join("trace.json"));
    let prior = if args.resume && trace_path.exists() {
        let prior = SearchTrace::read(&trace_path)?;
        if prior.config.strategy != config.strategy {
            return Err(CliError::usage(format!(
                "{} was recorded with a different search strategy",
                trace_path.display()
            )));
        }
        Some(prior)
    } else {
        None
    };
    let base = open(&args.eval.base)?;
    let tuned = open(&args.eval.tuned)?;
    let objective =
        CheckpointObjective::new(&base, &tuned, &spec, &workdir)?.with_cast(args.eval.cast.into());
    let mut recorder = TraceRecorder::new(&objective, config).persist_to(&trace_path);
    if let Some(prior) = &prior {
        recorder = recorder.resume_from(prior);
    }
    match run_search(recorder) {
        Ok(trace) => {
            eprintln!(
                "{} evaluations ({} evaluator calls), trace at {}",
                trace.evaluations,
                trace.evaluator_calls,
                trace_path.display()
            );
            println!("{}", outcome_line(&trace));
            Ok(())
        }
        Err(SearchAbort { trace, error }) => {
            eprintln!(
                "search stopped after {} evaluations, partial trace at {}",
                trace.evaluations,
                trace_path.display()
            );
            Err(error.into())
        }
    }
}

fn sweep(args: SweepArgs, jobs: usize) -> CliResult {
    let spec = evaluator_spec(&args.eval)?;
    if args.out.extension().is_some_and(|e| e == "json") {
        return Err(CliError::usage(
            "--out names the CSV file, not the .json copy",
        ));
    }
    let base = open(&args.eval.base)?;
    let tuned = open(&args.eval.tuned)?;
    let objective = CheckpointObjective::new(&base, &tuned, &spec, workdir(&args.eval))?
        .with_cast(args.eval.cast.into());
    let rows = alpha_search::sweep(&objective, &args.alphas, jobs)?;
    write_file(&args.out, alpha_search::curve_csv(&rows))?;
    let text = serde_json::to_string_pretty(&rows).expect("rows serialize");
    write_file(&json_sibling(&args.out), text)?;
    let mut failed = 0;
    for row in &rows {
        println!("{}", serde_json::to_string(row).expect("row serializes"));
        if let Some(err) = &row.error {
            eprintln!("alpha {}: {err}", row.alpha);
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(CliError {
            code: EXIT_EVALUATOR,
            message: format!("{failed} of {} sweep points failed", rows.len()),
        });
    }
    Ok(())
}

fn lab(args: LabArgs) -> CliResult {
    let experiment = Experiment::parse(&args.experiment).ok_or_else(|| {
        let names: Vec<&str> = Experiment::ALL.iter().map(|e| e.as_str()).collect();
        CliError::usage(format!(
            "unknown experiment {:?} (expected one of {})",
            args.experiment,
            names.join(", ")
        ))
    })?;
    if args.seeds == 0 {
        return Err(CliError::usage("--seeds must be at least 1"));
    }
    let mut settings = LabSettings::default();
    if let Some(steps) = args.steps {
        settings.train.steps = steps;
    }
    if let Some(lr) = args.lr {
        settings.train.lr = lr;
    }
    if let Some(beta) = args.beta {
        settings.train.beta = beta;
    }
    if let Some(n) = args.n_pairs {
        settings.world.n_pairs = n;
    }
    if let Some(noise) = args.noise {
        settings.world.noise = noise;
    }
    let seeds: Vec<u64> = (args.seed..args.seed + args.seeds).collect();
    let report = run_experiment(experiment, &seeds, &settings)?;

    let stem = experiment.as_str();
    write_file(&args.out.join(format!("{stem}.csv")), report.to_csv())?;
    write_file(
        &args.out.join(format!("{stem}-curves.csv")),
        report.curves_csv(),
    )?;
    let sidecar = serde_json::to_string_pretty(&report.sidecar_json()).expect("sidecar serializes");
    write_file(&args.out.join(format!("{stem}.json")), sidecar)?;
    for t in &report.trends {
        println!("{}\t{}/{}", t.name, t.holds, t.total);
    }
    Ok(())
}
