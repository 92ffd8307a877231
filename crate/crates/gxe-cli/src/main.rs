//! Command-line driver for genotype-by-environment trial prediction.
//!
//! Four subcommands cover the experiment lifecycle: `simulate` draws a
//! synthetic dataset from a known generating process, `fit` estimates
//! hyperparameters on a dataset and writes a portable model document, `cv`
//! scores a method under grouped cross-validation, and `predict` evaluates a
//! fitted model at new (variety, environment) pairs.
//!
//! Every subcommand accepts `--config PATH`, a JSON file whose fields mirror
//! the flags; explicitly given flags override the file. Exit codes: 0 on
//! success, 1 when a run fails at runtime (unreadable files, aborted fits,
//! every split or target failing), 2 for usage errors (unknown methods,
//! malformed values, inconsistent requests).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use gxe::data::{
    load_dataset, load_env, load_genotypes, AssemblyReport, EnvNormalization, TraitKind,
};
use gxe::eval::{
    evaluate, write_aggregate_csv, write_split_csv, MethodSpec, Scenario, SplitPlan,
};
use gxe::gp::{
    GpModel, Hyperparameters, KernelConfig, KernelWorkspace, ModelDocument,
    PredictiveDistribution,
};
use gxe::hyperopt::{adam_fit, grid_init, FitData, OptimizerConfig};
use gxe::kernel::{CombinationMode, CombinationWeights};
use gxe::synth::{generate, write_dataset, SyntheticSpec};
use gxe::GxeError;

/// Exit code for failures while running an otherwise valid request.
const EXIT_FAILURE: u8 = 1;

/// Exit code for invalid requests.
const EXIT_USAGE: u8 = 2;

/// An error carrying the process exit code it should terminate with.
struct CliError {
    code: u8,
    message: String,
}

type CliResult<T> = Result<T, CliError>;

/// Builds a usage error (exit code 2).
fn usage(message: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

/// Builds a runtime failure (exit code 1).
fn failure(message: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_FAILURE,
        message: message.into(),
    }
}

impl From<GxeError> for CliError {
    fn from(e: GxeError) -> Self {
        failure(e.to_string())
    }
}

/// Gaussian-process prediction of genotype-by-environment trial outcomes.
#[derive(Parser)]
#[command(name = "gxe", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a known generating process.
    Simulate(SimulateArgs),
    /// Fit hyperparameters on a dataset and write a model document.
    Fit(FitArgs),
    /// Score a method under grouped cross-validation.
    Cv(CvArgs),
    /// Predict targets from a fitted model document.
    Predict(PredictArgs),
}

/// Input files shared by `fit` and `cv`.
#[derive(Args)]
struct DataArgs {
    /// Trial records CSV (variety_id,environment_id,location,year,trait,value).
    #[arg(long, value_name = "PATH")]
    trials: Option<PathBuf>,
    /// Genotype table CSV (variety_id,sequence).
    #[arg(long, value_name = "PATH")]
    genotypes: Option<PathBuf>,
    /// Environment covariates CSV in long format
    /// (environment_id,period,variable,value).
    #[arg(long, value_name = "PATH")]
    env: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    /// Method to fit: a Gaussian-process preset like GP5, GP2x or GP7+.
    #[arg(long)]
    method: Option<String>,
    /// Override the weight structure: G, E, +, x or ~.
    #[arg(long)]
    mode: Option<String>,
    /// Trait to model: yield or protein [default: yield].
    #[arg(long = "trait", value_name = "TRAIT")]
    trait_name: Option<String>,
    /// Random seed for the stochastic optimizer [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    data: DataArgs,
    /// Directory receiving model.json and trace.csv [default: .].
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// JSON run configuration; explicit flags override its fields.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct CvArgs {
    /// Method to score: a Gaussian-process preset (GP1..GP9, optionally with
    /// a mode suffix) or a baseline (GLO_A, VAR_A, ENV_A).
    #[arg(long)]
    method: Option<String>,
    /// Override the weight structure: G, E, +, x or ~.
    #[arg(long)]
    mode: Option<String>,
    /// Trait to score: yield or protein [default: yield].
    #[arg(long = "trait", value_name = "TRAIT")]
    trait_name: Option<String>,
    /// Hold-out scenario: new-environment or new-variety.
    #[arg(long)]
    scenario: Option<String>,
    /// Records leaked from each held-out group into training [default: 0].
    #[arg(long)]
    leakage: Option<usize>,
    /// Number of cross-validation splits [default: 30].
    #[arg(long)]
    splits: Option<usize>,
    /// Fraction of records pooled before grouping [default: 0.8].
    #[arg(long)]
    pool_fraction: Option<f64>,
    /// Target fraction of the pool held out for testing [default: 0.2].
    #[arg(long)]
    test_fraction: Option<f64>,
    /// Master seed for split sampling and per-split optimizers [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for scoring splits; 0 uses all cores [default: 0].
    #[arg(long)]
    jobs: Option<usize>,
    #[command(flatten)]
    data: DataArgs,
    /// Directory receiving splits.csv and aggregate.csv [default: .].
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// JSON run configuration; explicit flags override its fields.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    /// Fitted model document written by `gxe fit`.
    #[arg(long, value_name = "PATH")]
    model: Option<PathBuf>,
    /// Prediction targets CSV (variety_id,environment_id).
    #[arg(long, value_name = "PATH")]
    targets: Option<PathBuf>,
    /// Genotype table CSV covering every model and target variety.
    #[arg(long, value_name = "PATH")]
    genotypes: Option<PathBuf>,
    /// Environment covariates CSV covering every model and target environment.
    #[arg(long, value_name = "PATH")]
    env: Option<PathBuf>,
    /// Directory receiving predictions.csv [default: .].
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// JSON run configuration; explicit flags override its fields.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Number of varieties [default: 20].
    #[arg(long)]
    varieties: Option<usize>,
    /// Number of environments [default: 15].
    #[arg(long)]
    environments: Option<usize>,
    /// Marker-sequence length [default: 100].
    #[arg(long)]
    markers: Option<usize>,
    /// Environmental covariates per period [default: 3].
    #[arg(long)]
    variables: Option<usize>,
    /// Observed (variety, environment) pairs; omit for the full grid.
    #[arg(long)]
    observations: Option<usize>,
    /// Generating kernel preset, e.g. GP5 or GP2x [default: GP5].
    #[arg(long)]
    method: Option<String>,
    /// Weight structure of the generating kernel: G, E, +, x or ~.
    #[arg(long)]
    mode: Option<String>,
    /// Trait label for the records: yield or protein [default: yield].
    #[arg(long = "trait", value_name = "TRAIT")]
    trait_name: Option<String>,
    /// Genotype kernel length scale [default: 0.5].
    #[arg(long)]
    theta_g: Option<f64>,
    /// Environment kernel length scale [default: 0.5].
    #[arg(long)]
    theta_e: Option<f64>,
    /// Weight of the genotype kernel; give all of --alpha/--beta/--gamma or
    /// none [default: the mode's natural weights].
    #[arg(long)]
    alpha: Option<f64>,
    /// Weight of the environment kernel.
    #[arg(long)]
    beta: Option<f64>,
    /// Weight of the product kernel.
    #[arg(long)]
    gamma: Option<f64>,
    /// Window length when the genotype kernel is spectrum [default: 3].
    #[arg(long)]
    spectrum_k: Option<usize>,
    /// Signal fraction of the total variance [default: 0.8].
    #[arg(long)]
    varsigma: Option<f64>,
    /// Total variance of the responses [default: 1].
    #[arg(long)]
    nu: Option<f64>,
    /// Constant trend added to every response [default: 10].
    #[arg(long)]
    trend: Option<f64>,
    /// Seed of the generating process [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Directory receiving trials.csv, genotypes.csv and env.csv [default: .].
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// JSON run configuration; explicit flags override its fields.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
}

/// JSON run configuration. Fields mirror the command-line flags; any subset
/// may be present, and explicitly given flags take precedence.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    method: Option<String>,
    mode: Option<String>,
    #[serde(rename = "trait")]
    trait_name: Option<String>,
    scenario: Option<String>,
    leakage: Option<usize>,
    splits: Option<usize>,
    pool_fraction: Option<f64>,
    test_fraction: Option<f64>,
    seed: Option<u64>,
    jobs: Option<usize>,
    trials: Option<PathBuf>,
    genotypes: Option<PathBuf>,
    env: Option<PathBuf>,
    model: Option<PathBuf>,
    targets: Option<PathBuf>,
    out: Option<PathBuf>,
    optimizer: Option<OptimizerConfig>,
    varieties: Option<usize>,
    environments: Option<usize>,
    markers: Option<usize>,
    variables: Option<usize>,
    observations: Option<usize>,
    theta_g: Option<f64>,
    theta_e: Option<f64>,
    alpha: Option<f64>,
    beta: Option<f64>,
    gamma: Option<f64>,
    spectrum_k: Option<usize>,
    varsigma: Option<f64>,
    nu: Option<f64>,
    trend: Option<f64>,
}

fn load_file_config(path: Option<&Path>) -> CliResult<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config file {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| usage(format!("invalid config file {}: {e}", path.display())))
}

/// Unwraps a merged flag/config value, or reports which flag is missing.
fn required<T>(value: Option<T>, flag: &str) -> CliResult<T> {
    value.ok_or_else(|| {
        usage(format!(
            "missing {flag}; pass the flag or set the field in --config"
        ))
    })
}

fn resolve_trait(flag: &Option<String>, cfg: &FileConfig) -> CliResult<TraitKind> {
    match flag.as_deref().or(cfg.trait_name.as_deref()) {
        Some(s) => TraitKind::parse(s).map_err(|e| usage(e.to_string())),
        None => Ok(TraitKind::Yield),
    }
}

/// Parses the method name and applies any mode override.
fn resolve_method(
    flag: &Option<String>,
    mode_flag: &Option<String>,
    cfg: &FileConfig,
    default: Option<&str>,
) -> CliResult<MethodSpec> {
    let name = flag
        .clone()
        .or_else(|| cfg.method.clone())
        .or_else(|| default.map(str::to_string));
    let name = required(name, "--method")?;
    let mut spec = MethodSpec::parse(&name).map_err(|e| usage(e.to_string()))?;
    if let Some(code) = mode_flag.as_deref().or(cfg.mode.as_deref()) {
        let mode = CombinationMode::from_code(code).map_err(|e| usage(e.to_string()))?;
        spec = spec.with_mode(mode).map_err(|e| usage(e.to_string()))?;
    }
    Ok(spec)
}

fn resolve_optimizer(seed: Option<u64>, cfg: &FileConfig) -> CliResult<OptimizerConfig> {
    let mut opt = cfg.optimizer.clone().unwrap_or_default();
    if let Some(s) = seed.or(cfg.seed) {
        opt.seed = s;
    }
    opt.validate().map_err(|e| usage(e.to_string()))?;
    Ok(opt)
}

fn resolve_data_paths(
    args: &DataArgs,
    cfg: &FileConfig,
) -> CliResult<(PathBuf, PathBuf, PathBuf)> {
    let trials = required(args.trials.clone().or_else(|| cfg.trials.clone()), "--trials")?;
    let genotypes = required(
        args.genotypes.clone().or_else(|| cfg.genotypes.clone()),
        "--genotypes",
    )?;
    let env = required(args.env.clone().or_else(|| cfg.env.clone()), "--env")?;
    Ok((trials, genotypes, env))
}

/// Resolves the output directory and makes sure it exists.
fn out_dir(flag: &Option<PathBuf>, cfg: &FileConfig) -> CliResult<PathBuf> {
    let dir = flag
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| {
        failure(format!(
            "cannot create output directory {}: {e}",
            dir.display()
        ))
    })?;
    Ok(dir)
}

fn report_assembly(report: &AssemblyReport) {
    let dropped = report.other_trait + report.unknown_variety + report.unknown_environment;
    if dropped > 0 {
        eprintln!(
            "warning: dropped {dropped} trial record(s): {} for the other trait, \
             {} with unknown varieties, {} with unknown environments",
            report.other_trait, report.unknown_variety, report.unknown_environment
        );
    }
}

/// Formats an absent metric as "n/a".
fn metric_cell(value: Option<f64>) -> String {
    value.map_or_else(|| "n/a".to_string(), |v| v.to_string())
}

/// Prints the fitted parameter set, one name per line. Length scales are
/// shown only for kernel sides the mode actually uses.
fn print_hyper(kernel: &KernelConfig, hyper: &Hyperparameters, trend: f64) {
    if kernel.mode.uses_genotype() {
        match hyper.spectrum_k {
            Some(k) => println!("spectrum_k {k}"),
            None => println!("theta_G    {}", hyper.theta_g),
        }
    }
    if kernel.mode.uses_environment() {
        println!("theta_E    {}", hyper.theta_e);
    }
    println!("alpha      {}", hyper.weights.alpha);
    println!("beta       {}", hyper.weights.beta);
    println!("gamma      {}", hyper.weights.gamma);
    println!("varsigma   {}", hyper.varsigma);
    println!("nu         {}", hyper.nu);
    println!("trend      {trend}");
}

fn run_fit(args: &FitArgs) -> CliResult<()> {
    let cfg = load_file_config(args.config.as_deref())?;
    let spec = resolve_method(&args.method, &args.mode, &cfg, None)?;
    let Some(kernel) = spec.kernel_config() else {
        return Err(usage(format!(
            "{} is a baseline without free parameters; fit needs a \
             Gaussian-process preset (GP1..GP9)",
            spec.name()
        )));
    };
    let trait_kind = resolve_trait(&args.trait_name, &cfg)?;
    let (trials, genotypes, env) = resolve_data_paths(&args.data, &cfg)?;
    let opt = resolve_optimizer(args.seed, &cfg)?;
    let out = out_dir(&args.out, &cfg)?;

    let (data, report) = load_dataset(&trials, &genotypes, &env, trait_kind)?;
    report_assembly(&report);

    let all: Vec<usize> = (0..data.len()).collect();
    let mut env_ids = data.environment_ids_of(&all);
    env_ids.sort_unstable();
    let norm = EnvNormalization::fit(&data.env, &env_ids)?;
    for w in &norm.warnings {
        eprintln!("warning: {w}");
    }
    let normalized = norm.apply(&data.env)?;
    let workspace = KernelWorkspace::build(&kernel, &data.genotypes, &normalized)?;
    let pairs: Vec<(usize, usize)> = data
        .records
        .iter()
        .map(|o| (o.variety, o.environment))
        .collect();
    let z: Vec<f64> = data.records.iter().map(|o| o.value).collect();
    let fit_data = FitData::new(&workspace, &pairs, &z)?;
    let init = grid_init(&fit_data, &kernel)?;
    let fitted = adam_fit(&init.hyper, &fit_data, &kernel, &opt)
        .map_err(|abort| failure(format!("optimization aborted: {}", abort.error)))?;
    for w in &fitted.warnings {
        eprintln!("warning: {w}");
    }

    let model = GpModel::fit(&workspace, kernel, fitted.hyper.clone(), pairs, z)?;
    let doc = ModelDocument::from_model(&model, trait_kind, norm);
    let model_path = out.join("model.json");
    doc.save(&model_path)?;
    let trace_path = out.join("trace.csv");
    let mut trace_bytes = Vec::new();
    fitted.trace.write_csv(&mut trace_bytes)?;
    fs::write(&trace_path, trace_bytes)
        .map_err(|e| failure(format!("cannot write {}: {e}", trace_path.display())))?;

    println!("method     {}", spec.name());
    println!(
        "kernel     genotype {}, environment {}, mode {}",
        kernel.geno.name(),
        kernel.env.name(),
        kernel.mode.code()
    );
    println!("records    {}", data.len());
    println!("grid nll   {} ({} candidates skipped)", init.nll, init.skipped);
    println!(
        "final nll  {} after {} iterations",
        fitted.nll,
        fitted.trace.rows.len()
    );
    print_hyper(&kernel, model.hyper(), model.trend());
    println!("wrote {}", model_path.display());
    println!("wrote {}", trace_path.display());
    Ok(())
}

fn run_cv(args: &CvArgs) -> CliResult<()> {
    let cfg = load_file_config(args.config.as_deref())?;
    let spec = resolve_method(&args.method, &args.mode, &cfg, None)?;
    let trait_kind = resolve_trait(&args.trait_name, &cfg)?;
    let scenario_name = required(
        args.scenario.clone().or_else(|| cfg.scenario.clone()),
        "--scenario",
    )?;
    let scenario = Scenario::parse(&scenario_name).map_err(|e| usage(e.to_string()))?;
    let mut plan = SplitPlan::new(scenario);
    if let Some(v) = args.leakage.or(cfg.leakage) {
        plan.leakage = v;
    }
    if let Some(v) = args.splits.or(cfg.splits) {
        plan.n_splits = v;
    }
    if let Some(v) = args.pool_fraction.or(cfg.pool_fraction) {
        plan.pool_fraction = v;
    }
    if let Some(v) = args.test_fraction.or(cfg.test_fraction) {
        plan.test_fraction = v;
    }
    plan.master_seed = args.seed.or(cfg.seed).unwrap_or(0);
    plan.validate().map_err(|e| usage(e.to_string()))?;
    let opt = resolve_optimizer(None, &cfg)?;
    let jobs = args.jobs.or(cfg.jobs).unwrap_or(0);
    let (trials, genotypes, env) = resolve_data_paths(&args.data, &cfg)?;
    let out = out_dir(&args.out, &cfg)?;

    let (data, report) = load_dataset(&trials, &genotypes, &env, trait_kind)?;
    report_assembly(&report);
    let metrics = evaluate(spec, &data, &plan, &opt, jobs)?;

    for s in &metrics.splits {
        for w in &s.warnings {
            eprintln!("warning: split {}: {w}", s.split);
        }
        if let Some(f) = &s.failure {
            eprintln!("warning: split {} failed: {f}", s.split);
        }
    }

    let reports = std::slice::from_ref(&metrics);
    let splits_path = out.join("splits.csv");
    let mut split_bytes = Vec::new();
    write_split_csv(&mut split_bytes, reports)?;
    fs::write(&splits_path, split_bytes)
        .map_err(|e| failure(format!("cannot write {}: {e}", splits_path.display())))?;
    let agg_path = out.join("aggregate.csv");
    let mut agg_bytes = Vec::new();
    write_aggregate_csv(&mut agg_bytes, reports)?;
    fs::write(&agg_path, agg_bytes)
        .map_err(|e| failure(format!("cannot write {}: {e}", agg_path.display())))?;

    println!("method       {}", metrics.method);
    println!("trait        {}", metrics.trait_kind);
    println!(
        "scenario     {} (leakage {})",
        metrics.scenario, metrics.leakage
    );
    println!(
        "splits       {} scored, {} failed",
        metrics.splits.len(),
        metrics.n_failed
    );
    println!("median MSE   {}", metric_cell(metrics.median_mse));
    println!("median CRPS  {}", metric_cell(metrics.median_crps));
    println!("median logS  {}", metric_cell(metrics.median_logs));
    println!("wrote {}", splits_path.display());
    println!("wrote {}", agg_path.display());

    if metrics.n_failed == metrics.splits.len() {
        let first = metrics
            .splits
            .iter()
            .find_map(|s| s.failure.as_deref())
            .unwrap_or("unknown failure");
        return Err(failure(format!(
            "all {} split(s) failed; first failure: {first}",
            metrics.splits.len()
        )));
    }
    Ok(())
}

/// Reads a prediction-targets CSV with header `variety_id,environment_id`.
fn read_targets(path: &Path) -> CliResult<Vec<(String, String)>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| failure(format!("cannot read targets file {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| failure(format!("cannot read targets file {}: {e}", path.display())))?;
    let found: Vec<&str> = headers.iter().collect();
    if found != ["variety_id", "environment_id"] {
        return Err(failure(format!(
            "targets file {} must have the header variety_id,environment_id \
             (found {})",
            path.display(),
            found.join(",")
        )));
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record
            .map_err(|e| failure(format!("malformed targets file {}: {e}", path.display())))?;
        out.push((record[0].to_string(), record[1].to_string()));
    }
    Ok(out)
}

fn run_predict(args: &PredictArgs) -> CliResult<()> {
    let cfg = load_file_config(args.config.as_deref())?;
    let model_path = required(args.model.clone().or_else(|| cfg.model.clone()), "--model")?;
    let targets_path = required(
        args.targets.clone().or_else(|| cfg.targets.clone()),
        "--targets",
    )?;
    let geno_path = required(
        args.genotypes.clone().or_else(|| cfg.genotypes.clone()),
        "--genotypes",
    )?;
    let env_path = required(args.env.clone().or_else(|| cfg.env.clone()), "--env")?;
    let out = out_dir(&args.out, &cfg)?;

    let doc = ModelDocument::load(&model_path)?;
    let genotypes = load_genotypes(&geno_path)?;
    let env = load_env(&env_path)?;
    let model = doc.into_model(&genotypes, &env)?;
    let targets = read_targets(&targets_path)?;

    // Resolve ids up front so one unknown id fails its row, not the run.
    let mut errors: Vec<Option<String>> = vec![None; targets.len()];
    let mut resolved: Vec<(usize, (usize, usize))> = Vec::new();
    for (i, (vid, eid)) in targets.iter().enumerate() {
        match (model.variety_index(vid), model.env_index(eid)) {
            (Some(v), Some(e)) => resolved.push((i, (v, e))),
            (None, _) => errors[i] = Some(format!("unknown variety id {vid:?}")),
            (_, None) => errors[i] = Some(format!("unknown environment id {eid:?}")),
        }
    }
    let pairs: Vec<(usize, usize)> = resolved.iter().map(|r| r.1).collect();
    let (predictions, warnings) = if pairs.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        model.predict(&pairs)?
    };
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let mut cells: Vec<Option<PredictiveDistribution>> = vec![None; targets.len()];
    for ((i, _), p) in resolved.iter().zip(predictions) {
        cells[*i] = Some(p);
    }

    let path = out.join("predictions.csv");
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record([
            "variety_id",
            "environment_id",
            "mean",
            "sd_latent",
            "sd_observation",
            "error",
        ])
        .map_err(|e| failure(format!("cannot format predictions: {e}")))?;
    for (i, (vid, eid)) in targets.iter().enumerate() {
        let record = match &cells[i] {
            Some(p) => [
                vid.clone(),
                eid.clone(),
                p.mean.to_string(),
                p.sd_latent.to_string(),
                p.sd_observation.to_string(),
                String::new(),
            ],
            None => [
                vid.clone(),
                eid.clone(),
                String::new(),
                String::new(),
                String::new(),
                errors[i].clone().unwrap_or_else(|| "unresolved".into()),
            ],
        };
        writer
            .write_record(&record)
            .map_err(|e| failure(format!("cannot format predictions: {e}")))?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| failure(format!("cannot format predictions: {e}")))?;
    fs::write(&path, bytes)
        .map_err(|e| failure(format!("cannot write {}: {e}", path.display())))?;

    let ok = cells.iter().filter(|c| c.is_some()).count();
    let failed = targets.len() - ok;
    println!("predicted  {ok} of {} target(s)", targets.len());
    if failed > 0 {
        println!("failed     {failed} (see the error column)");
    }
    println!("wrote {}", path.display());
    if !targets.is_empty() && ok == 0 {
        return Err(failure(format!(
            "all {} target(s) failed to resolve",
            targets.len()
        )));
    }
    Ok(())
}

/// The mode's natural generating weights when none are given explicitly.
fn default_weights(mode: CombinationMode) -> CombinationWeights {
    mode.fixed_weights().unwrap_or_else(|| match mode {
        CombinationMode::Additive => {
            CombinationWeights::new(0.5, 0.5, 0.0).expect("valid weights")
        }
        _ => CombinationWeights::new(1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0).expect("valid weights"),
    })
}

fn run_simulate(args: &SimulateArgs) -> CliResult<()> {
    let cfg = load_file_config(args.config.as_deref())?;
    let spec = resolve_method(&args.method, &args.mode, &cfg, Some("GP5"))?;
    let Some(kernel) = spec.kernel_config() else {
        return Err(usage(format!(
            "{} is a baseline; simulate needs a Gaussian-process preset \
             (GP1..GP9) as the generating kernel",
            spec.name()
        )));
    };
    let trait_kind = resolve_trait(&args.trait_name, &cfg)?;
    let out = out_dir(&args.out, &cfg)?;

    let weights = match (
        args.alpha.or(cfg.alpha),
        args.beta.or(cfg.beta),
        args.gamma.or(cfg.gamma),
    ) {
        (None, None, None) => default_weights(kernel.mode),
        (Some(a), Some(b), Some(g)) => {
            CombinationWeights::new(a, b, g).map_err(|e| usage(e.to_string()))?
        }
        _ => {
            return Err(usage(
                "give all of --alpha, --beta and --gamma, or none of them",
            ))
        }
    };
    let mut hyper = Hyperparameters::new(
        args.theta_g.or(cfg.theta_g).unwrap_or(0.5),
        args.theta_e.or(cfg.theta_e).unwrap_or(0.5),
        weights,
        args.varsigma.or(cfg.varsigma).unwrap_or(0.8),
        args.nu.or(cfg.nu).unwrap_or(1.0),
    )
    .map_err(|e| usage(e.to_string()))?;
    if !kernel.geno.has_length_scale() {
        hyper = hyper.with_spectrum_k(args.spectrum_k.or(cfg.spectrum_k).unwrap_or(3));
    }
    let synth_spec = SyntheticSpec {
        n_varieties: args.varieties.or(cfg.varieties).unwrap_or(20),
        n_environments: args.environments.or(cfg.environments).unwrap_or(15),
        sequence_length: args.markers.or(cfg.markers).unwrap_or(100),
        n_variables: args.variables.or(cfg.variables).unwrap_or(3),
        kernel,
        hyper,
        trend: args.trend.or(cfg.trend).unwrap_or(10.0),
        trait_kind,
        n_observations: args.observations.or(cfg.observations),
        seed: args.seed.or(cfg.seed).unwrap_or(0),
    };
    synth_spec.validate().map_err(|e| usage(e.to_string()))?;

    let data = generate(&synth_spec)?;
    let trials_path = out.join("trials.csv");
    let geno_path = out.join("genotypes.csv");
    let env_path = out.join("env.csv");
    write_dataset(&data, &trials_path, &geno_path, &env_path)?;

    println!("kernel        {}", spec.name());
    println!("varieties     {}", synth_spec.n_varieties);
    println!("environments  {}", synth_spec.n_environments);
    println!("records       {}", data.len());
    println!("trait         {}", data.trait_kind);
    println!("seed          {}", synth_spec.seed);
    println!(
        "wrote {}, {} and {}",
        trials_path.display(),
        geno_path.display(),
        env_path.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(args) => run_simulate(args),
        Command::Fit(args) => run_fit(args),
        Command::Cv(args) => run_cv(args),
        Command::Predict(args) => run_predict(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
