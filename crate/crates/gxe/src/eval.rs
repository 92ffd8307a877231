//! Group-based cross-validation with controlled leakage, probabilistic and
//! point scores, averaging baselines, and per-method report assembly.
//!
//! Splitting is done by whole groups (environments or varieties) so that no
//! information about a held-out group reaches the training side, except for
//! an explicit, controlled number of leakage records per test group. Scores
//! are aggregated as per-split values first (mean of squared errors; median
//! continuous ranked probability score and log score over test points) and
//! then as medians across splits.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{Dataset, EnvNormalization, TraitKind};
use crate::env::EnvKernelFamily;
use crate::error::GxeError;
use crate::geno::GenoKernelFamily;
use crate::gp::{GpModel, KernelConfig, KernelWorkspace};
use crate::hyperopt::{adam_fit, grid_init, FitData, OptimizerConfig};
use crate::kernel::CombinationMode;
use crate::Result;

/// Which kind of unseen entity a split holds out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Test groups are environments; varieties may recur on both sides.
    NewEnvironment,
    /// Test groups are varieties; environments may recur on both sides.
    NewVariety,
}

impl Scenario {
    /// Command-line and file name of the scenario.
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::NewEnvironment => "new-environment",
            Scenario::NewVariety => "new-variety",
        }
    }

    /// Parses the command-line name.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "new-environment" => Ok(Scenario::NewEnvironment),
            "new-variety" => Ok(Scenario::NewVariety),
            other => Err(GxeError::Domain(format!(
                "unknown scenario {other:?}; expected \"new-environment\" or \"new-variety\""
            ))),
        }
    }

    /// The entity kind that forms the groups.
    pub fn group_kind(&self) -> &'static str {
        match self {
            Scenario::NewEnvironment => "environment",
            Scenario::NewVariety => "variety",
        }
    }

    /// The grouping index of one observation.
    fn group_of(&self, record: &crate::data::Observation) -> usize {
        match self {
            Scenario::NewEnvironment => record.environment,
            Scenario::NewVariety => record.variety,
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How to carve a dataset into train/test splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    /// Which entity kind is held out.
    pub scenario: Scenario,
    /// Number of independent splits.
    pub n_splits: usize,
    /// Fraction of all records subsampled into each split's pool, in (0, 1].
    pub pool_fraction: f64,
    /// Fraction of the pool the test side must reach, in (0, 1).
    pub test_fraction: f64,
    /// Records moved from each test group back into training.
    pub leakage: usize,
    /// Seed from which every split derives deterministically.
    pub master_seed: u64,
}

impl SplitPlan {
    /// A plan with the standard experiment shape: 30 splits, an 80% pool,
    /// a 20% test side, no leakage.
    pub fn new(scenario: Scenario) -> Self {
        Self {
            scenario,
            n_splits: 30,
            pool_fraction: 0.8,
            test_fraction: 0.2,
            leakage: 0,
            master_seed: 0,
        }
    }

    /// Checks the fractions and counts.
    pub fn validate(&self) -> Result<()> {
        if self.n_splits == 0 {
            return Err(GxeError::Domain("a plan needs at least one split".into()));
        }
        if !(self.pool_fraction > 0.0 && self.pool_fraction <= 1.0) {
            return Err(GxeError::Domain(format!(
                "pool fraction {} is outside (0, 1]",
                self.pool_fraction
            )));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(GxeError::Domain(format!(
                "test fraction {} is outside (0, 1)",
                self.test_fraction
            )));
        }
        Ok(())
    }
}

/// One train/test partition of record indices into [`Dataset::records`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    /// Training record indices, ascending.
    pub train: Vec<usize>,
    /// Test record indices, ascending.
    pub test: Vec<usize>,
    /// Non-fatal conditions hit while building the split.
    pub warnings: Vec<String>,
}

/// Splits records into train/test sides by whole groups.
///
/// Per split: a pool of `pool_fraction` of all records is subsampled
/// uniformly; whole groups (environments or varieties), visited in random
/// order, move to the test side until it reaches `test_fraction` of the
/// pool; the rest of the pool trains. With leakage k, k uniformly chosen
/// records of each test group move from test to train; a test group with at
/// most k records contributes no test records and is reported in the
/// split's warnings. Deterministic given the master seed and split index.
pub fn make_splits(data: &Dataset, plan: &SplitPlan) -> Result<Vec<Split>> {
    plan.validate()?;
    let n = data.len();
    let groups: std::collections::BTreeSet<usize> = data
        .records
        .iter()
        .map(|r| plan.scenario.group_of(r))
        .collect();
    if groups.len() < 2 {
        return Err(GxeError::Degenerate(format!(
            "dataset has {} {} group(s); need at least 2 to split",
            groups.len(),
            plan.scenario.group_kind()
        )));
    }
    let pool_size = ((n as f64) * plan.pool_fraction).round() as usize;
    if pool_size < 2 {
        return Err(GxeError::Degenerate(format!(
            "pool of {pool_size} record(s) is too small to split"
        )));
    }

    let mut splits = Vec::with_capacity(plan.n_splits);
    for split_index in 0..plan.n_splits {
        let mut rng = ChaCha12Rng::seed_from_u64(plan.master_seed);
        rng.set_stream(split_index as u64);
        let mut warnings = Vec::new();

        let mut pool = rand::seq::index::sample(&mut rng, n, pool_size).into_vec();
        pool.sort_unstable();

        let mut by_group: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &rec in &pool {
            by_group
                .entry(plan.scenario.group_of(&data.records[rec]))
                .or_default()
                .push(rec);
        }
        let mut order: Vec<usize> = by_group.keys().copied().collect();
        order.shuffle(&mut rng);

        let target = plan.test_fraction * pool_size as f64;
        let mut test_groups = Vec::new();
        let mut claimed = 0usize;
        for g in order {
            if (claimed as f64) >= target {
                break;
            }
            claimed += by_group[&g].len();
            test_groups.push(g);
        }

        let mut train = Vec::new();
        let mut test = Vec::new();
        for (&g, members) in &by_group {
            if !test_groups.contains(&g) {
                train.extend_from_slice(members);
                continue;
            }
            if plan.leakage == 0 {
                test.extend_from_slice(members);
                continue;
            }
            let take = plan.leakage.min(members.len());
            let mut leaked =
                rand::seq::index::sample(&mut rng, members.len(), take).into_vec();
            leaked.sort_unstable();
            if take == members.len() {
                let id = match plan.scenario {
                    Scenario::NewEnvironment => data.env.ids()[g].as_str(),
                    Scenario::NewVariety => data.genotypes.ids()[g].as_str(),
                };
                warnings.push(format!(
                    "split {split_index}: test {} {id:?} has only {take} record(s); \
                     leakage {} leaves it with no test records",
                    plan.scenario.group_kind(),
                    plan.leakage
                ));
            }
            let mut cursor = leaked.iter().peekable();
            for (pos, &rec) in members.iter().enumerate() {
                if cursor.peek() == Some(&&pos) {
                    cursor.next();
                    train.push(rec);
                } else {
                    test.push(rec);
                }
            }
        }
        train.sort_unstable();
        test.sort_unstable();
        if train.is_empty() {
            warnings.push(format!("split {split_index}: training side is empty"));
        }
        if test.is_empty() {
            warnings.push(format!("split {split_index}: test side is empty"));
        }
        splits.push(Split {
            train,
            test,
            warnings,
        });
    }
    Ok(splits)
}

/// Mean of squared differences between predictions and observations.
pub fn mse(predictions: &[f64], observations: &[f64]) -> Result<f64> {
    if predictions.len() != observations.len() {
        return Err(GxeError::Dimension {
            what: "observations",
            expected: predictions.len(),
            found: observations.len(),
        });
    }
    if predictions.is_empty() {
        return Err(GxeError::Degenerate(
            "mean squared error of an empty set".into(),
        ));
    }
    Ok(predictions
        .iter()
        .zip(observations)
        .map(|(p, o)| (p - o).powi(2))
        .sum::<f64>()
        / predictions.len() as f64)
}

/// Continuous ranked probability score of a Gaussian forecast N(mu, sigma²)
/// against the outcome y.
///
/// For sigma > 0 this is the closed form
/// sigma·[z(2Φ(z) − 1) + 2φ(z) − 1/√π] with z = (y − mu)/sigma; at
/// sigma = 0 the score degenerates to the absolute error |y − mu|.
pub fn crps_gaussian(mu: f64, sigma: f64, y: f64) -> Result<f64> {
    if sigma.is_nan() || sigma < 0.0 {
        return Err(GxeError::Domain(format!(
            "predictive standard deviation {sigma} is negative"
        )));
    }
    if !mu.is_finite() || !y.is_finite() || !sigma.is_finite() {
        return Err(GxeError::NonFinite(format!(
            "crps of (mu {mu}, sigma {sigma}, y {y})"
        )));
    }
    if sigma == 0.0 {
        return Ok((y - mu).abs());
    }
    let z = (y - mu) / sigma;
    let std = Normal::standard();
    let cdf = std.cdf(z);
    let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    Ok(sigma * (z * (2.0 * cdf - 1.0) + 2.0 * pdf - 1.0 / std::f64::consts::PI.sqrt()))
}

/// Negative log predictive density of a Gaussian forecast at the outcome.
///
/// Point predictors (sigma = 0) have no log score; the error mirrors the
/// absent cells such methods get in reports.
pub fn log_score_gaussian(mu: f64, sigma: f64, y: f64) -> Result<f64> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(GxeError::Domain(format!(
            "log score needs a positive standard deviation, got {sigma}"
        )));
    }
    if !mu.is_finite() || !y.is_finite() || !sigma.is_finite() {
        return Err(GxeError::NonFinite(format!(
            "log score of (mu {mu}, sigma {sigma}, y {y})"
        )));
    }
    Ok(0.5 * (2.0 * std::f64::consts::PI * sigma * sigma).ln()
        + (y - mu).powi(2) / (2.0 * sigma * sigma))
}

/// Standard median: middle element, or the mean of the middle two.
pub fn median_metric(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(GxeError::Degenerate("median of an empty set".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    Ok(if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    })
}

/// Averaging baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    /// Mean of all training responses.
    GlobalAvg,
    /// Mean of training responses of the target's variety.
    VarietyAvg,
    /// Mean of training responses of the target's environment.
    EnvAvg,
}

impl BaselineKind {
    /// Report and command-line name.
    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::GlobalAvg => "GLO_A",
            BaselineKind::VarietyAvg => "VAR_A",
            BaselineKind::EnvAvg => "ENV_A",
        }
    }
}

/// Mean of the relevant training subset, or `None` when that subset is
/// empty (for example the environment average for an unseen environment).
pub fn baseline_predict(
    kind: BaselineKind,
    data: &Dataset,
    train: &[usize],
    variety: usize,
    environment: usize,
) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for &rec in train {
        let obs = &data.records[rec];
        let keep = match kind {
            BaselineKind::GlobalAvg => true,
            BaselineKind::VarietyAvg => obs.variety == variety,
            BaselineKind::EnvAvg => obs.environment == environment,
        };
        if keep {
            sum += obs.value;
            count += 1;
        }
    }
    (count > 0).then(|| sum / count as f64)
}

/// A prediction method: one of the Gaussian-process presets or an
/// averaging baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodSpec {
    /// Gaussian process with a numbered kernel pair and a combination mode.
    Gp {
        /// Preset number, 1 through 9.
        preset: u8,
        /// How the genotype and environment kernels combine.
        mode: CombinationMode,
    },
    /// An averaging baseline.
    Baseline(BaselineKind),
}

/// The environment kernel family of each numbered preset, in blocks of
/// three.
const PRESET_ENV: [EnvKernelFamily; 3] = [
    EnvKernelFamily::GauEucl,
    EnvKernelFamily::ExpEucl,
    EnvKernelFamily::Gak,
];

/// The genotype kernel family cycling within each block.
const PRESET_GENO: [GenoKernelFamily; 3] = [
    GenoKernelFamily::GauGblup,
    GenoKernelFamily::ExpHamming,
    GenoKernelFamily::Spectrum,
];

impl MethodSpec {
    /// Parses a method name: `GP<1-9>` with an optional mode suffix from
    /// {G, E, +, x, ~} (full combination when omitted), or one of the
    /// baselines GLO_A, VAR_A, ENV_A.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        match s.to_ascii_uppercase().as_str() {
            "GLO_A" => return Ok(MethodSpec::Baseline(BaselineKind::GlobalAvg)),
            "VAR_A" => return Ok(MethodSpec::Baseline(BaselineKind::VarietyAvg)),
            "ENV_A" => return Ok(MethodSpec::Baseline(BaselineKind::EnvAvg)),
            _ => {}
        }
        let invalid = || {
            GxeError::Domain(format!(
                "unknown method {s:?}; valid methods are GP1..GP9 with an optional \
                 mode suffix from {{G, E, +, x, ~}} (e.g. GP5~), GLO_A, VAR_A and ENV_A"
            ))
        };
        let rest = s
            .strip_prefix("GP")
            .or_else(|| s.strip_prefix("gp"))
            .ok_or_else(invalid)?;
        let mut chars = rest.chars();
        let digit = chars.next().ok_or_else(invalid)?;
        let preset = digit.to_digit(10).ok_or_else(invalid)? as u8;
        if !(1..=9).contains(&preset) {
            return Err(invalid());
        }
        let mode = match chars.as_str() {
            "" => CombinationMode::Full,
            code => CombinationMode::from_code(code).map_err(|_| invalid())?,
        };
        Ok(MethodSpec::Gp { preset, mode })
    }

    /// Replaces the combination mode; baselines have none and are rejected.
    pub fn with_mode(self, mode: CombinationMode) -> Result<Self> {
        match self {
            MethodSpec::Gp { preset, .. } => Ok(MethodSpec::Gp { preset, mode }),
            MethodSpec::Baseline(kind) => Err(GxeError::Domain(format!(
                "baseline {} has no combination mode",
                kind.name()
            ))),
        }
    }

    /// Canonical report name, e.g. `GP5~` or `GLO_A`.
    pub fn name(&self) -> String {
        match self {
            MethodSpec::Gp { preset, mode } => format!("GP{preset}{}", mode.code()),
            MethodSpec::Baseline(kind) => kind.name().to_string(),
        }
    }

    /// Kernel families and mode of a Gaussian-process method; `None` for
    /// baselines.
    pub fn kernel_config(&self) -> Option<KernelConfig> {
        match self {
            MethodSpec::Gp { preset, mode } => {
                let idx = (preset - 1) as usize;
                Some(KernelConfig {
                    geno: PRESET_GENO[idx % 3],
                    env: PRESET_ENV[idx / 3],
                    mode: *mode,
                })
            }
            MethodSpec::Baseline(_) => None,
        }
    }

    /// True for Gaussian-process methods (probabilistic, carry a log
    /// score).
    pub fn is_gp(&self) -> bool {
        matches!(self, MethodSpec::Gp { .. })
    }
}

impl std::fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name())
    }
}

/// Scores of one split; absent metrics mean the method abstained or the
/// split failed.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitScore {
    /// Split index within the plan.
    pub split: usize,
    /// Training records used.
    pub n_train: usize,
    /// Test records scored.
    pub n_test: usize,
    /// Mean squared error over test points.
    pub mse: Option<f64>,
    /// Median continuous ranked probability score over test points.
    pub crps: Option<f64>,
    /// Median log score over test points; absent for point predictors.
    pub logs: Option<f64>,
    /// Why the split failed, when it did.
    pub failure: Option<String>,
    /// Non-fatal conditions from splitting, normalization and fitting.
    pub warnings: Vec<String>,
}

/// All splits of one method under one plan, plus cross-split medians.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Canonical method name.
    pub method: String,
    /// Scenario evaluated.
    pub scenario: Scenario,
    /// Leakage records per test group.
    pub leakage: usize,
    /// Trait the dataset measures.
    pub trait_kind: TraitKind,
    /// Per-split scores, in split order.
    pub splits: Vec<SplitScore>,
    /// Median of per-split mean squared errors.
    pub median_mse: Option<f64>,
    /// Median of per-split median continuous ranked probability scores.
    pub median_crps: Option<f64>,
    /// Median of per-split median log scores.
    pub median_logs: Option<f64>,
    /// Splits that failed to fit or had nothing to score.
    pub n_failed: usize,
}

/// Evaluates one method over every split of the plan.
///
/// Splits run in parallel on `jobs` threads (0 picks the machine default)
/// and are reported in split order regardless of completion order. A split
/// that fails to fit is recorded with its failure reason and excluded from
/// the medians. The optimizer's batch seed is derived from the plan's
/// master seed and the split index, so reports depend only on the plan
/// seed.
pub fn evaluate(
    method: MethodSpec,
    data: &Dataset,
    plan: &SplitPlan,
    optimizer: &OptimizerConfig,
    jobs: usize,
) -> Result<MetricsReport> {
    optimizer.validate()?;
    let splits = make_splits(data, plan)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| GxeError::Optimizer(format!("thread pool: {e}")))?;
    let scores: Vec<SplitScore> = pool.install(|| {
        splits
            .par_iter()
            .enumerate()
            .map(|(i, split)| {
                let mut opt = optimizer.clone();
                opt.seed = plan
                    .master_seed
                    .wrapping_add((i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                score_split(method, data, i, split, &opt)
            })
            .collect()
    });

    let collect = |field: fn(&SplitScore) -> Option<f64>| -> Option<f64> {
        let values: Vec<f64> = scores.iter().filter_map(field).collect();
        (!values.is_empty()).then(|| median_metric(&values).expect("nonempty"))
    };
    let median_mse = collect(|s| s.mse);
    let median_crps = collect(|s| s.crps);
    let median_logs = collect(|s| s.logs);
    let n_failed = scores.iter().filter(|s| s.failure.is_some()).count();
    Ok(MetricsReport {
        method: method.name(),
        scenario: plan.scenario,
        leakage: plan.leakage,
        trait_kind: data.trait_kind,
        splits: scores,
        median_mse,
        median_crps,
        median_logs,
        n_failed,
    })
}

/// Fits (for Gaussian-process methods) and scores one split.
pub fn score_split(
    method: MethodSpec,
    data: &Dataset,
    split_index: usize,
    split: &Split,
    optimizer: &OptimizerConfig,
) -> SplitScore {
    let mut score = SplitScore {
        split: split_index,
        n_train: split.train.len(),
        n_test: split.test.len(),
        mse: None,
        crps: None,
        logs: None,
        failure: None,
        warnings: split.warnings.clone(),
    };
    if split.train.is_empty() {
        score.failure = Some("empty training side".into());
        return score;
    }
    if split.test.is_empty() {
        score.failure = Some("no test records to score".into());
        return score;
    }
    let observed: Vec<f64> = split
        .test
        .iter()
        .map(|&rec| data.records[rec].value)
        .collect();

    match method {
        MethodSpec::Baseline(kind) => {
            let mut preds = Vec::new();
            let mut obs = Vec::new();
            let mut absent = 0usize;
            for (&rec, &y) in split.test.iter().zip(&observed) {
                let o = &data.records[rec];
                match baseline_predict(kind, data, &split.train, o.variety, o.environment) {
                    Some(p) => {
                        preds.push(p);
                        obs.push(y);
                    }
                    None => absent += 1,
                }
            }
            if absent > 0 {
                score.warnings.push(format!(
                    "{} of {} test records had no {} prediction",
                    absent,
                    split.test.len(),
                    kind.name()
                ));
            }
            if preds.is_empty() {
                return score;
            }
            score.mse = Some(mse(&preds, &obs).expect("nonempty"));
            let abs_errors: Vec<f64> = preds
                .iter()
                .zip(&obs)
                .map(|(p, y)| (y - p).abs())
                .collect();
            score.crps = Some(median_metric(&abs_errors).expect("nonempty"));
        }
        MethodSpec::Gp { .. } => {
            let config = method.kernel_config().expect("gp method");
            if let Err(e) = score_gp_split(&config, data, split, optimizer, &mut score) {
                score.failure = Some(e.to_string());
                score.mse = None;
                score.crps = None;
                score.logs = None;
            }
        }
    }
    score
}

/// The Gaussian-process arm of [`score_split`]: normalize covariates on the
/// training environments, fit by grid search plus stochastic refinement,
/// and score the test side with observation-level predictive spread.
fn score_gp_split(
    config: &KernelConfig,
    data: &Dataset,
    split: &Split,
    optimizer: &OptimizerConfig,
    score: &mut SplitScore,
) -> Result<()> {
    let mut train_envs: Vec<String> = split
        .train
        .iter()
        .map(|&rec| data.env.ids()[data.records[rec].environment].clone())
        .collect();
    train_envs.sort_unstable();
    train_envs.dedup();
    let norm = EnvNormalization::fit(&data.env, &train_envs)?;
    score.warnings.extend(norm.warnings.iter().cloned());
    let env = norm.apply(&data.env)?;
    let workspace = KernelWorkspace::build(config, &data.genotypes, &env)?;

    let pairs: Vec<(usize, usize)> = split
        .train
        .iter()
        .map(|&rec| {
            let o = &data.records[rec];
            (o.variety, o.environment)
        })
        .collect();
    let z: Vec<f64> = split
        .train
        .iter()
        .map(|&rec| data.records[rec].value)
        .collect();
    let fit_data = FitData::new(&workspace, &pairs, &z)?;
    let init = grid_init(&fit_data, config)?;
    let fit = adam_fit(&init.hyper, &fit_data, config, optimizer).map_err(GxeError::from)?;
    score.warnings.extend(fit.warnings.iter().cloned());

    let model = GpModel::fit(&workspace, *config, fit.hyper, pairs, z)?;
    let targets: Vec<(usize, usize)> = split
        .test
        .iter()
        .map(|&rec| {
            let o = &data.records[rec];
            (o.variety, o.environment)
        })
        .collect();
    let (preds, warns) = model.predict(&targets)?;
    score.warnings.extend(warns);

    let observed: Vec<f64> = split
        .test
        .iter()
        .map(|&rec| data.records[rec].value)
        .collect();
    let means: Vec<f64> = preds.iter().map(|p| p.mean).collect();
    let mut crps_values = Vec::with_capacity(preds.len());
    let mut logs_values = Vec::with_capacity(preds.len());
    for (p, &y) in preds.iter().zip(&observed) {
        crps_values.push(crps_gaussian(p.mean, p.sd_observation, y)?);
        logs_values.push(log_score_gaussian(p.mean, p.sd_observation, y)?);
    }
    score.mse = Some(mse(&means, &observed)?);
    score.crps = Some(median_metric(&crps_values)?);
    score.logs = Some(median_metric(&logs_values)?);
    Ok(())
}

/// Formats an optional metric for CSV output: absent values become empty
/// cells.
fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes per-split rows as
/// `method,scenario,leakage,trait,split,mse,crps,logs`.
pub fn write_split_csv<W: std::io::Write>(out: W, reports: &[MetricsReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "method", "scenario", "leakage", "trait", "split", "mse", "crps", "logs",
    ])?;
    for report in reports {
        for s in &report.splits {
            w.write_record([
                report.method.as_str(),
                report.scenario.name(),
                &report.leakage.to_string(),
                report.trait_kind.name(),
                &s.split.to_string(),
                &cell(s.mse),
                &cell(s.crps),
                &cell(s.logs),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes one aggregated row per report:
/// `method,scenario,leakage,trait,median_mse,median_crps,median_logs,n_splits,n_failed`.
pub fn write_aggregate_csv<W: std::io::Write>(out: W, reports: &[MetricsReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "method",
        "scenario",
        "leakage",
        "trait",
        "median_mse",
        "median_crps",
        "median_logs",
        "n_splits",
        "n_failed",
    ])?;
    for report in reports {
        w.write_record([
            report.method.as_str(),
            report.scenario.name(),
            &report.leakage.to_string(),
            report.trait_kind.name(),
            &cell(report.median_mse),
            &cell(report.median_crps),
            &cell(report.median_logs),
            &report.splits.len().to_string(),
            &report.n_failed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
