//! Synthetic data generation and independent brute-force oracles.
//!
//! The oracles re-derive values the fast implementations must reproduce,
//! through deliberately different routes: alignment kernels by exhaustive
//! path enumeration, spectrum kernels by dense feature vectors, CRPS by
//! adaptive quadrature of its integral definition, and the kriging posterior
//! by direct conditioning of an explicitly built joint Gaussian with a wide
//! prior on the trend. They are slow and guarded by small size limits; use
//! them in tests only.

use nalgebra::DMatrix;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{
    Dataset, EnvTable, GenotypeTable, Observation, TraitKind, TrialRecord, DEFAULT_MISSING,
    PERIODS, SNP_ALPHABET,
};
use crate::error::GxeError;
use crate::gp::{combined_obs_gram, sample_prior, Hyperparameters, KernelConfig, KernelWorkspace};
use crate::kernel::GramMatrix;
use crate::Result;

/// Trend-prior variance that emulates the unknown-constant-trend limit.
pub const ORACLE_TREND_PRIOR_VAR: f64 = 1e6;

/// Raw global alignment value by exhaustive enumeration of every monotone
/// lattice path, for series of at most 4 steps.
///
/// Series are row-major: one row per step, one column per variable.
pub fn oracle_gak_raw(a: &DMatrix<f64>, b: &DMatrix<f64>, theta: f64) -> Result<f64> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(GxeError::Degenerate("alignment of an empty series".into()));
    }
    if a.nrows() > 4 || b.nrows() > 4 {
        return Err(GxeError::Domain(format!(
            "oracle refuses series longer than 4 steps (got {} and {})",
            a.nrows(),
            b.nrows()
        )));
    }
    if a.ncols() != b.ncols() {
        return Err(GxeError::Dimension {
            what: "series step dimension",
            expected: a.ncols(),
            found: b.ncols(),
        });
    }
    if theta <= 0.0 {
        return Err(GxeError::Domain(format!(
            "length scale must be positive, got {theta}"
        )));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(GxeError::NonFinite("alignment oracle input".into()));
    }

    // Per-cell local kernel values kappa(i, j) = exp(-|a_i - b_j|^2 / (2 theta^2)).
    let n = a.nrows();
    let m = b.nrows();
    let mut kappa = vec![vec![0.0; m]; n];
    for (i, row) in kappa.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            let d2: f64 = (0..a.ncols())
                .map(|c| (a[(i, c)] - b[(j, c)]).powi(2))
                .sum();
            *cell = (-d2 / (2.0 * theta * theta)).exp();
        }
    }

    // Depth-first sum over all paths from (0,0) to (n-1,m-1) with steps
    // right, down, or diagonal, multiplying the local kernel at each visited
    // cell.
    fn walk(kappa: &[Vec<f64>], i: usize, j: usize, acc: f64, n: usize, m: usize) -> f64 {
        let acc = acc * kappa[i][j];
        if i == n - 1 && j == m - 1 {
            return acc;
        }
        let mut total = 0.0;
        if i + 1 < n {
            total += walk(kappa, i + 1, j, acc, n, m);
        }
        if j + 1 < m {
            total += walk(kappa, i, j + 1, acc, n, m);
        }
        if i + 1 < n && j + 1 < m {
            total += walk(kappa, i + 1, j + 1, acc, n, m);
        }
        total
    }
    Ok(walk(&kappa, 0, 0, 1.0, n, m))
}

/// Diagonal-normalized global alignment value by exhaustive enumeration.
pub fn oracle_gak(a: &DMatrix<f64>, b: &DMatrix<f64>, theta: f64) -> Result<f64> {
    let raw = oracle_gak_raw(a, b, theta)?;
    let aa = oracle_gak_raw(a, a, theta)?;
    let bb = oracle_gak_raw(b, b, theta)?;
    Ok(raw / (aa * bb).sqrt())
}

/// Cosine-normalized k-spectrum value from dense count vectors over the full
/// 8-symbol call alphabet, for k ≤ 4.
pub fn oracle_spectrum(a: &[u8], b: &[u8], k: usize, missing: u8) -> Result<f64> {
    if k == 0 || k > 4 {
        return Err(GxeError::Domain(format!(
            "oracle supports window lengths 1..=4, got {k}"
        )));
    }
    if k > a.len() || k > b.len() {
        return Err(GxeError::Domain(format!(
            "spectrum window length {k} exceeds a sequence length"
        )));
    }
    let index_of = |sym: u8| -> Result<usize> {
        SNP_ALPHABET
            .iter()
            .position(|&s| s == sym)
            .ok_or_else(|| GxeError::Domain(format!("symbol {:?} outside call alphabet", sym as char)))
    };
    let dense = |seq: &[u8]| -> Result<Vec<f64>> {
        let mut v = vec![0.0; SNP_ALPHABET.len().pow(k as u32)];
        'windows: for window in seq.windows(k) {
            let mut idx = 0usize;
            for &sym in window {
                if sym == missing {
                    continue 'windows;
                }
                idx = idx * SNP_ALPHABET.len() + index_of(sym)?;
            }
            v[idx] += 1.0;
        }
        Ok(v)
    };
    let va = dense(a)?;
    let vb = dense(b)?;
    let na = va.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = vb.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(GxeError::Degenerate(format!(
            "a sequence has no window of length {k} free of missing calls"
        )));
    }
    let dot: f64 = va.iter().zip(&vb).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// CRPS of a Gaussian forecast by adaptive Simpson quadrature of the
/// integral definition, absolute error target 1e-8.
pub fn oracle_crps(mu: f64, sigma: f64, y: f64) -> Result<f64> {
    if sigma <= 0.0 {
        return Err(GxeError::Domain(format!(
            "quadrature CRPS needs sigma > 0, got {sigma}"
        )));
    }
    let normal = Normal::new(mu, sigma)
        .map_err(|e| GxeError::Domain(format!("invalid Gaussian forecast: {e}")))?;
    // Below y the integrand is F(u)^2, above it (F(u)-1)^2. Integrating each
    // smooth branch separately keeps the jump at u = y out of the panels.
    let below = move |u: f64| {
        let f = normal.cdf(u);
        f * f
    };
    let above = move |u: f64| {
        let f = normal.cdf(u) - 1.0;
        f * f
    };
    // Cover 12σ around both the forecast mean and the outcome: an outcome
    // far outside the forecast contributes ≈|u − y| of integrand mass on the
    // stretch between them, which a mean-only window would silently drop.
    let lo = (mu - 12.0 * sigma).min(y - 12.0 * sigma);
    let hi = (mu + 12.0 * sigma).max(y + 12.0 * sigma);
    let split = y.clamp(lo, hi);
    let mut total = 0.0;
    if split > lo {
        total += adaptive_simpson(&below, lo, split, 0.5e-8)?;
    }
    if split < hi {
        total += adaptive_simpson(&above, split, hi, 0.5e-8)?;
    }
    Ok(total)
}

/// Adaptive Simpson integration with an absolute error target.
fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<f64> {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &impl Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> Result<f64> {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if delta.abs() <= 15.0 * tol {
            return Ok(left + right + delta / 15.0);
        }
        if depth == 0 {
            return Err(GxeError::Optimizer(
                "adaptive quadrature did not converge".into(),
            ));
        }
        let l = recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)?;
        let r = recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)?;
        Ok(l + r)
    }
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = simpson(fa, fm, fb, a, b);
    recurse(f, a, b, fa, fm, fb, whole, tol, 48)
}

/// Kriging posterior by direct conditioning of an explicitly built joint
/// Gaussian, with the unknown constant trend emulated by a zero-mean
/// Gaussian prior of the given variance.
///
/// `joint` is the observation-level covariance of all points (noise already
/// on its diagonal); `observed` indexes the conditioning points, paired with
/// the responses `z`; the returned pair is the conditional mean and variance
/// of the value at `target`. Linear algebra is a hand-rolled Gaussian
/// elimination, independent of the main implementation's Cholesky path.
pub fn oracle_posterior(
    joint: &DMatrix<f64>,
    observed: &[usize],
    z: &[f64],
    target: usize,
    trend_prior_var: f64,
) -> Result<(f64, f64)> {
    let m = joint.nrows();
    if joint.ncols() != m {
        return Err(GxeError::Dimension {
            what: "joint covariance",
            expected: m,
            found: joint.ncols(),
        });
    }
    if m > 50 {
        return Err(GxeError::Domain(format!(
            "oracle refuses joint covariances larger than 50 (got {m})"
        )));
    }
    if observed.is_empty() {
        return Err(GxeError::Degenerate("no observed indices".into()));
    }
    if observed.len() != z.len() {
        return Err(GxeError::Dimension {
            what: "responses",
            expected: observed.len(),
            found: z.len(),
        });
    }
    if observed.iter().any(|&i| i >= m) || target >= m {
        return Err(GxeError::Domain("index outside the joint covariance".into()));
    }
    if trend_prior_var < 0.0 {
        return Err(GxeError::Domain("negative trend-prior variance".into()));
    }

    let n = observed.len();
    // A = cov(z_obs), b = cov(z_obs, y_target), c = var(y_target), with the
    // trend prior adding trend_prior_var to every entry.
    let mut a = vec![vec![0.0; n]; n];
    for (r, &i) in observed.iter().enumerate() {
        for (c, &j) in observed.iter().enumerate() {
            a[r][c] = joint[(i, j)] + trend_prior_var;
        }
    }
    let b: Vec<f64> = observed
        .iter()
        .map(|&i| joint[(i, target)] + trend_prior_var)
        .collect();
    let c = joint[(target, target)] + trend_prior_var;

    // Solve A x = z and A w = b by Gaussian elimination with partial
    // pivoting; two right-hand sides at once.
    let mut rhs = vec![[0.0f64; 2]; n];
    for r in 0..n {
        rhs[r][0] = z[r];
        rhs[r][1] = b[r];
    }
    let scale: f64 = a
        .iter()
        .flat_map(|row| row.iter())
        .fold(0.0f64, |acc, &v| acc.max(v.abs()))
        .max(1.0);
    for col in 0..n {
        let (pivot_row, pivot_abs) = (col..n)
            .map(|r| (r, a[r][col].abs()))
            .fold((col, 0.0), |best, cand| if cand.1 > best.1 { cand } else { best });
        if pivot_abs <= 1e-12 * scale {
            return Err(GxeError::Degenerate("singular joint covariance".into()));
        }
        a.swap(col, pivot_row);
        rhs.swap(col, pivot_row);
        let pivot_vals = a[col].clone();
        for r in 0..n {
            if r == col {
                continue;
            }
            let factor = a[r][col] / pivot_vals[col];
            if factor == 0.0 {
                continue;
            }
            for (k, &pv) in pivot_vals.iter().enumerate().skip(col) {
                a[r][k] -= factor * pv;
            }
            rhs[r][0] -= factor * rhs[col][0];
            rhs[r][1] -= factor * rhs[col][1];
        }
    }
    let x: Vec<f64> = (0..n).map(|r| rhs[r][0] / a[r][r]).collect();
    let w: Vec<f64> = (0..n).map(|r| rhs[r][1] / a[r][r]).collect();

    let mean: f64 = b.iter().zip(&x).map(|(bi, xi)| bi * xi).sum();
    let var: f64 = c - b.iter().zip(&w).map(|(bi, wi)| bi * wi).sum::<f64>();
    if !mean.is_finite() || !var.is_finite() {
        return Err(GxeError::NonFinite("oracle posterior".into()));
    }
    Ok((mean, var))
}

/// Fraction of synthetic SNP calls drawn as heterozygote codes.
pub const HETEROZYGOTE_RATE: f64 = 0.05;

/// Fraction of synthetic SNP calls left missing.
pub const MISSING_RATE: f64 = 0.02;

/// Blueprint for a synthetic dataset drawn from a known Gaussian process.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    /// Number of varieties to invent.
    pub n_varieties: usize,
    /// Number of environments to invent.
    pub n_environments: usize,
    /// SNP markers per variety.
    pub sequence_length: usize,
    /// Weather variables per environment.
    pub n_variables: usize,
    /// Kernel families and combination mode of the generating process.
    pub kernel: KernelConfig,
    /// True hyperparameters of the generating process.
    pub hyper: Hyperparameters,
    /// True constant trend.
    pub trend: f64,
    /// Trait label stamped on the records.
    pub trait_kind: TraitKind,
    /// How many variety-environment combinations to observe: `None` keeps
    /// them all, `Some(n)` keeps a uniform subset of n.
    pub n_observations: Option<usize>,
    /// Seed making the whole draw reproducible.
    pub seed: u64,
}

impl SyntheticSpec {
    /// Checks counts and the generating parameters.
    pub fn validate(&self) -> Result<()> {
        for (what, n) in [
            ("varieties", self.n_varieties),
            ("environments", self.n_environments),
            ("markers", self.sequence_length),
            ("weather variables", self.n_variables),
        ] {
            if n < 2 {
                return Err(GxeError::Degenerate(format!(
                    "synthetic spec asks for {n} {what}; need at least 2"
                )));
            }
        }
        if !self.trend.is_finite() {
            return Err(GxeError::NonFinite(format!(
                "synthetic trend {}",
                self.trend
            )));
        }
        self.hyper.validate()?;
        if !self.kernel.mode.admits(&self.hyper.weights) {
            return Err(GxeError::Domain(format!(
                "weights ({}, {}, {}) put mass on components the {:?} mode pins to zero",
                self.hyper.weights.alpha,
                self.hyper.weights.beta,
                self.hyper.weights.gamma,
                self.kernel.mode
            )));
        }
        if let Some(n) = self.n_observations {
            let all = self.n_varieties * self.n_environments;
            if n < 2 || n > all {
                return Err(GxeError::Domain(format!(
                    "synthetic spec keeps {n} observations; need between 2 and {all}"
                )));
            }
        }
        Ok(())
    }
}

/// Draws a complete dataset from the process described by `spec`.
///
/// Varieties get uniform homozygote SNP calls with a [`HETEROZYGOTE_RATE`]
/// share of heterozygote codes and a [`MISSING_RATE`] share of missing
/// calls; environments get independent standard-normal covariates (already
/// on the normalized scale); responses are one draw from the Gaussian
/// process prior under the true kernel, parameters and trend. The draw is
/// deterministic given the seed.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;

    // Streams 1-3 cover genotypes, environments and the subset choice;
    // stream 0 stays reserved for the response draw inside sample_prior.
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let homozygotes = &SNP_ALPHABET[..4];
    let heterozygotes = &SNP_ALPHABET[4..];
    let mut rows: Vec<(String, String)> = (0..spec.n_varieties)
        .map(|v| {
            let id = format!("V{:03}", v + 1);
            let seq: String = (0..spec.sequence_length)
                .map(|_| {
                    let u: f64 = rng.random();
                    let call = if u < MISSING_RATE {
                        DEFAULT_MISSING
                    } else if u < MISSING_RATE + HETEROZYGOTE_RATE {
                        heterozygotes[rng.random_range(0..heterozygotes.len())]
                    } else {
                        homozygotes[rng.random_range(0..homozygotes.len())]
                    };
                    call as char
                })
                .collect();
            (id, seq)
        })
        .collect();
    // A marker left missing in every variety would be unusable downstream;
    // give such a column one concrete call.
    for j in 0..spec.sequence_length {
        if rows
            .iter()
            .all(|(_, seq)| seq.as_bytes()[j] == DEFAULT_MISSING)
        {
            let call = homozygotes[rng.random_range(0..homozygotes.len())];
            let mut bytes = rows[0].1.clone().into_bytes();
            bytes[j] = call;
            rows[0].1 = String::from_utf8(bytes).expect("SNP codes are ASCII");
        }
    }
    let genotypes = GenotypeTable::new(rows, DEFAULT_MISSING)?;

    rng.set_stream(2);
    let env_ids: Vec<String> = (0..spec.n_environments)
        .map(|e| format!("L{:02}_{}", e / 3 + 1, 2018 + e % 3))
        .collect();
    let variables: Vec<String> = (1..=spec.n_variables).map(|j| format!("var{j}")).collect();
    let series: Vec<DMatrix<f64>> = (0..spec.n_environments)
        .map(|_| {
            DMatrix::from_fn(PERIODS.len(), spec.n_variables, |_, _| {
                StandardNormal.sample(&mut rng)
            })
        })
        .collect();
    let env = EnvTable::new(env_ids, variables, series)?;

    rng.set_stream(3);
    let all_pairs: Vec<(usize, usize)> = (0..spec.n_varieties)
        .flat_map(|v| (0..spec.n_environments).map(move |e| (v, e)))
        .collect();
    let pairs: Vec<(usize, usize)> = match spec.n_observations {
        None => all_pairs,
        Some(n) => {
            let mut keep = rand::seq::index::sample(&mut rng, all_pairs.len(), n).into_vec();
            keep.sort_unstable();
            keep.into_iter().map(|i| all_pairs[i]).collect()
        }
    };

    let workspace = KernelWorkspace::build(&spec.kernel, &genotypes, &env)?;
    let kg = if spec.kernel.mode.uses_genotype() {
        workspace.geno_gram(&spec.hyper)?
    } else {
        DMatrix::identity(genotypes.len(), genotypes.len())
    };
    let ke = if spec.kernel.mode.uses_environment() {
        workspace.env_gram(&spec.hyper)?
    } else {
        DMatrix::identity(env.len(), env.len())
    };
    let obs_gram = combined_obs_gram(&spec.hyper.weights, &kg, &ke, &pairs);
    let z = sample_prior(
        &GramMatrix::new_unchecked(obs_gram),
        &spec.hyper,
        spec.trend,
        spec.seed,
    )?;

    let records = pairs
        .iter()
        .zip(z.iter())
        .map(|(&(variety, environment), &value)| Observation {
            variety,
            environment,
            value,
        })
        .collect();
    Ok(Dataset {
        trait_kind: spec.trait_kind,
        genotypes,
        env,
        records,
    })
}

/// Expands a dataset's observations back into trial records.
///
/// The environment id's `location_year` shape is split back into its parts;
/// ids without an underscore keep the whole id as the location and leave the
/// year empty.
pub fn dataset_to_trials(data: &Dataset) -> Vec<TrialRecord> {
    data.records
        .iter()
        .map(|obs| {
            let environment_id = data.env.ids()[obs.environment].clone();
            let (location, year) = match environment_id.rsplit_once('_') {
                Some((loc, yr)) => (loc.to_string(), yr.to_string()),
                None => (environment_id.clone(), String::new()),
            };
            TrialRecord {
                variety_id: data.genotypes.ids()[obs.variety].clone(),
                environment_id,
                location,
                year,
                trait_kind: data.trait_kind,
                value: obs.value,
            }
        })
        .collect()
}

/// Writes a dataset as the three standard CSV files, so generated data can
/// round-trip through the ingestion path.
pub fn write_dataset(
    data: &Dataset,
    trials_path: impl AsRef<std::path::Path>,
    genotypes_path: impl AsRef<std::path::Path>,
    env_path: impl AsRef<std::path::Path>,
) -> Result<()> {
    crate::data::write_trials(trials_path, &dataset_to_trials(data))?;
    crate::data::write_genotypes(genotypes_path, &data.genotypes)?;
    crate::data::write_env(env_path, &data.env)
}
