//! Environment-side kernels on per-environment meteorological series.
//!
//! An environment is a short time series: one row per period, one column per
//! normalized covariate. Two kernel styles are offered:
//!
//! * exponential / Gaussian kernels on the Euclidean distance between the
//!   flattened series, scaled by the square root of the coordinate count so
//!   the length scale is comparable across variable counts;
//! * a diagonal-normalized global alignment kernel that sums a Gaussian
//!   local similarity over every monotone alignment of the two series,
//!   computed in log space for stability.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::EnvTable;
use crate::error::GxeError;
use crate::kernel::{exp_kernel, gau_kernel};
use crate::Result;

/// Euclidean distance between flattened series, divided by the square root
/// of the coordinate count.
pub fn env_euclidean_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    check_series_pair(a, b)?;
    let ss: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((ss / (a.nrows() * a.ncols()) as f64).sqrt())
}

/// Exponential kernel on the scaled Euclidean distance.
pub fn exp_eucl_kernel(a: &DMatrix<f64>, b: &DMatrix<f64>, theta: f64) -> Result<f64> {
    exp_kernel(env_euclidean_distance(a, b)?, theta)
}

/// Gaussian kernel on the scaled Euclidean distance.
pub fn gau_eucl_kernel(a: &DMatrix<f64>, b: &DMatrix<f64>, theta: f64) -> Result<f64> {
    gau_kernel(env_euclidean_distance(a, b)?, theta)
}

/// Diagonal-normalized global alignment kernel.
///
/// The raw value sums, over every monotone alignment of the two series, the
/// product of local similarities exp(−‖u−v‖²/(2θ²)); the returned value is
/// raw(a,b) / √(raw(a,a)·raw(b,b)), so self-similarity is exactly 1.
pub fn gak_kernel(a: &DMatrix<f64>, b: &DMatrix<f64>, theta: f64) -> Result<f64> {
    check_series_pair(a, b)?;
    check_theta(theta)?;
    let lab = gak_log_raw_unchecked(a, b, theta);
    let laa = gak_log_raw_unchecked(a, a, theta);
    let lbb = gak_log_raw_unchecked(b, b, theta);
    let v = (lab - 0.5 * (laa + lbb)).exp();
    if !v.is_finite() {
        return Err(GxeError::NonFinite("alignment kernel value".into()));
    }
    Ok(v)
}

/// Natural log of the raw (unnormalized) global alignment value.
pub fn gak_log_raw(a: &DMatrix<f64>, b: &DMatrix<f64>, theta: f64) -> Result<f64> {
    check_series_pair(a, b)?;
    check_theta(theta)?;
    Ok(gak_log_raw_unchecked(a, b, theta))
}

fn check_theta(theta: f64) -> Result<()> {
    if theta.is_nan() || theta <= 0.0 {
        return Err(GxeError::Domain(format!(
            "length scale must be positive, got {theta}"
        )));
    }
    Ok(())
}

fn check_series_pair(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(GxeError::Degenerate("empty environment series".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(GxeError::Dimension {
            what: "series step dimension",
            expected: a.ncols(),
            found: b.ncols(),
        });
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(GxeError::NonFinite("environment series".into()));
    }
    Ok(())
}

/// Squared Euclidean distances between every step of `a` and every step of
/// `b` (one row per step of `a`).
fn step_sqdist(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        (0..a.ncols()).map(|c| (a[(i, c)] - b[(j, c)]).powi(2)).sum()
    })
}

/// Log-sum-exp of up to three values (unused slots are −∞).
fn logsumexp3(x: f64, y: f64, z: f64) -> f64 {
    let m = x.max(y).max(z);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + ((x - m).exp() + (y - m).exp() + (z - m).exp()).ln()
}

/// Log-space alignment dynamic program over a precomputed squared-distance
/// table: logM(i,j) = logκ(i,j) + logsumexp(logM(i−1,j), logM(i,j−1),
/// logM(i−1,j−1)) with a unit virtual origin and −∞ borders.
fn gak_log_dp(d2: &DMatrix<f64>, theta: f64) -> f64 {
    let (n, m) = d2.shape();
    let inv = 1.0 / (2.0 * theta * theta);
    let mut log_m = DMatrix::from_element(n, m, f64::NEG_INFINITY);
    for i in 0..n {
        for j in 0..m {
            let lk = -d2[(i, j)] * inv;
            let prev = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => log_m[(0, j - 1)],
                (_, 0) => log_m[(i - 1, 0)],
                _ => logsumexp3(log_m[(i - 1, j)], log_m[(i, j - 1)], log_m[(i - 1, j - 1)]),
            };
            log_m[(i, j)] = lk + prev;
        }
    }
    log_m[(n - 1, m - 1)]
}

fn gak_log_raw_unchecked(a: &DMatrix<f64>, b: &DMatrix<f64>, theta: f64) -> f64 {
    gak_log_dp(&step_sqdist(a, b), theta)
}

/// Log-space alignment DP carrying the derivative with respect to the length
/// scale by forward mode; returns (logM, d logM / dθ) at the final cell.
fn gak_log_dp_dtheta(d2: &DMatrix<f64>, theta: f64) -> (f64, f64) {
    let (n, m) = d2.shape();
    let inv = 1.0 / (2.0 * theta * theta);
    // d/dθ [ -d2/(2θ²) ] = d2/θ³
    let dinv = 1.0 / (theta * theta * theta);
    let mut log_m = DMatrix::from_element(n, m, f64::NEG_INFINITY);
    let mut dlog_m = DMatrix::from_element(n, m, 0.0);
    for i in 0..n {
        for j in 0..m {
            let lk = -d2[(i, j)] * inv;
            let dlk = d2[(i, j)] * dinv;
            let (prev, dprev) = match (i, j) {
                (0, 0) => (0.0, 0.0),
                (0, _) => (log_m[(0, j - 1)], dlog_m[(0, j - 1)]),
                (_, 0) => (log_m[(i - 1, 0)], dlog_m[(i - 1, 0)]),
                _ => {
                    let xs = [
                        log_m[(i - 1, j)],
                        log_m[(i, j - 1)],
                        log_m[(i - 1, j - 1)],
                    ];
                    let ds = [
                        dlog_m[(i - 1, j)],
                        dlog_m[(i, j - 1)],
                        dlog_m[(i - 1, j - 1)],
                    ];
                    let lse = logsumexp3(xs[0], xs[1], xs[2]);
                    // d logsumexp = Σ softmax(x_k) · dx_k
                    let mut d = 0.0;
                    for k in 0..3 {
                        d += (xs[k] - lse).exp() * ds[k];
                    }
                    (lse, d)
                }
            };
            log_m[(i, j)] = lk + prev;
            dlog_m[(i, j)] = dlk + dprev;
        }
    }
    (log_m[(n - 1, m - 1)], dlog_m[(n - 1, m - 1)])
}

/// Environment kernel families selectable by the model presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKernelFamily {
    /// Gaussian kernel on scaled Euclidean distances between flattened series.
    GauEucl,
    /// Exponential kernel on scaled Euclidean distances.
    ExpEucl,
    /// Normalized global alignment kernel over the period sequence.
    Gak,
}

impl EnvKernelFamily {
    /// Short name used in logs and traces.
    pub fn name(&self) -> &'static str {
        match self {
            EnvKernelFamily::GauEucl => "gau-eucl",
            EnvKernelFamily::ExpEucl => "exp-eucl",
            EnvKernelFamily::Gak => "gak",
        }
    }
}

/// Precomputed environment-side structures for fast Gram evaluation while
/// the length scale varies.
#[derive(Debug, Clone)]
pub struct EnvKernelCache {
    family: EnvKernelFamily,
    n: usize,
    /// Pairwise scaled Euclidean distances (Euclidean families).
    eucl: Option<DMatrix<f64>>,
    /// Per-pair step squared-distance tables, index i*n+j for i ≤ j (GAK).
    step_d2: Vec<DMatrix<f64>>,
    /// Largest step distance per distinct pair (GAK length-scale bound).
    max_step: Option<DMatrix<f64>>,
}

impl EnvKernelCache {
    /// Precomputes pairwise distances (or per-pair step-distance tables for
    /// the alignment kernel) over all environments of the table.
    ///
    /// The table is expected to hold normalized covariates already.
    pub fn build(family: EnvKernelFamily, table: &EnvTable) -> Result<Self> {
        let n = table.len();
        match family {
            EnvKernelFamily::GauEucl | EnvKernelFamily::ExpEucl => {
                let mut d = DMatrix::zeros(n, n);
                for i in 0..n {
                    for j in (i + 1)..n {
                        let v = env_euclidean_distance(table.series(i), table.series(j))?;
                        d[(i, j)] = v;
                        d[(j, i)] = v;
                    }
                }
                Ok(Self {
                    family,
                    n,
                    eucl: Some(d),
                    step_d2: Vec::new(),
                    max_step: None,
                })
            }
            EnvKernelFamily::Gak => {
                let mut tables = Vec::with_capacity(n * (n + 1) / 2);
                let mut max_step = DMatrix::zeros(n, n);
                for i in 0..n {
                    for j in i..n {
                        check_series_pair(table.series(i), table.series(j))?;
                        let d2 = step_sqdist(table.series(i), table.series(j));
                        if i != j {
                            let m = d2.iter().fold(0.0f64, |acc, &v| acc.max(v)).sqrt();
                            max_step[(i, j)] = m;
                            max_step[(j, i)] = m;
                        }
                        tables.push(d2);
                    }
                }
                Ok(Self {
                    family,
                    n,
                    eucl: None,
                    step_d2: tables,
                    max_step: Some(max_step),
                })
            }
        }
    }

    /// The kernel family of this cache.
    pub fn family(&self) -> EnvKernelFamily {
        self.family
    }

    /// Index into the row-major upper triangle (diagonal included).
    fn pair_index(&self, i: usize, j: usize) -> usize {
        let (lo, hi) = if i <= j { (i, j) } else { (j, i) };
        lo * (2 * self.n - lo + 1) / 2 + (hi - lo)
    }

    /// Entity-level Gram matrix at the given length scale.
    pub fn gram(&self, theta: f64) -> Result<DMatrix<f64>> {
        check_theta(theta)?;
        match self.family {
            EnvKernelFamily::ExpEucl => {
                let d = self.eucl.as_ref().expect("built with distances");
                elementwise(d, |v| exp_kernel(v, theta))
            }
            EnvKernelFamily::GauEucl => {
                let d = self.eucl.as_ref().expect("built with distances");
                elementwise(d, |v| gau_kernel(v, theta))
            }
            EnvKernelFamily::Gak => {
                let n = self.n;
                let self_logs: Vec<f64> = (0..n)
                    .map(|i| gak_log_dp(self.pair_table(i, i), theta))
                    .collect();
                let mut g = DMatrix::zeros(n, n);
                for i in 0..n {
                    g[(i, i)] = 1.0;
                    for j in (i + 1)..n {
                        let lab = gak_log_dp(self.pair_table(i, j), theta);
                        let v = (lab - 0.5 * (self_logs[i] + self_logs[j])).exp();
                        if !v.is_finite() {
                            return Err(GxeError::NonFinite(format!(
                                "alignment kernel between environments {i} and {j}"
                            )));
                        }
                        g[(i, j)] = v;
                        g[(j, i)] = v;
                    }
                }
                Ok(g)
            }
        }
    }

    /// Entrywise derivative of the Gram matrix with respect to the length
    /// scale.
    pub fn gram_dtheta(&self, theta: f64) -> Result<DMatrix<f64>> {
        check_theta(theta)?;
        match self.family {
            EnvKernelFamily::ExpEucl => {
                let d = self.eucl.as_ref().expect("built with distances");
                elementwise(d, |v| Ok(exp_kernel(v, theta)? * v / (theta * theta)))
            }
            EnvKernelFamily::GauEucl => {
                let d = self.eucl.as_ref().expect("built with distances");
                elementwise(d, |v| {
                    Ok(gau_kernel(v, theta)? * 2.0 * v * v / (theta * theta * theta))
                })
            }
            EnvKernelFamily::Gak => {
                let n = self.n;
                let selfs: Vec<(f64, f64)> = (0..n)
                    .map(|i| gak_log_dp_dtheta(self.pair_table(i, i), theta))
                    .collect();
                let mut g = DMatrix::zeros(n, n);
                for i in 0..n {
                    for j in (i + 1)..n {
                        let (lab, dlab) = gak_log_dp_dtheta(self.pair_table(i, j), theta);
                        let (laa, dlaa) = selfs[i];
                        let (lbb, dlbb) = selfs[j];
                        let value = (lab - 0.5 * (laa + lbb)).exp();
                        // d/dθ exp(l_ab − (l_aa+l_bb)/2)
                        let d = value * (dlab - 0.5 * (dlaa + dlbb));
                        g[(i, j)] = d;
                        g[(j, i)] = d;
                    }
                }
                Ok(g)
            }
        }
    }

    /// Gram matrix restricted to a subset of environments (indices into the
    /// full table), in subset order.
    pub fn gram_subset(&self, theta: f64, subset: &[usize]) -> Result<DMatrix<f64>> {
        check_theta(theta)?;
        match self.family {
            EnvKernelFamily::ExpEucl => {
                let d = self.eucl.as_ref().expect("built with distances");
                elementwise_subset(d, subset, |v| exp_kernel(v, theta))
            }
            EnvKernelFamily::GauEucl => {
                let d = self.eucl.as_ref().expect("built with distances");
                elementwise_subset(d, subset, |v| gau_kernel(v, theta))
            }
            EnvKernelFamily::Gak => {
                let m = subset.len();
                let self_logs: Vec<f64> = subset
                    .iter()
                    .map(|&i| gak_log_dp(self.pair_table(i, i), theta))
                    .collect();
                let mut g = DMatrix::zeros(m, m);
                for r in 0..m {
                    g[(r, r)] = 1.0;
                    for c in (r + 1)..m {
                        let (i, j) = (subset[r], subset[c]);
                        let lab = gak_log_dp(self.pair_table(i, j), theta);
                        let v = (lab - 0.5 * (self_logs[r] + self_logs[c])).exp();
                        if !v.is_finite() {
                            return Err(GxeError::NonFinite(format!(
                                "alignment kernel between environments {i} and {j}"
                            )));
                        }
                        g[(r, c)] = v;
                        g[(c, r)] = v;
                    }
                }
                Ok(g)
            }
        }
    }

    /// Derivative of `gram_subset` with respect to the length scale.
    pub fn gram_dtheta_subset(&self, theta: f64, subset: &[usize]) -> Result<DMatrix<f64>> {
        check_theta(theta)?;
        match self.family {
            EnvKernelFamily::ExpEucl => {
                let d = self.eucl.as_ref().expect("built with distances");
                elementwise_subset(d, subset, |v| Ok(exp_kernel(v, theta)? * v / (theta * theta)))
            }
            EnvKernelFamily::GauEucl => {
                let d = self.eucl.as_ref().expect("built with distances");
                elementwise_subset(d, subset, |v| {
                    Ok(gau_kernel(v, theta)? * 2.0 * v * v / (theta * theta * theta))
                })
            }
            EnvKernelFamily::Gak => {
                let m = subset.len();
                let selfs: Vec<(f64, f64)> = subset
                    .iter()
                    .map(|&i| gak_log_dp_dtheta(self.pair_table(i, i), theta))
                    .collect();
                let mut g = DMatrix::zeros(m, m);
                for r in 0..m {
                    for c in (r + 1)..m {
                        let (i, j) = (subset[r], subset[c]);
                        let (lab, dlab) = gak_log_dp_dtheta(self.pair_table(i, j), theta);
                        let (laa, dlaa) = selfs[r];
                        let (lbb, dlbb) = selfs[c];
                        let value = (lab - 0.5 * (laa + lbb)).exp();
                        let d = value * (dlab - 0.5 * (dlaa + dlbb));
                        g[(r, c)] = d;
                        g[(c, r)] = d;
                    }
                }
                Ok(g)
            }
        }
    }

    /// Largest pairwise distance among the given entities: flattened
    /// Euclidean for the Euclidean families, largest per-step distance for
    /// the alignment kernel.
    pub fn max_distance(&self, subset: &[usize]) -> Option<f64> {
        let d = self.eucl.as_ref().or(self.max_step.as_ref())?;
        let mut best = 0.0_f64;
        for (a, &i) in subset.iter().enumerate() {
            for &j in &subset[a + 1..] {
                best = best.max(d[(i, j)]);
            }
        }
        Some(best)
    }

    fn pair_table(&self, i: usize, j: usize) -> &DMatrix<f64> {
        &self.step_d2[self.pair_index(i, j)]
    }
}

/// Applies a scalar kernel entrywise to a distance matrix.
fn elementwise(d: &DMatrix<f64>, f: impl Fn(f64) -> Result<f64>) -> Result<DMatrix<f64>> {
    let n = d.nrows();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = f(0.0)?;
        for j in (i + 1)..n {
            let v = f(d[(i, j)])?;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    Ok(m)
}

fn elementwise_subset(
    d: &DMatrix<f64>,
    subset: &[usize],
    f: impl Fn(f64) -> Result<f64>,
) -> Result<DMatrix<f64>> {
    let n = subset.len();
    let mut m = DMatrix::zeros(n, n);
    for (r, &i) in subset.iter().enumerate() {
        m[(r, r)] = f(0.0)?;
        for (off, &j) in subset[r + 1..].iter().enumerate() {
            let c = r + 1 + off;
            let v = f(d[(i, j)])?;
            m[(r, c)] = v;
            m[(c, r)] = v;
        }
    }
    Ok(m)
}
