//! Base correlation kernels, Gram matrices and the genotype-by-environment
//! combination rule.
//!
//! Every kernel in this crate is a *correlation* kernel: it equals 1 at zero
//! distance, so Gram matrices carry a unit diagonal and all variance scaling
//! lives in the model's variance parameters. A combined kernel is the convex
//! combination `alpha*k_G + beta*k_E + gamma*k_G*k_E` whose weights select
//! genotype-only, environment-only, additive, multiplicative or full models.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::GxeError;
use crate::Result;

/// Exponential correlation kernel `exp(-d / theta)` on a distance `d >= 0`.
pub fn exp_kernel(d: f64, theta: f64) -> Result<f64> {
    check_kernel_args(d, theta)?;
    if d == 0.0 {
        return Ok(1.0);
    }
    Ok((-d / theta).exp())
}

/// Gaussian correlation kernel `exp(-d^2 / theta^2)` on a distance `d >= 0`.
pub fn gau_kernel(d: f64, theta: f64) -> Result<f64> {
    check_kernel_args(d, theta)?;
    if d == 0.0 {
        return Ok(1.0);
    }
    Ok((-(d * d) / (theta * theta)).exp())
}

fn check_kernel_args(d: f64, theta: f64) -> Result<()> {
    if theta.is_nan() || theta <= 0.0 {
        return Err(GxeError::Domain(format!(
            "length scale must be positive, got {theta}"
        )));
    }
    if d.is_nan() || d < 0.0 {
        return Err(GxeError::Domain(format!(
            "distance must be nonnegative, got {d}"
        )));
    }
    Ok(())
}

/// A symmetric correlation matrix with unit diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramMatrix {
    m: DMatrix<f64>,
}

impl GramMatrix {
    /// Symmetry tolerance accepted by [`GramMatrix::new`].
    pub const SYMMETRY_TOL: f64 = 1e-12;
    /// Unit-diagonal tolerance accepted by [`GramMatrix::new`].
    pub const DIAGONAL_TOL: f64 = 1e-9;

    /// Validates symmetry, finiteness and the unit diagonal.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(GxeError::Dimension {
                what: "gram matrix must be square",
                expected: m.nrows(),
                found: m.ncols(),
            });
        }
        let n = m.nrows();
        for i in 0..n {
            if (m[(i, i)] - 1.0).abs() > Self::DIAGONAL_TOL {
                return Err(GxeError::Domain(format!(
                    "gram diagonal entry ({i},{i}) = {} is not 1",
                    m[(i, i)]
                )));
            }
            for j in 0..=i {
                let v = m[(i, j)];
                if !v.is_finite() {
                    return Err(GxeError::NonFinite(format!(
                        "gram entry ({i},{j}) is {v}"
                    )));
                }
                if (v - m[(j, i)]).abs() > Self::SYMMETRY_TOL {
                    return Err(GxeError::Domain(format!(
                        "gram entries ({i},{j}) and ({j},{i}) differ by {}",
                        (v - m[(j, i)]).abs()
                    )));
                }
            }
        }
        Ok(Self { m })
    }

    /// Wraps a matrix the caller has already validated (internal hot paths).
    pub(crate) fn new_unchecked(m: DMatrix<f64>) -> Self {
        Self { m }
    }

    /// Number of rows (= columns).
    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    /// The underlying matrix.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    /// Consumes the wrapper and returns the matrix.
    pub fn into_matrix(self) -> DMatrix<f64> {
        self.m
    }

    /// Entry accessor.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.m[(i, j)]
    }

    /// Eigenvalue-based positive-semidefiniteness report at tolerance `tol`.
    pub fn psd_report(&self, tol: f64) -> PsdReport {
        assert_psd(&self.m, tol)
    }
}

/// Outcome of an eigenvalue positive-semidefiniteness check.
#[derive(Debug, Clone, Copy)]
pub struct PsdReport {
    /// Smallest eigenvalue of the symmetrized matrix.
    pub min_eigenvalue: f64,
    /// Tolerance the check ran with.
    pub tol: f64,
}

impl PsdReport {
    /// True when the smallest eigenvalue is no smaller than `-tol`.
    pub fn ok(&self) -> bool {
        self.min_eigenvalue >= -self.tol
    }
}

/// Reports the smallest eigenvalue of a symmetric matrix; `ok()` holds iff it
/// is at least `-tol`.
pub fn assert_psd(m: &DMatrix<f64>, tol: f64) -> PsdReport {
    // Symmetrize first so tiny asymmetries do not leak complex parts.
    let sym = (m + m.transpose()).scale(0.5);
    let eig = sym.symmetric_eigenvalues();
    let min_eigenvalue = eig.iter().copied().fold(f64::INFINITY, f64::min);
    PsdReport {
        min_eigenvalue,
        tol,
    }
}

/// Builds the Gram matrix of `kernel` over `inputs`, evaluating only the
/// upper triangle and mirroring it.
pub fn gram<T>(inputs: &[T], kernel: impl Fn(&T, &T) -> Result<f64>) -> Result<GramMatrix> {
    let n = inputs.len();
    if n == 0 {
        return Err(GxeError::Degenerate("gram over empty input set".into()));
    }
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = kernel(&inputs[i], &inputs[j])?;
            if !v.is_finite() {
                return Err(GxeError::NonFinite(format!(
                    "kernel value for input pair ({i},{j}) is {v}"
                )));
            }
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    GramMatrix::new(m)
}

/// Convex weights of the combined kernel `alpha*k_G + beta*k_E + gamma*k_G*k_E`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CombinationWeights {
    /// Weight of the genotype kernel.
    pub alpha: f64,
    /// Weight of the environment kernel.
    pub beta: f64,
    /// Weight of the pointwise genotype-environment product.
    pub gamma: f64,
}

impl CombinationWeights {
    /// Simplex tolerance accepted by [`CombinationWeights::new`].
    pub const SIMPLEX_TOL: f64 = 1e-12;

    /// Validates that the weights lie on the probability simplex.
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        for (name, w) in [("alpha", alpha), ("beta", beta), ("gamma", gamma)] {
            if !w.is_finite() || !(-Self::SIMPLEX_TOL..=1.0 + Self::SIMPLEX_TOL).contains(&w) {
                return Err(GxeError::Domain(format!(
                    "combination weight {name} = {w} outside [0, 1]"
                )));
            }
        }
        let sum = alpha + beta + gamma;
        if (sum - 1.0).abs() > Self::SIMPLEX_TOL {
            return Err(GxeError::Domain(format!(
                "combination weights sum to {sum}, expected 1"
            )));
        }
        Ok(Self {
            alpha: alpha.clamp(0.0, 1.0),
            beta: beta.clamp(0.0, 1.0),
            gamma: gamma.clamp(0.0, 1.0),
        })
    }

    /// Pure genotype weights (1, 0, 0).
    pub fn genotype_only() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.0,
            gamma: 0.0,
        }
    }

    /// Pure environment weights (0, 1, 0).
    pub fn environment_only() -> Self {
        Self {
            alpha: 0.0,
            beta: 1.0,
            gamma: 0.0,
        }
    }

    /// Pure interaction weights (0, 0, 1).
    pub fn product_only() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            gamma: 1.0,
        }
    }
}

/// Which components of the combined kernel are free to carry weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombinationMode {
    /// Genotype kernel alone: weights fixed at (1, 0, 0).
    GOnly,
    /// Environment kernel alone: weights fixed at (0, 1, 0).
    EOnly,
    /// Additive mixture of genotype and environment kernels (`gamma = 0`).
    Additive,
    /// Pointwise product alone: weights fixed at (0, 0, 1).
    Product,
    /// All three components free.
    Full,
}

impl CombinationMode {
    /// All modes, in a fixed order.
    pub const ALL: [CombinationMode; 5] = [
        CombinationMode::GOnly,
        CombinationMode::EOnly,
        CombinationMode::Additive,
        CombinationMode::Product,
        CombinationMode::Full,
    ];

    /// Parses the single-character mode code used on the command line.
    pub fn from_code(code: &str) -> Result<Self> {
        match code {
            "G" => Ok(CombinationMode::GOnly),
            "E" => Ok(CombinationMode::EOnly),
            "+" => Ok(CombinationMode::Additive),
            "x" | "X" => Ok(CombinationMode::Product),
            "~" => Ok(CombinationMode::Full),
            other => Err(GxeError::Domain(format!(
                "unknown combination mode {other:?}; expected one of G, E, +, x, ~"
            ))),
        }
    }

    /// The single-character code used on the command line.
    pub fn code(&self) -> &'static str {
        match self {
            CombinationMode::GOnly => "G",
            CombinationMode::EOnly => "E",
            CombinationMode::Additive => "+",
            CombinationMode::Product => "x",
            CombinationMode::Full => "~",
        }
    }

    /// Weights pinned by the mode, or `None` when some weights remain free.
    pub fn fixed_weights(&self) -> Option<CombinationWeights> {
        match self {
            CombinationMode::GOnly => Some(CombinationWeights::genotype_only()),
            CombinationMode::EOnly => Some(CombinationWeights::environment_only()),
            CombinationMode::Product => Some(CombinationWeights::product_only()),
            CombinationMode::Additive | CombinationMode::Full => None,
        }
    }

    /// Indicator of which weights (alpha, beta, gamma) may be nonzero.
    pub fn active_components(&self) -> [bool; 3] {
        match self {
            CombinationMode::GOnly => [true, false, false],
            CombinationMode::EOnly => [false, true, false],
            CombinationMode::Additive => [true, true, false],
            CombinationMode::Product => [false, false, true],
            CombinationMode::Full => [true, true, true],
        }
    }

    /// True when the combined kernel reads the genotype Gram matrix.
    pub fn uses_genotype(&self) -> bool {
        let [a, _, g] = self.active_components();
        a || g
    }

    /// True when the combined kernel reads the environment Gram matrix.
    pub fn uses_environment(&self) -> bool {
        let [_, b, g] = self.active_components();
        b || g
    }

    /// True when `weights` respects the mode's zero pattern.
    pub fn admits(&self, weights: &CombinationWeights) -> bool {
        let [a, b, g] = self.active_components();
        let ok = |active: bool, w: f64| active || w.abs() <= CombinationWeights::SIMPLEX_TOL;
        ok(a, weights.alpha) && ok(b, weights.beta) && ok(g, weights.gamma)
    }

    /// Initialization weights for this mode: the admissible simplex vertices
    /// followed by the mode's barycenter.
    pub fn grid_weights(&self) -> Vec<CombinationWeights> {
        match self {
            CombinationMode::GOnly => vec![CombinationWeights::genotype_only()],
            CombinationMode::EOnly => vec![CombinationWeights::environment_only()],
            CombinationMode::Product => vec![CombinationWeights::product_only()],
            CombinationMode::Additive => vec![
                CombinationWeights::genotype_only(),
                CombinationWeights::environment_only(),
                CombinationWeights {
                    alpha: 0.5,
                    beta: 0.5,
                    gamma: 0.0,
                },
            ],
            CombinationMode::Full => vec![
                CombinationWeights::genotype_only(),
                CombinationWeights::environment_only(),
                CombinationWeights::product_only(),
                CombinationWeights {
                    alpha: 1.0 / 3.0,
                    beta: 1.0 / 3.0,
                    gamma: 1.0 / 3.0,
                },
            ],
        }
    }
}

/// Raw linear combination `alpha*kg + beta*ke + gamma*(kg . ke)` with no
/// constraint on the coefficients.
pub fn combine_parts(
    alpha: f64,
    beta: f64,
    gamma: f64,
    kg: &DMatrix<f64>,
    ke: &DMatrix<f64>,
) -> DMatrix<f64> {
    let mut out = kg.scale(alpha);
    out += ke.scale(beta);
    if gamma != 0.0 {
        out += kg.component_mul(ke).scale(gamma);
    }
    out
}

/// Combines genotype and environment Gram matrices under simplex `weights`.
pub fn combine(
    weights: &CombinationWeights,
    kg: &GramMatrix,
    ke: &GramMatrix,
) -> Result<GramMatrix> {
    if kg.dim() != ke.dim() {
        return Err(GxeError::Dimension {
            what: "genotype and environment gram matrices",
            expected: kg.dim(),
            found: ke.dim(),
        });
    }
    let m = combine_parts(
        weights.alpha,
        weights.beta,
        weights.gamma,
        kg.matrix(),
        ke.matrix(),
    );
    Ok(GramMatrix::new_unchecked(m))
}

/// Variance components of the equivalent linear mixed model.
///
/// With total variance `nu` and signal fraction `varsigma`, the combined-GP
/// observation covariance `nu * (varsigma*K + (1-varsigma)*I)` equals
/// `sigma_g2*K_G + sigma_e2*K_E + sigma_ge2*(K_G . K_E) + tau2*I`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceComponents {
    /// Additive genotype variance `alpha * nu * varsigma`.
    pub sigma_g2: f64,
    /// Additive environment variance `beta * nu * varsigma`.
    pub sigma_e2: f64,
    /// Interaction variance `gamma * nu * varsigma`.
    pub sigma_ge2: f64,
    /// Residual variance `(1 - varsigma) * nu`.
    pub tau2: f64,
}

/// Maps the GP parameterization to mixed-model variance components.
pub fn variance_components(
    weights: &CombinationWeights,
    nu: f64,
    varsigma: f64,
) -> VarianceComponents {
    VarianceComponents {
        sigma_g2: weights.alpha * nu * varsigma,
        sigma_e2: weights.beta * nu * varsigma,
        sigma_ge2: weights.gamma * nu * varsigma,
        tau2: (1.0 - varsigma) * nu,
    }
}

/// Observation correlation `varsigma*K + (1-varsigma)*I` of a combined Gram
/// matrix, before scaling by the total variance.
pub fn signal_noise_mix(k: &DMatrix<f64>, varsigma: f64) -> DMatrix<f64> {
    let n = k.nrows();
    let mut out = k.scale(varsigma);
    for i in 0..n {
        out[(i, i)] += 1.0 - varsigma;
    }
    out
}

/// Centered unit-diagonal helper for tests and diagnostics: scales a PSD
/// matrix to correlation form `D^{-1/2} K D^{-1/2}`.
pub fn to_correlation(k: &DMatrix<f64>) -> Result<GramMatrix> {
    let n = k.nrows();
    let mut d = DVector::zeros(n);
    for i in 0..n {
        let v = k[(i, i)];
        if v.is_nan() || v <= 0.0 {
            return Err(GxeError::Degenerate(format!(
                "cannot normalize: diagonal entry {i} is {v}"
            )));
        }
        d[i] = 1.0 / v.sqrt();
    }
    let mut out = k.clone();
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] *= d[i] * d[j];
        }
    }
    // Exact unit diagonal despite rounding.
    for i in 0..n {
        out[(i, i)] = 1.0;
    }
    GramMatrix::new(out)
}

/// Random correlation matrix: normalized `A A^T + delta I`. Test helper.
#[cfg(test)]
pub(crate) fn random_correlation(n: usize, rng: &mut rand_chacha::ChaCha12Rng) -> GramMatrix {
    use rand::RngExt;
    let a = DMatrix::from_fn(n, n + 2, |_, _| {
        rng.sample::<f64, _>(rand_distr::StandardNormal)
    });
    let k = &a * a.transpose() + DMatrix::identity(n, n).scale(0.1);
    to_correlation(&k).unwrap()
}
