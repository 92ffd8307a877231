//! Ordinary-kriging Gaussian-process regression.
//!
//! The observation covariance is parameterized as ν·K_ς with
//! K_ς = ςK + (1−ς)I, where K is the combined correlation matrix, ς is the
//! proportion of variance explained by the correlated signal, and ν is the
//! total variance. For fixed kernel hyperparameters the trend m̂ and the
//! variance ν̂ have closed-form maximum-likelihood estimates, giving a
//! profiled negative log-likelihood over the remaining parameters.
//! Prediction uses the ordinary-kriging formulas, whose variance includes
//! the inflation term for the estimated trend.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{EnvNormalization, EnvTable, GenotypeTable, TraitKind};
use crate::env::{EnvKernelCache, EnvKernelFamily};
use crate::error::GxeError;
use crate::geno::{GenoKernelCache, GenoKernelFamily};
use crate::kernel::{combine_parts, CombinationMode, CombinationWeights, GramMatrix};
use crate::Result;

/// Diagonal jitter added to K_ς before factorization.
pub const CHOLESKY_JITTER: f64 = 1e-8;

/// Floor applied to the profiled variance estimate ν̂.
pub const NU_FLOOR: f64 = 1e-12;

/// Kernel families and combination mode defining a model's covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelConfig {
    /// Genotype-side kernel family.
    pub geno: GenoKernelFamily,
    /// Environment-side kernel family.
    pub env: EnvKernelFamily,
    /// How the two sides combine.
    pub mode: CombinationMode,
}

/// Continuous and discrete kernel hyperparameters of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    /// Genotype length scale (ignored by the spectrum kernel).
    pub theta_g: f64,
    /// Environment length scale.
    pub theta_e: f64,
    /// Simplex weights of the combined kernel.
    pub weights: CombinationWeights,
    /// Proportion of the variance explained by the correlated signal, in [0,1].
    pub varsigma: f64,
    /// Total variance ν > 0.
    pub nu: f64,
    /// Window length of the spectrum kernel, when that family is in use.
    pub spectrum_k: Option<usize>,
}

impl Hyperparameters {
    /// Validates ranges and returns the parameter set.
    pub fn new(
        theta_g: f64,
        theta_e: f64,
        weights: CombinationWeights,
        varsigma: f64,
        nu: f64,
    ) -> Result<Self> {
        let h = Self {
            theta_g,
            theta_e,
            weights,
            varsigma,
            nu,
            spectrum_k: None,
        };
        h.validate()?;
        Ok(h)
    }

    /// Sets the spectrum window length.
    pub fn with_spectrum_k(mut self, k: usize) -> Self {
        self.spectrum_k = Some(k);
        self
    }

    /// Checks every invariant of the parameter set.
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_g > 0.0 && self.theta_g.is_finite()) {
            return Err(GxeError::Domain(format!(
                "genotype length scale must be positive and finite, got {}",
                self.theta_g
            )));
        }
        if !(self.theta_e > 0.0 && self.theta_e.is_finite()) {
            return Err(GxeError::Domain(format!(
                "environment length scale must be positive and finite, got {}",
                self.theta_e
            )));
        }
        if !(0.0..=1.0).contains(&self.varsigma) || !self.varsigma.is_finite() {
            return Err(GxeError::Domain(format!(
                "signal proportion must lie in [0,1], got {}",
                self.varsigma
            )));
        }
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return Err(GxeError::Domain(format!(
                "total variance must be positive and finite, got {}",
                self.nu
            )));
        }
        if let Some(k) = self.spectrum_k {
            if k == 0 {
                return Err(GxeError::Domain(
                    "spectrum window length must be positive".into(),
                ));
            }
        }
        // CombinationWeights is validated on construction; re-check in case
        // of direct field edits through deserialization.
        CombinationWeights::new(self.weights.alpha, self.weights.beta, self.weights.gamma)?;
        Ok(())
    }

    /// Signal variance σ_K² = ςν.
    pub fn signal_variance(&self) -> f64 {
        self.varsigma * self.nu
    }

    /// Noise variance τ² = (1−ς)ν.
    pub fn noise_variance(&self) -> f64 {
        (1.0 - self.varsigma) * self.nu
    }
}

/// Entity-level kernel caches plus the id vocabularies they index.
///
/// Built once per dataset; every Gram evaluation during fitting and
/// prediction reads from these caches.
#[derive(Debug, Clone)]
pub struct KernelWorkspace {
    geno: GenoKernelCache,
    env: EnvKernelCache,
    variety_ids: Vec<String>,
    env_ids: Vec<String>,
}

impl KernelWorkspace {
    /// Precomputes kernel structures over all varieties and environments.
    ///
    /// The environment table is expected to be normalized already.
    pub fn build(
        config: &KernelConfig,
        genotypes: &GenotypeTable,
        env_table: &EnvTable,
    ) -> Result<Self> {
        Ok(Self {
            geno: GenoKernelCache::build(config.geno, genotypes)?,
            env: EnvKernelCache::build(config.env, env_table)?,
            variety_ids: genotypes.ids().to_vec(),
            env_ids: env_table.ids().to_vec(),
        })
    }

    /// Genotype-side entity Gram at the given hyperparameters.
    pub fn geno_gram(&self, hyper: &Hyperparameters) -> Result<DMatrix<f64>> {
        self.geno.gram(hyper.theta_g, hyper.spectrum_k)
    }

    /// Environment-side entity Gram at the given hyperparameters.
    pub fn env_gram(&self, hyper: &Hyperparameters) -> Result<DMatrix<f64>> {
        self.env.gram(hyper.theta_e)
    }

    /// The genotype-side cache.
    pub fn geno_cache(&self) -> &GenoKernelCache {
        &self.geno
    }

    /// The environment-side cache.
    pub fn env_cache(&self) -> &EnvKernelCache {
        &self.env
    }

    /// Variety identifiers, aligned with genotype Gram rows.
    pub fn variety_ids(&self) -> &[String] {
        &self.variety_ids
    }

    /// Environment identifiers, aligned with environment Gram rows.
    pub fn env_ids(&self) -> &[String] {
        &self.env_ids
    }
}

/// Result of profiling the trend and variance out of the likelihood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfiledFit {
    /// Profiled negative log-likelihood.
    pub nll: f64,
    /// Maximum-likelihood trend m̂.
    pub m_hat: f64,
    /// Maximum-likelihood total variance ν̂ (floored at `NU_FLOOR`).
    pub nu_hat: f64,
}

/// Shared state of a factorized K_ς fit.
#[derive(Debug, Clone)]
pub(crate) struct FitCore {
    pub m_hat: f64,
    pub nu_hat: f64,
    pub nll: f64,
    pub chol: Cholesky<f64, Dyn>,
    /// K_ς⁻¹(z − 1m̂).
    pub kinv_resid: DVector<f64>,
    /// K_ς⁻¹1.
    pub kinv_one: DVector<f64>,
}

/// Factorizes ςK + (1−ς)I + jitter·I and profiles m̂ and ν̂.
pub(crate) fn fit_core(k_obs: &DMatrix<f64>, varsigma: f64, z: &DVector<f64>) -> Result<FitCore> {
    let n = z.len();
    if n == 0 {
        return Err(GxeError::Degenerate("no training observations".into()));
    }
    if k_obs.nrows() != n || k_obs.ncols() != n {
        return Err(GxeError::Dimension {
            what: "observation Gram matrix",
            expected: n,
            found: k_obs.nrows(),
        });
    }
    let mut k_s = k_obs.scale(varsigma);
    for i in 0..n {
        k_s[(i, i)] += (1.0 - varsigma) + CHOLESKY_JITTER;
    }
    let chol = match Cholesky::new(k_s.clone()) {
        Some(c) => c,
        None => {
            let min_eigenvalue = k_s
                .symmetric_eigenvalues()
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min);
            return Err(GxeError::NotPositiveDefinite { min_eigenvalue });
        }
    };
    let ones = DVector::from_element(n, 1.0);
    let kinv_one = chol.solve(&ones);
    let kinv_z = chol.solve(z);
    let one_kinv_one: f64 = ones.dot(&kinv_one);
    let m_hat = ones.dot(&kinv_z) / one_kinv_one;
    let residual = z - ones.scale(m_hat);
    let kinv_resid = chol.solve(&residual);
    let nu_hat = (residual.dot(&kinv_resid) / n as f64).max(NU_FLOOR);

    let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let n_f = n as f64;
    let nll = 0.5 * n_f * nu_hat.ln()
        + 0.5 * log_det
        + 0.5 * n_f * (1.0 + (2.0 * std::f64::consts::PI).ln());
    if !nll.is_finite() || !m_hat.is_finite() {
        return Err(GxeError::NonFinite("profiled likelihood".into()));
    }
    Ok(FitCore {
        m_hat,
        nu_hat,
        nll,
        chol,
        kinv_resid,
        kinv_one,
    })
}

/// Profiled negative log-likelihood of the remaining hyperparameters.
///
/// Combines the observation-level genotype and environment Grams with the
/// given weights, forms K_ς = ςK + (1−ς)I (plus jitter), and profiles out
/// the trend and total variance:
/// m̂ = (1ᵀK_ς⁻¹z)/(1ᵀK_ς⁻¹1), ν̂ = (z−1m̂)ᵀK_ς⁻¹(z−1m̂)/n, and
/// nll = (n/2)·ln ν̂ + ½·ln det K_ς + (n/2)(1 + ln 2π).
pub fn profiled_negloglik(
    kg_obs: &DMatrix<f64>,
    ke_obs: &DMatrix<f64>,
    weights: &CombinationWeights,
    varsigma: f64,
    z: &[f64],
) -> Result<ProfiledFit> {
    if z.len() < 2 {
        return Err(GxeError::Degenerate(format!(
            "likelihood profiling needs at least 2 observations, got {}",
            z.len()
        )));
    }
    let k = combine_parts(weights.alpha, weights.beta, weights.gamma, kg_obs, ke_obs);
    let zv = DVector::from_column_slice(z);
    let core = fit_core(&k, varsigma, &zv)?;
    Ok(ProfiledFit {
        nll: core.nll,
        m_hat: core.m_hat,
        nu_hat: core.nu_hat,
    })
}

/// Negative log-likelihood at explicit (m, ν), without profiling.
pub fn full_negloglik(
    k_obs: &DMatrix<f64>,
    varsigma: f64,
    z: &[f64],
    m: f64,
    nu: f64,
) -> Result<f64> {
    if nu <= 0.0 {
        return Err(GxeError::Domain(format!(
            "total variance must be positive, got {nu}"
        )));
    }
    let zv = DVector::from_column_slice(z);
    let n = zv.len();
    let mut k_s = k_obs.scale(varsigma);
    for i in 0..n {
        k_s[(i, i)] += (1.0 - varsigma) + CHOLESKY_JITTER;
    }
    let chol = Cholesky::new(k_s.clone()).ok_or_else(|| {
        let min_eigenvalue = k_s
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        GxeError::NotPositiveDefinite { min_eigenvalue }
    })?;
    let r = &zv - DVector::from_element(n, m);
    let quad = r.dot(&chol.solve(&r));
    let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let n_f = n as f64;
    Ok(0.5 * quad / nu
        + 0.5 * n_f * nu.ln()
        + 0.5 * log_det
        + 0.5 * n_f * (2.0 * std::f64::consts::PI).ln())
}

/// One Gaussian predictive distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    /// Posterior mean, in trait units.
    pub mean: f64,
    /// Standard deviation of the latent (noise-free) value.
    pub sd_latent: f64,
    /// Standard deviation of a new noisy observation (adds τ²).
    pub sd_observation: f64,
}

/// A fitted ordinary-kriging model over a fixed entity universe.
///
/// Holds the entity-level Grams evaluated at the fitted hyperparameters, the
/// training observations, and the factorized K_ς. Immutable once built, so
/// predictions from multiple threads are safe.
#[derive(Debug, Clone)]
pub struct GpModel {
    config: KernelConfig,
    hyper: Hyperparameters,
    trend: f64,
    kg: DMatrix<f64>,
    ke: DMatrix<f64>,
    variety_ids: Vec<String>,
    env_ids: Vec<String>,
    variety_index: HashMap<String, usize>,
    env_index: HashMap<String, usize>,
    train_pairs: Vec<(usize, usize)>,
    responses: DVector<f64>,
    core: FitCore,
    one_kinv_one: f64,
}

impl GpModel {
    /// Builds a model from entity-level Grams.
    ///
    /// `train_pairs` index (variety, environment) per observation; the trend
    /// is profiled from the responses; ν and every kernel hyperparameter
    /// come from `hyper`.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        config: KernelConfig,
        hyper: Hyperparameters,
        kg: DMatrix<f64>,
        ke: DMatrix<f64>,
        variety_ids: Vec<String>,
        env_ids: Vec<String>,
        train_pairs: Vec<(usize, usize)>,
        responses: Vec<f64>,
    ) -> Result<Self> {
        hyper.validate()?;
        if !config.mode.admits(&hyper.weights) {
            return Err(GxeError::Domain(format!(
                "weights ({}, {}, {}) are not admissible for combination mode {}",
                hyper.weights.alpha,
                hyper.weights.beta,
                hyper.weights.gamma,
                config.mode.code()
            )));
        }
        if kg.nrows() != variety_ids.len() {
            return Err(GxeError::Dimension {
                what: "genotype Gram matrix",
                expected: variety_ids.len(),
                found: kg.nrows(),
            });
        }
        if ke.nrows() != env_ids.len() {
            return Err(GxeError::Dimension {
                what: "environment Gram matrix",
                expected: env_ids.len(),
                found: ke.nrows(),
            });
        }
        if train_pairs.len() != responses.len() {
            return Err(GxeError::Dimension {
                what: "responses",
                expected: train_pairs.len(),
                found: responses.len(),
            });
        }
        if train_pairs.is_empty() {
            return Err(GxeError::Degenerate("no training observations".into()));
        }
        for &(v, e) in &train_pairs {
            if v >= variety_ids.len() || e >= env_ids.len() {
                return Err(GxeError::Domain(format!(
                    "training pair ({v}, {e}) outside the entity universe"
                )));
            }
        }
        if responses.iter().any(|v| !v.is_finite()) {
            return Err(GxeError::NonFinite("training responses".into()));
        }

        let z = DVector::from_column_slice(&responses);
        let k_obs = combined_obs_gram(&hyper.weights, &kg, &ke, &train_pairs);
        let core = fit_core(&k_obs, hyper.varsigma, &z)?;
        let one_kinv_one = core.kinv_one.sum();
        let trend = core.m_hat;
        let variety_index = variety_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        let env_index = env_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        Ok(Self {
            config,
            hyper,
            trend,
            kg,
            ke,
            variety_ids,
            env_ids,
            variety_index,
            env_index,
            train_pairs,
            responses: z,
            core,
            one_kinv_one,
        })
    }

    /// Builds a model by evaluating the workspace's kernels at `hyper`.
    pub fn fit(
        workspace: &KernelWorkspace,
        config: KernelConfig,
        hyper: Hyperparameters,
        train_pairs: Vec<(usize, usize)>,
        responses: Vec<f64>,
    ) -> Result<Self> {
        let kg = workspace.geno_gram(&hyper)?;
        let ke = workspace.env_gram(&hyper)?;
        Self::build(
            config,
            hyper,
            kg,
            ke,
            workspace.variety_ids().to_vec(),
            workspace.env_ids().to_vec(),
            train_pairs,
            responses,
        )
    }

    /// The kernel configuration.
    pub fn config(&self) -> &KernelConfig {
        &self.config
    }

    /// The fitted hyperparameters.
    pub fn hyper(&self) -> &Hyperparameters {
        &self.hyper
    }

    /// The profiled trend m̂.
    pub fn trend(&self) -> f64 {
        self.trend
    }

    /// Number of training observations.
    pub fn train_len(&self) -> usize {
        self.train_pairs.len()
    }

    /// Training (variety, environment) index pairs.
    pub fn train_pairs(&self) -> &[(usize, usize)] {
        &self.train_pairs
    }

    /// Training responses.
    pub fn responses(&self) -> &[f64] {
        self.responses.as_slice()
    }

    /// Variety identifiers of the entity universe.
    pub fn variety_ids(&self) -> &[String] {
        &self.variety_ids
    }

    /// Environment identifiers of the entity universe.
    pub fn env_ids(&self) -> &[String] {
        &self.env_ids
    }

    /// Index of a variety id in the entity universe.
    pub fn variety_index(&self, id: &str) -> Option<usize> {
        self.variety_index.get(id).copied()
    }

    /// Index of an environment id in the entity universe.
    pub fn env_index(&self, id: &str) -> Option<usize> {
        self.env_index.get(id).copied()
    }

    /// The factorized K_ς (with jitter), rebuilt as L·Lᵀ.
    pub fn factored_k_varsigma(&self) -> DMatrix<f64> {
        let l = self.core.chol.l();
        &l * l.transpose()
    }

    /// Cross-covariance vector r(x) = ς·k_combined(x, training points).
    fn cross_vector(&self, variety: usize, env: usize) -> DVector<f64> {
        let w = &self.hyper.weights;
        let s = self.hyper.varsigma;
        DVector::from_fn(self.train_pairs.len(), |i, _| {
            let (vi, ei) = self.train_pairs[i];
            let g = self.kg[(variety, vi)];
            let e = self.ke[(env, ei)];
            s * (w.alpha * g + w.beta * e + w.gamma * g * e)
        })
    }

    /// Ordinary-kriging predictions at (variety, environment) index pairs.
    ///
    /// Returns the per-point predictive distributions plus warnings for any
    /// variance clamp that exceeded 1e-8·ν.
    pub fn predict(
        &self,
        targets: &[(usize, usize)],
    ) -> Result<(Vec<PredictiveDistribution>, Vec<String>)> {
        let mut out = Vec::with_capacity(targets.len());
        let mut warnings = Vec::new();
        let nu = self.hyper.nu;
        let s = self.hyper.varsigma;
        let tau2 = self.hyper.noise_variance();
        for (t, &(v, e)) in targets.iter().enumerate() {
            if v >= self.variety_ids.len() || e >= self.env_ids.len() {
                return Err(GxeError::Domain(format!(
                    "target pair ({v}, {e}) outside the entity universe"
                )));
            }
            let r = self.cross_vector(v, e);
            let mean = self.trend + r.dot(&self.core.kinv_resid);
            let kinv_r = self.core.chol.solve(&r);
            let one_kinv_r = kinv_r.sum();
            let raw = nu
                * (s - r.dot(&kinv_r) + (1.0 - one_kinv_r).powi(2) / self.one_kinv_one);
            let latent_var = raw.max(0.0);
            if raw < -1e-8 * nu {
                warnings.push(format!(
                    "latent variance clamped from {raw:.3e} to 0 at target {t}"
                ));
            }
            if !mean.is_finite() {
                return Err(GxeError::NonFinite(format!("posterior mean at target {t}")));
            }
            out.push(PredictiveDistribution {
                mean,
                sd_latent: latent_var.sqrt(),
                sd_observation: (latent_var + tau2).sqrt(),
            });
        }
        Ok((out, warnings))
    }

    /// Predictions at (variety id, environment id) pairs.
    pub fn predict_ids(
        &self,
        targets: &[(String, String)],
    ) -> Result<(Vec<PredictiveDistribution>, Vec<String>)> {
        let mut indices = Vec::with_capacity(targets.len());
        for (vid, eid) in targets {
            let v = self.variety_index(vid).ok_or_else(|| GxeError::UnknownId {
                kind: "variety",
                id: vid.clone(),
            })?;
            let e = self.env_index(eid).ok_or_else(|| GxeError::UnknownId {
                kind: "environment",
                id: eid.clone(),
            })?;
            indices.push((v, e));
        }
        self.predict(&indices)
    }
}

/// Ordinary-kriging predictions at the given targets.
pub fn posterior_predict(
    model: &GpModel,
    targets: &[(usize, usize)],
) -> Result<(Vec<PredictiveDistribution>, Vec<String>)> {
    model.predict(targets)
}

/// Gathers the observation-level combined Gram from entity Grams.
pub fn combined_obs_gram(
    weights: &CombinationWeights,
    kg: &DMatrix<f64>,
    ke: &DMatrix<f64>,
    pairs: &[(usize, usize)],
) -> DMatrix<f64> {
    let n = pairs.len();
    let kg_obs = DMatrix::from_fn(n, n, |r, c| kg[(pairs[r].0, pairs[c].0)]);
    let ke_obs = DMatrix::from_fn(n, n, |r, c| ke[(pairs[r].1, pairs[c].1)]);
    combine_parts(weights.alpha, weights.beta, weights.gamma, &kg_obs, &ke_obs)
}

/// Draws z ~ N(1m, ν(ςK + (1−ς)I)) by Cholesky, deterministically per seed.
pub fn sample_prior(
    k: &GramMatrix,
    hyper: &Hyperparameters,
    m: f64,
    seed: u64,
) -> Result<DVector<f64>> {
    hyper.validate()?;
    let n = k.dim();
    let mut k_s = k.matrix().scale(hyper.varsigma);
    for i in 0..n {
        k_s[(i, i)] += (1.0 - hyper.varsigma) + CHOLESKY_JITTER;
    }
    let chol = Cholesky::new(k_s.clone()).ok_or_else(|| {
        let min_eigenvalue = k_s
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        GxeError::NotPositiveDefinite { min_eigenvalue }
    })?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let u = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
    Ok(DVector::from_element(n, m) + (chol.l() * u).scale(hyper.nu.sqrt()))
}

/// One training observation as stored in a model document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainObservation {
    /// Variety identifier.
    pub variety_id: String,
    /// Environment identifier.
    pub environment_id: String,
    /// Observed trait value.
    pub value: f64,
}

/// Serializable model state: everything needed to rebuild a `GpModel` given
/// the covariate tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    /// Format tag, checked on load.
    pub format: String,
    /// Trait the model was fitted on.
    pub trait_kind: TraitKind,
    /// Kernel families and combination mode.
    pub config: KernelConfig,
    /// Fitted hyperparameters.
    pub hyper: Hyperparameters,
    /// Profiled trend m̂.
    pub trend: f64,
    /// Training observations by id.
    pub train: Vec<TrainObservation>,
    /// Environment normalization fitted on the training environments.
    pub env_normalization: EnvNormalization,
}

/// Format tag of model documents written by this crate.
pub const MODEL_FORMAT: &str = "gxe-model-v1";

impl ModelDocument {
    /// Assembles a document from a fitted model.
    pub fn from_model(
        model: &GpModel,
        trait_kind: TraitKind,
        env_normalization: EnvNormalization,
    ) -> Self {
        let train = model
            .train_pairs()
            .iter()
            .zip(model.responses())
            .map(|(&(v, e), &value)| TrainObservation {
                variety_id: model.variety_ids()[v].clone(),
                environment_id: model.env_ids()[e].clone(),
                value,
            })
            .collect();
        Self {
            format: MODEL_FORMAT.to_string(),
            trait_kind,
            config: model.config,
            hyper: model.hyper.clone(),
            trend: model.trend,
            train,
            env_normalization,
        }
    }

    /// Writes the document as JSON.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path.as_ref())?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)?;
        Ok(())
    }

    /// Reads a document from JSON, checking the format tag.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref())?;
        let doc: Self = serde_json::from_reader(BufReader::new(file))?;
        if doc.format != MODEL_FORMAT {
            return Err(GxeError::Format(format!(
                "unsupported model format {:?} (expected {MODEL_FORMAT:?})",
                doc.format
            )));
        }
        doc.hyper.validate()?;
        Ok(doc)
    }

    /// Rebuilds the fitted model against covariate tables.
    ///
    /// The raw environment table is normalized with the stored statistics;
    /// every training id must resolve in the given tables.
    pub fn into_model(&self, genotypes: &GenotypeTable, env_raw: &EnvTable) -> Result<GpModel> {
        let normalized = self.env_normalization.apply(env_raw)?;
        let workspace = KernelWorkspace::build(&self.config, genotypes, &normalized)?;
        let mut pairs = Vec::with_capacity(self.train.len());
        let mut responses = Vec::with_capacity(self.train.len());
        for obs in &self.train {
            let v = genotypes
                .row(&obs.variety_id)
                .ok_or_else(|| GxeError::UnknownId {
                    kind: "variety",
                    id: obs.variety_id.clone(),
                })?;
            let e = normalized
                .row(&obs.environment_id)
                .ok_or_else(|| GxeError::UnknownId {
                    kind: "environment",
                    id: obs.environment_id.clone(),
                })?;
            pairs.push((v, e));
            responses.push(obs.value);
        }
        GpModel::fit(&workspace, self.config, self.hyper.clone(), pairs, responses)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::random_correlation;
    use crate::synth::{oracle_posterior, ORACLE_TREND_PRIOR_VAR};
    use approx::assert_relative_eq;
    use rand::RngExt;
    use rand_chacha::ChaCha12Rng;

    fn simple_hyper(varsigma: f64, nu: f64) -> Hyperparameters {
        Hyperparameters::new(0.5, 0.5, CombinationWeights::new(0.4, 0.4, 0.2).unwrap(), varsigma, nu)
            .unwrap()
    }

    fn full_config() -> KernelConfig {
        KernelConfig {
            geno: GenoKernelFamily::ExpHamming,
            env: EnvKernelFamily::GauEucl,
            mode: CombinationMode::Full,
        }
    }

    /// Model over an explicit pair of entity correlation matrices, with all
    /// distinct (variety i, environment i) training pairs.
    fn diagonal_model(
        kg: DMatrix<f64>,
        ke: DMatrix<f64>,
        z: Vec<f64>,
        hyper: Hyperparameters,
    ) -> GpModel {
        let nv = kg.nrows();
        let ne = ke.nrows();
        let pairs: Vec<(usize, usize)> = z
            .iter()
            .enumerate()
            .map(|(i, _)| (i % nv, i % ne))
            .collect();
        GpModel::build(
            full_config(),
            hyper,
            kg,
            ke,
            (0..nv).map(|i| format!("v{i}")).collect(),
            (0..ne).map(|i| format!("e{i}")).collect(),
            pairs,
            z,
        )
        .unwrap()
    }

    #[test]
    fn profiled_nll_matches_hand_computed_two_point_case() {
        // With varsigma = 0 the covariance is the identity; z = (0, 2) gives
        // m-hat = 1, nu-hat = 1, nll = 1 + ln(2*pi).
        let kg = DMatrix::identity(2, 2);
        let ke = DMatrix::identity(2, 2);
        let w = CombinationWeights::new(0.5, 0.5, 0.0).unwrap();
        let fit = profiled_negloglik(&kg, &ke, &w, 0.0, &[0.0, 2.0]).unwrap();
        assert_relative_eq!(fit.m_hat, 1.0, max_relative = 1e-10);
        assert_relative_eq!(fit.nu_hat, 1.0, max_relative = 1e-6);
        let expected = 1.0 + (2.0 * std::f64::consts::PI).ln();
        assert!((fit.nll - expected).abs() < 1e-6, "nll {}", fit.nll);
    }

    #[test]
    fn constant_responses_hit_the_variance_floor() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let kg = random_correlation(5, &mut rng).into_matrix();
        let ke = random_correlation(5, &mut rng).into_matrix();
        let w = CombinationWeights::new(0.3, 0.3, 0.4).unwrap();
        let fit = profiled_negloglik(&kg, &ke, &w, 0.7, &[2.5; 5]).unwrap();
        assert_relative_eq!(fit.m_hat, 2.5, max_relative = 1e-9);
        assert_eq!(fit.nu_hat, NU_FLOOR);
    }

    #[test]
    fn nll_prefers_the_generating_length_scale() {
        // Draw from a Gaussian kernel at theta = 0.5 over scalar inputs and
        // check the profiled nll is lower there than at a mismatched theta.
        let n = 40;
        let xs: Vec<f64> = (0..n).map(|i| i as f64 / 8.0).collect();
        let k_at = |theta: f64| {
            DMatrix::from_fn(n, n, |i, j| {
                let d = (xs[i] - xs[j]).abs();
                (-d * d / (theta * theta)).exp()
            })
        };
        let k_true = crate::kernel::GramMatrix::new(k_at(0.5)).unwrap();
        let z = sample_prior(&k_true, &simple_hyper(0.9, 1.0), 0.0, 99).unwrap();
        let id = DMatrix::identity(n, n);
        let w = CombinationWeights::genotype_only();
        let zs: Vec<f64> = z.iter().copied().collect();
        let nll_true = profiled_negloglik(&k_at(0.5), &id, &w, 0.9, &zs).unwrap().nll;
        let nll_off = profiled_negloglik(&k_at(8.0), &id, &w, 0.9, &zs).unwrap().nll;
        assert!(
            nll_true < nll_off,
            "matched {nll_true} vs mismatched {nll_off}"
        );
    }

    #[test]
    fn factorization_failure_reports_the_minimum_eigenvalue() {
        // A "correlation" with an eigenvalue of -1 cannot be factorized at
        // varsigma = 1.
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let id = DMatrix::identity(2, 2);
        let w = CombinationWeights::genotype_only();
        let err = profiled_negloglik(&bad, &id, &w, 1.0, &[0.0, 1.0]).unwrap_err();
        match err {
            GxeError::NotPositiveDefinite { min_eigenvalue } => {
                assert!((min_eigenvalue - -1.0).abs() < 1e-6, "{min_eigenvalue}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn noise_free_model_interpolates_training_points() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let kg = random_correlation(6, &mut rng).into_matrix();
        let ke = random_correlation(6, &mut rng).into_matrix();
        let z: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
        let model = diagonal_model(kg, ke, z.clone(), simple_hyper(1.0, 2.0));
        let (preds, warnings) = model.predict(model.train_pairs()).unwrap();
        assert!(warnings.is_empty(), "{warnings:?}");
        let scale = z.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for (p, want) in preds.iter().zip(&z) {
            assert!(
                (p.mean - want).abs() <= 1e-6 * scale.max(1.0),
                "mean {} vs {}",
                p.mean,
                want
            );
            assert!(p.sd_latent < 1e-3, "sd_latent {}", p.sd_latent);
        }
    }

    #[test]
    fn single_training_point_predicts_its_own_value_everywhere() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let kg = random_correlation(3, &mut rng).into_matrix();
        let ke = random_correlation(3, &mut rng).into_matrix();
        let model = GpModel::build(
            full_config(),
            simple_hyper(0.8, 1.0),
            kg,
            ke,
            vec!["v0".into(), "v1".into(), "v2".into()],
            vec!["e0".into(), "e1".into(), "e2".into()],
            vec![(0, 0)],
            vec![1.7],
        )
        .unwrap();
        assert_relative_eq!(model.trend(), 1.7, max_relative = 1e-12);
        let (preds, _) = model
            .predict(&[(0, 0), (1, 2), (2, 1)])
            .unwrap();
        for p in preds {
            assert_relative_eq!(p.mean, 1.7, max_relative = 1e-9);
        }
    }

    #[test]
    fn totally_dissimilar_targets_fall_back_to_the_trend() {
        // Identity entity Grams: a target entity pair sharing no entity with
        // training has r(x) = 0 exactly.
        let kg = DMatrix::identity(4, 4);
        let ke = DMatrix::identity(4, 4);
        let z = vec![1.0, 2.0, 0.5];
        let hyper = simple_hyper(0.6, 1.5);
        let nv = 4;
        let pairs: Vec<(usize, usize)> = (0..3).map(|i| (i % nv, i % nv)).collect();
        let model = GpModel::build(
            full_config(),
            hyper.clone(),
            kg,
            ke,
            (0..4).map(|i| format!("v{i}")).collect(),
            (0..4).map(|i| format!("e{i}")).collect(),
            pairs,
            z,
        )
        .unwrap();
        let (preds, _) = model.predict(&[(3, 3)]).unwrap();
        assert_relative_eq!(preds[0].mean, model.trend(), max_relative = 1e-12);
        // Latent variance reduces to nu * (varsigma + 1 / (1' Kinv 1)).
        let k_s = model.factored_k_varsigma();
        let ones = DVector::from_element(3, 1.0);
        let kinv1 = Cholesky::new(k_s).unwrap().solve(&ones);
        let expected = hyper.nu * (hyper.varsigma + 1.0 / ones.dot(&kinv1));
        assert_relative_eq!(
            preds[0].sd_latent * preds[0].sd_latent,
            expected,
            max_relative = 1e-10
        );
        // Observation variance adds (1 - varsigma) * nu on top.
        assert_relative_eq!(
            preds[0].sd_observation * preds[0].sd_observation,
            expected + hyper.noise_variance(),
            max_relative = 1e-10
        );
    }

    /// Inverse of a symmetric 3×3 matrix via the cofactor formula — an
    /// implementation path fully independent of any factorization code.
    fn inv3(k: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let det = k[0][0] * (k[1][1] * k[2][2] - k[1][2] * k[2][1])
            - k[0][1] * (k[1][0] * k[2][2] - k[1][2] * k[2][0])
            + k[0][2] * (k[1][0] * k[2][1] - k[1][1] * k[2][0]);
        let mut inv = [[0.0; 3]; 3];
        let c = |a: usize, b: usize, c_: usize, d: usize| k[a][b] * k[c_][d] - k[a][d] * k[c_][b];
        inv[0][0] = c(1, 1, 2, 2) / det;
        inv[0][1] = -c(0, 1, 2, 2) / det;
        inv[0][2] = c(0, 1, 1, 2) / det;
        inv[1][0] = inv[0][1];
        inv[1][1] = c(0, 0, 2, 2) / det;
        inv[1][2] = -c(0, 0, 1, 2) / det;
        inv[2][0] = inv[0][2];
        inv[2][1] = inv[1][2];
        inv[2][2] = c(0, 0, 1, 1) / det;
        inv
    }

    #[test]
    fn posterior_matches_hand_computed_three_point_kriging() {
        // A 3-observation, 1-target example worked through the kriging
        // formulas with an explicit cofactor inverse.
        let kg = DMatrix::from_row_slice(
            4,
            4,
            &[
                1.0, 0.6, 0.3, 0.5, //
                0.6, 1.0, 0.4, 0.2, //
                0.3, 0.4, 1.0, 0.35, //
                0.5, 0.2, 0.35, 1.0,
            ],
        );
        let ke = DMatrix::from_row_slice(
            4,
            4,
            &[
                1.0, 0.45, 0.25, 0.6, //
                0.45, 1.0, 0.5, 0.3, //
                0.25, 0.5, 1.0, 0.4, //
                0.6, 0.3, 0.4, 1.0,
            ],
        );
        let z = [0.8, -0.4, 1.3];
        let hyper = Hyperparameters::new(
            0.5,
            0.5,
            CombinationWeights::new(0.3, 0.5, 0.2).unwrap(),
            0.85,
            1.4,
        )
        .unwrap();
        let w = &hyper.weights;
        let s = hyper.varsigma;

        // Observation-level combined correlations for train pairs
        // (0,0),(1,1),(2,2) and target (3,3).
        let comb = |vi: usize, vj: usize| {
            let g = kg[(vi, vj)];
            let e = ke[(vi, vj)];
            w.alpha * g + w.beta * e + w.gamma * g * e
        };
        let mut k_s = [[0.0; 3]; 3];
        for (i, row) in k_s.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = s * comb(i, j);
                if i == j {
                    *cell += (1.0 - s) + CHOLESKY_JITTER;
                }
            }
        }
        let inv = inv3(&k_s);
        let r: Vec<f64> = (0..3).map(|i| s * comb(3, i)).collect();
        let matvec = |v: &[f64]| {
            let mut out = [0.0; 3];
            for i in 0..3 {
                for j in 0..3 {
                    out[i] += inv[i][j] * v[j];
                }
            }
            out
        };
        let kinv_one = matvec(&[1.0, 1.0, 1.0]);
        let kinv_z = matvec(&z);
        let one_kinv_one: f64 = kinv_one.iter().sum();
        let m_hat: f64 = kinv_z.iter().sum::<f64>() / one_kinv_one;
        let resid: Vec<f64> = z.iter().map(|v| v - m_hat).collect();
        let kinv_resid = matvec(&resid);
        let mean_hand: f64 =
            m_hat + r.iter().zip(&kinv_resid).map(|(a, b)| a * b).sum::<f64>();
        let kinv_r = matvec(&r);
        let r_kinv_r: f64 = r.iter().zip(&kinv_r).map(|(a, b)| a * b).sum();
        let one_kinv_r: f64 = kinv_r.iter().sum();
        let var_hand =
            hyper.nu * (s - r_kinv_r + (1.0 - one_kinv_r).powi(2) / one_kinv_one);

        let model = GpModel::build(
            full_config(),
            hyper.clone(),
            kg,
            ke,
            (0..4).map(|i| format!("v{i}")).collect(),
            (0..4).map(|i| format!("e{i}")).collect(),
            vec![(0, 0), (1, 1), (2, 2)],
            z.to_vec(),
        )
        .unwrap();
        assert_relative_eq!(model.trend(), m_hat, max_relative = 1e-10);
        let (preds, _) = model.predict(&[(3, 3)]).unwrap();
        assert_relative_eq!(preds[0].mean, mean_hand, max_relative = 1e-10);
        assert_relative_eq!(
            preds[0].sd_latent * preds[0].sd_latent,
            var_hand,
            max_relative = 1e-10
        );
    }

    #[test]
    fn posterior_agrees_with_the_wide_prior_conditioning_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        for trial in 0..10 {
            let n = rng.random_range(3..9);
            let kg = random_correlation(n + 1, &mut rng).into_matrix();
            let ke = random_correlation(n + 1, &mut rng).into_matrix();
            let varsigma = rng.random_range(0.3..0.95);
            let nu = rng.random_range(0.5..2.0);
            let hyper = Hyperparameters::new(
                0.5,
                0.5,
                CombinationWeights::new(0.25, 0.45, 0.3).unwrap(),
                varsigma,
                nu,
            )
            .unwrap();
            let z: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let pairs: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
            let model = GpModel::build(
                full_config(),
                hyper.clone(),
                kg.clone(),
                ke.clone(),
                (0..=n).map(|i| format!("v{i}")).collect(),
                (0..=n).map(|i| format!("e{i}")).collect(),
                pairs.clone(),
                z.clone(),
            )
            .unwrap();
            let (preds, _) = model.predict(&[(n, n)]).unwrap();

            // Observation-level joint covariance over the n train points plus
            // the target, noise on the whole diagonal.
            let mut all_pairs = pairs;
            all_pairs.push((n, n));
            let k_all = combined_obs_gram(&hyper.weights, &kg, &ke, &all_pairs);
            let mut joint = k_all.scale(nu * varsigma);
            for i in 0..=n {
                joint[(i, i)] += nu * (1.0 - varsigma);
            }
            let observed: Vec<usize> = (0..n).collect();
            let (om, ov) =
                oracle_posterior(&joint, &observed, &z, n, ORACLE_TREND_PRIOR_VAR).unwrap();
            let tol = 1e-4;
            assert!(
                (preds[0].mean - om).abs() <= tol * om.abs().max(1.0),
                "trial {trial}: mean {} vs oracle {om}",
                preds[0].mean
            );
            let obs_var = preds[0].sd_observation * preds[0].sd_observation;
            assert!(
                (obs_var - ov).abs() <= tol * ov.abs().max(1.0),
                "trial {trial}: variance {obs_var} vs oracle {ov}"
            );
        }
    }

    #[test]
    fn translation_shifts_means_and_preserves_the_nll_argmin() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let kg = random_correlation(8, &mut rng).into_matrix();
        let ke = random_correlation(8, &mut rng).into_matrix();
        let z: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let shifted: Vec<f64> = z.iter().map(|v| v + 10.0).collect();
        let hyper = simple_hyper(0.8, 1.0);

        let base = diagonal_model(kg.clone(), ke.clone(), z.clone(), hyper.clone());
        let moved = diagonal_model(kg.clone(), ke.clone(), shifted.clone(), hyper);
        assert_relative_eq!(moved.trend(), base.trend() + 10.0, max_relative = 1e-9);
        let targets = [(0usize, 3usize), (5, 1)];
        let (pb, _) = base.predict(&targets).unwrap();
        let (pm, _) = moved.predict(&targets).unwrap();
        for (a, b) in pb.iter().zip(&pm) {
            assert_relative_eq!(b.mean, a.mean + 10.0, max_relative = 1e-9);
            assert_relative_eq!(b.sd_latent, a.sd_latent, max_relative = 1e-9);
        }

        // The argmin of the profiled nll over a small varsigma grid does not
        // move under translation.
        let w = CombinationWeights::new(0.4, 0.4, 0.2).unwrap();
        let grid = [0.1, 0.3, 0.5, 0.7, 0.9];
        let argmin = |data: &[f64]| {
            grid.iter()
                .enumerate()
                .min_by(|(_, &a), (_, &b)| {
                    let fa = profiled_negloglik(&kg, &ke, &w, a, data).unwrap().nll;
                    let fb = profiled_negloglik(&kg, &ke, &w, b, data).unwrap().nll;
                    fa.partial_cmp(&fb).unwrap()
                })
                .unwrap()
                .0
        };
        assert_eq!(argmin(&z), argmin(&shifted));
    }

    #[test]
    fn profiling_attains_the_minimum_over_explicit_trend_and_variance() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let kg = random_correlation(7, &mut rng).into_matrix();
        let ke = random_correlation(7, &mut rng).into_matrix();
        let w = CombinationWeights::new(0.5, 0.2, 0.3).unwrap();
        let z: Vec<f64> = (0..7).map(|_| rng.random_range(-2.0..2.0)).collect();
        let varsigma = 0.75;
        let fit = profiled_negloglik(&kg, &ke, &w, varsigma, &z).unwrap();
        let k = combine_parts(w.alpha, w.beta, w.gamma, &kg, &ke);
        // The profiled value equals the full nll at (m-hat, nu-hat) and is
        // no larger than the full nll at random probes.
        let at_hat = full_negloglik(&k, varsigma, &z, fit.m_hat, fit.nu_hat).unwrap();
        assert_relative_eq!(fit.nll, at_hat, max_relative = 1e-9);
        for _ in 0..25 {
            let m = rng.random_range(-3.0..3.0);
            let nu = rng.random_range(0.01..5.0);
            let probe = full_negloglik(&k, varsigma, &z, m, nu).unwrap();
            assert!(
                fit.nll <= probe + 1e-9,
                "profiled {} vs probe {probe} at m={m}, nu={nu}",
                fit.nll
            );
        }
    }

    #[test]
    fn stored_factor_reproduces_k_varsigma() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let kg = random_correlation(6, &mut rng).into_matrix();
        let ke = random_correlation(6, &mut rng).into_matrix();
        let z: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let hyper = simple_hyper(0.65, 1.0);
        let model = diagonal_model(kg.clone(), ke.clone(), z, hyper.clone());
        let rebuilt = model.factored_k_varsigma();
        let pairs: Vec<(usize, usize)> = (0..6).map(|i| (i, i)).collect();
        let k_obs = combined_obs_gram(&hyper.weights, &kg, &ke, &pairs);
        for i in 0..6 {
            for j in 0..6 {
                let expected = hyper.varsigma * k_obs[(i, j)]
                    + if i == j {
                        (1.0 - hyper.varsigma) + CHOLESKY_JITTER
                    } else {
                        0.0
                    };
                assert!(
                    (rebuilt[(i, j)] - expected).abs() < 1e-8,
                    "entry ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn prior_samples_are_deterministic_and_degenerate_at_tiny_variance() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let k = random_correlation(5, &mut rng);
        let hyper = simple_hyper(0.7, 1.0);
        let a = sample_prior(&k, &hyper, 0.5, 42).unwrap();
        let b = sample_prior(&k, &hyper, 0.5, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_prior(&k, &hyper, 0.5, 43).unwrap();
        assert_ne!(a, c);

        let tiny = Hyperparameters::new(0.5, 0.5, hyper.weights, 0.7, NU_FLOOR).unwrap();
        let z = sample_prior(&k, &tiny, 2.0, 7).unwrap();
        for v in z.iter() {
            assert!((v - 2.0).abs() < 1e-4, "{v}");
        }
    }

    #[test]
    fn prior_sample_covariance_matches_the_target_covariance() {
        let mut rng = ChaCha12Rng::seed_from_u64(55);
        let k = random_correlation(3, &mut rng);
        let hyper = simple_hyper(0.6, 1.8);
        let m = 1.2;
        let draws = 20_000;
        let mut sum = DVector::zeros(3);
        let mut outer = DMatrix::zeros(3, 3);
        for seed in 0..draws {
            let z = sample_prior(&k, &hyper, m, seed).unwrap();
            sum += &z;
            outer += &z * z.transpose();
        }
        let mean = sum.scale(1.0 / draws as f64);
        let cov = outer.scale(1.0 / draws as f64) - &mean * mean.transpose();
        // Entrywise within 5% of the overall variance scale nu (tighter
        // relative bounds on near-zero off-diagonals would demand far more
        // draws than the Monte Carlo error allows).
        for i in 0..3 {
            for j in 0..3 {
                let target = hyper.nu
                    * (hyper.varsigma * k.get(i, j)
                        + if i == j { 1.0 - hyper.varsigma } else { 0.0 });
                assert!(
                    (cov[(i, j)] - target).abs() <= 0.05 * hyper.nu,
                    "entry ({i},{j}): sample {} vs target {target}",
                    cov[(i, j)]
                );
            }
        }
    }

    #[test]
    fn model_documents_round_trip_through_json() {
        use crate::data::{EnvNormalization, GenotypeTable};

        let rows = vec![
            ("v0".to_string(), "ACGTAC".to_string()),
            ("v1".to_string(), "ACGTTT".to_string()),
            ("v2".to_string(), "TTGTAC".to_string()),
        ];
        let genotypes = GenotypeTable::new(rows, b'-').unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let values: Vec<DMatrix<f64>> = (0..3)
            .map(|_| DMatrix::from_fn(6, 2, |_, _| rng.random_range(-1.0..2.0)))
            .collect();
        let env_raw = EnvTable::new(
            vec!["e0".into(), "e1".into(), "e2".into()],
            vec!["rain".into(), "temp".into()],
            values,
        )
        .unwrap();
        let refs: Vec<String> = env_raw.ids().to_vec();
        let norm = EnvNormalization::fit(&env_raw, &refs).unwrap();
        let normalized = norm.apply(&env_raw).unwrap();

        let config = KernelConfig {
            geno: GenoKernelFamily::ExpHamming,
            env: EnvKernelFamily::Gak,
            mode: CombinationMode::Full,
        };
        let workspace = KernelWorkspace::build(&config, &genotypes, &normalized).unwrap();
        let hyper = Hyperparameters::new(
            0.4,
            0.9,
            CombinationWeights::new(0.3, 0.4, 0.3).unwrap(),
            0.8,
            1.3,
        )
        .unwrap();
        let pairs = vec![(0, 0), (1, 1), (2, 2), (0, 1)];
        let z = vec![1.0, -0.2, 0.7, 0.4];
        let model = GpModel::fit(&workspace, config, hyper, pairs, z).unwrap();

        let doc = ModelDocument::from_model(&model, TraitKind::Yield, norm);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        doc.save(&path).unwrap();
        let loaded = ModelDocument::load(&path).unwrap();
        assert_eq!(doc, loaded);

        let rebuilt = loaded.into_model(&genotypes, &env_raw).unwrap();
        let targets = vec![(1usize, 2usize), (2, 0)];
        let (a, _) = model.predict(&targets).unwrap();
        let (b, _) = rebuilt.predict(&targets).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_relative_eq!(x.mean, y.mean, max_relative = 1e-12);
            assert_relative_eq!(x.sd_observation, y.sd_observation, max_relative = 1e-12);
        }

        // Unknown training id fails the rebuild with a named id.
        let mut broken = loaded.clone();
        broken.train[0].variety_id = "nope".into();
        let err = broken.into_model(&genotypes, &env_raw).unwrap_err();
        assert!(matches!(err, GxeError::UnknownId { kind: "variety", .. }));
    }

    #[test]
    fn predict_ids_rejects_unknown_identifiers() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let kg = random_correlation(3, &mut rng).into_matrix();
        let ke = random_correlation(3, &mut rng).into_matrix();
        let model = diagonal_model(kg, ke, vec![0.1, 0.2, 0.3], simple_hyper(0.5, 1.0));
        let ok = model.predict_ids(&[("v1".into(), "e2".into())]).unwrap();
        assert_eq!(ok.0.len(), 1);
        let err = model
            .predict_ids(&[("v9".into(), "e0".into())])
            .unwrap_err();
        assert!(matches!(err, GxeError::UnknownId { kind: "variety", .. }));
    }
}
