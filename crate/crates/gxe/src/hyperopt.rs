//! Hyperparameter estimation: a coarse grid initialization followed by Adam
//! refinement with half-batch gradients of the profiled likelihood.
//!
//! Continuous parameters are optimized in an unconstrained space — log length
//! scales (clipped from above at the training set's maximum point distance),
//! logit signal proportion, and softmax logits over the combination mode's
//! active weights — so every iterate maps back onto the feasible region by
//! construction. Discrete parameters (the spectrum window length) are chosen
//! during grid initialization and frozen.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::gp::{
    fit_core, profiled_negloglik, Hyperparameters, KernelConfig, KernelWorkspace, ProfiledFit,
};
use crate::kernel::{combine_parts, CombinationMode, CombinationWeights};
use crate::{GxeError, Result};

/// Length-scale fractions of θ_max probed during grid initialization.
pub const GRID_THETA_FRACTIONS: [f64; 5] = [0.05, 0.1, 0.25, 0.5, 1.0];

/// Signal proportions probed during grid initialization.
pub const GRID_VARSIGMA: [f64; 3] = [0.3, 0.6, 0.9];

/// Consecutive sub-tolerance steps required before declaring convergence.
const CONVERGENCE_RUN: usize = 10;

/// Gradient evaluations retried per iteration before the fit aborts.
const MAX_GRADIENT_RETRIES: usize = 5;

/// The full-data likelihood is re-evaluated every this many iterations to
/// keep the best-seen iterate honest despite noisy half-batch estimates.
const FULL_EVAL_EVERY: usize = 25;

/// ς is clamped this far away from {0, 1} before taking its logit.
const VARSIGMA_LOGIT_CLAMP: f64 = 1e-9;

/// Weights are floored here before taking logs for the softmax logits.
const WEIGHT_LOG_FLOOR: f64 = 1e-12;

/// Length scale stored for a side the model does not use.
const PLACEHOLDER_THETA: f64 = 1.0;

/// Adam settings and stopping rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    /// Base learning rate.
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay.
    pub decay_factor: f64,
    /// Iterations between learning-rate decays.
    pub decay_every: usize,
    /// Iteration budget.
    pub max_iters: usize,
    /// Adam first-moment smoothing.
    pub beta1: f64,
    /// Adam second-moment smoothing.
    pub beta2: f64,
    /// Adam denominator guard.
    pub epsilon: f64,
    /// Fraction of the training set per gradient batch, in (0, 0.5].
    pub batch_fraction: f64,
    /// Seed of the batch-sampling stream.
    pub seed: u64,
    /// Convergence tolerance on the largest transformed-parameter change.
    pub tolerance: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            decay_factor: 0.8,
            decay_every: 5,
            max_iters: 1000,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_fraction: 0.5,
            seed: 0,
            tolerance: 1e-5,
        }
    }
}

impl OptimizerConfig {
    /// Validates rates and fractions.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("epsilon", self.epsilon),
            ("tolerance", self.tolerance),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(GxeError::Domain(format!(
                    "{name} must be positive and finite, got {value}"
                )));
            }
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(GxeError::Domain(format!(
                "decay_factor must lie in (0, 1], got {}",
                self.decay_factor
            )));
        }
        if self.decay_every == 0 {
            return Err(GxeError::Domain("decay_every must be at least 1".into()));
        }
        if self.max_iters == 0 {
            return Err(GxeError::Domain("max_iters must be at least 1".into()));
        }
        for (name, value) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&value) {
                return Err(GxeError::Domain(format!(
                    "{name} must lie in [0, 1), got {value}"
                )));
            }
        }
        if !(self.batch_fraction > 0.0 && self.batch_fraction <= 0.5) {
            return Err(GxeError::Domain(format!(
                "batch_fraction must lie in (0, 0.5], got {}",
                self.batch_fraction
            )));
        }
        Ok(())
    }

    /// Learning rate applied at a 1-based iteration under the decay schedule.
    pub fn learning_rate_at(&self, iter: usize) -> f64 {
        debug_assert!(iter >= 1);
        let decays = ((iter - 1) / self.decay_every) as i32;
        self.learning_rate * self.decay_factor.powi(decays)
    }
}

/// One optimizer iteration as recorded in a [`FitTrace`].
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    /// 1-based iteration counter.
    pub iter: usize,
    /// Transformed parameters after the update and projection.
    pub params: Vec<f64>,
    /// Half-batch likelihood estimate at this iteration.
    pub nll: f64,
    /// Euclidean norm of the gradient estimate.
    pub grad_norm: f64,
}

/// Per-iteration optimizer record, exportable as CSV.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitTrace {
    /// Names of the transformed parameters, in column order.
    pub param_names: Vec<String>,
    /// One row per optimizer iteration.
    pub rows: Vec<TraceRow>,
}

impl FitTrace {
    /// Writes the trace as `iter,param...,nll,grad_norm` CSV.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "iter")?;
        for name in &self.param_names {
            write!(w, ",{name}")?;
        }
        writeln!(w, ",nll,grad_norm")?;
        for row in &self.rows {
            write!(w, "{}", row.iter)?;
            for p in &row.params {
                write!(w, ",{p}")?;
            }
            writeln!(w, ",{},{}", row.nll, row.grad_norm)?;
        }
        Ok(())
    }
}

/// Training observations bound to the kernel caches they index into.
#[derive(Debug, Clone, Copy)]
pub struct FitData<'a> {
    workspace: &'a KernelWorkspace,
    pairs: &'a [(usize, usize)],
    z: &'a [f64],
}

impl<'a> FitData<'a> {
    /// Binds (variety, environment) index pairs and responses to a workspace.
    pub fn new(
        workspace: &'a KernelWorkspace,
        pairs: &'a [(usize, usize)],
        z: &'a [f64],
    ) -> Result<Self> {
        if pairs.len() != z.len() {
            return Err(GxeError::Dimension {
                what: "responses",
                expected: pairs.len(),
                found: z.len(),
            });
        }
        if pairs.is_empty() {
            return Err(GxeError::Degenerate("no training observations".into()));
        }
        let nv = workspace.variety_ids().len();
        let ne = workspace.env_ids().len();
        for &(v, e) in pairs {
            if v >= nv {
                return Err(GxeError::Domain(format!(
                    "variety index {v} is out of range for {nv} varieties"
                )));
            }
            if e >= ne {
                return Err(GxeError::Domain(format!(
                    "environment index {e} is out of range for {ne} environments"
                )));
            }
        }
        if let Some(bad) = z.iter().find(|v| !v.is_finite()) {
            return Err(GxeError::NonFinite(format!("training response {bad}")));
        }
        Ok(Self {
            workspace,
            pairs,
            z,
        })
    }

    /// Number of training observations.
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    /// True when there are no observations (never, by construction).
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// The kernel workspace the index pairs refer to.
    pub fn workspace(&self) -> &'a KernelWorkspace {
        self.workspace
    }

    /// The (variety, environment) index pairs.
    pub fn pairs(&self) -> &'a [(usize, usize)] {
        self.pairs
    }

    /// The responses.
    pub fn z(&self) -> &'a [f64] {
        self.z
    }

    /// Sorted distinct entity indices per side plus pairs remapped onto them.
    fn compact(&self) -> (Vec<usize>, Vec<usize>, Vec<(usize, usize)>) {
        let mut used_g: Vec<usize> = self.pairs.iter().map(|p| p.0).collect();
        used_g.sort_unstable();
        used_g.dedup();
        let mut used_e: Vec<usize> = self.pairs.iter().map(|p| p.1).collect();
        used_e.sort_unstable();
        used_e.dedup();
        let cpairs = self
            .pairs
            .iter()
            .map(|&(v, e)| {
                (
                    used_g.binary_search(&v).expect("variety is present"),
                    used_e.binary_search(&e).expect("environment is present"),
                )
            })
            .collect();
        (used_g, used_e, cpairs)
    }
}

/// Which side's length scale a bound refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelSide {
    /// Genotype kernel.
    Genotype,
    /// Environment kernel.
    Environment,
}

/// Upper bound for a length scale: the maximum pairwise distance among the
/// training entities on that side (per-step distance for the alignment
/// kernel, which has no global metric).
pub fn theta_max(data: &FitData, side: KernelSide) -> Result<f64> {
    let (used_g, used_e, _) = data.compact();
    let (label, count, dist) = match side {
        KernelSide::Genotype => (
            "genotype",
            used_g.len(),
            data.workspace().geno_cache().max_distance(&used_g),
        ),
        KernelSide::Environment => (
            "environment",
            used_e.len(),
            data.workspace().env_cache().max_distance(&used_e),
        ),
    };
    if count < 2 {
        return Err(GxeError::Degenerate(format!(
            "the length-scale bound needs at least two distinct {label} entities, got {count}"
        )));
    }
    let d = dist.ok_or_else(|| {
        GxeError::Domain(format!("the {label}-side kernel has no length scale"))
    })?;
    if d <= 0.0 {
        return Err(GxeError::Degenerate(format!(
            "all {label} entities in the training set coincide; \
             the length-scale bound is degenerate"
        )));
    }
    Ok(d)
}

/// Positions of each free parameter in the transformed vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    mode: CombinationMode,
    theta_g: Option<usize>,
    theta_e: Option<usize>,
    varsigma: usize,
    weights: Option<WeightBlock>,
    len: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct WeightBlock {
    start: usize,
    active: [bool; 3],
}

impl ParamLayout {
    /// Derives the free parameters from the kernel configuration: length
    /// scales only where the mode uses that side (and the family has one),
    /// weight logits only where the mode leaves weights free.
    pub fn new(config: &KernelConfig) -> Self {
        let mut idx = 0;
        let theta_g = (config.geno.has_length_scale() && config.mode.uses_genotype()).then(|| {
            idx += 1;
            idx - 1
        });
        let theta_e = config.mode.uses_environment().then(|| {
            idx += 1;
            idx - 1
        });
        let varsigma = idx;
        idx += 1;
        let active = config.mode.active_components();
        let n_active = active.iter().filter(|&&a| a).count();
        let weights = (n_active > 1).then(|| {
            let start = idx;
            idx += n_active;
            WeightBlock { start, active }
        });
        Self {
            mode: config.mode,
            theta_g,
            theta_e,
            varsigma,
            weights,
            len: idx,
        }
    }

    /// Number of transformed parameters.
    pub fn len(&self) -> usize {
        self.len
    }

    /// True when no parameter is free (cannot happen: ς is always free).
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Column names in vector order, for traces.
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.len);
        if self.theta_g.is_some() {
            names.push("log_theta_g".to_string());
        }
        if self.theta_e.is_some() {
            names.push("log_theta_e".to_string());
        }
        names.push("logit_varsigma".to_string());
        if let Some(block) = &self.weights {
            let labels = ["logit_alpha", "logit_beta", "logit_gamma"];
            for (label, &active) in labels.iter().zip(&block.active) {
                if active {
                    names.push((*label).to_string());
                }
            }
        }
        names
    }

    /// Maps hyperparameters into the transformed vector.
    pub fn pack(&self, h: &Hyperparameters) -> DVector<f64> {
        let mut psi = DVector::zeros(self.len);
        if let Some(i) = self.theta_g {
            psi[i] = h.theta_g.ln();
        }
        if let Some(i) = self.theta_e {
            psi[i] = h.theta_e.ln();
        }
        let s = h
            .varsigma
            .clamp(VARSIGMA_LOGIT_CLAMP, 1.0 - VARSIGMA_LOGIT_CLAMP);
        psi[self.varsigma] = (s / (1.0 - s)).ln();
        if let Some(block) = &self.weights {
            let w = [h.weights.alpha, h.weights.beta, h.weights.gamma];
            let mut j = block.start;
            for (i, &active) in block.active.iter().enumerate() {
                if active {
                    psi[j] = w[i].max(WEIGHT_LOG_FLOOR).ln();
                    j += 1;
                }
            }
        }
        psi
    }

    /// Maps a transformed vector back to hyperparameters.
    ///
    /// ν is a placeholder 1.0 — it is profiled, not optimized directly — and
    /// the spectrum window must be filled in by the caller.
    pub fn unpack(&self, psi: &DVector<f64>, spectrum_k: Option<usize>) -> Hyperparameters {
        let theta_g = self.theta_g.map_or(PLACEHOLDER_THETA, |i| psi[i].exp());
        let theta_e = self.theta_e.map_or(PLACEHOLDER_THETA, |i| psi[i].exp());
        let varsigma = 1.0 / (1.0 + (-psi[self.varsigma]).exp());
        let weights = match &self.weights {
            None => self
                .mode
                .fixed_weights()
                .expect("modes without free weights pin them"),
            Some(block) => {
                let mut logits = [f64::NEG_INFINITY; 3];
                let mut j = block.start;
                for (i, &active) in block.active.iter().enumerate() {
                    if active {
                        logits[i] = psi[j];
                        j += 1;
                    }
                }
                let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut exps = [0.0f64; 3];
                for (e, &l) in exps.iter_mut().zip(&logits) {
                    *e = if l.is_finite() { (l - top).exp() } else { 0.0 };
                }
                let sum: f64 = exps.iter().sum();
                CombinationWeights::new(exps[0] / sum, exps[1] / sum, exps[2] / sum)
                    .expect("softmax lands on the simplex")
            }
        };
        Hyperparameters {
            theta_g,
            theta_e,
            weights,
            varsigma,
            nu: 1.0,
            spectrum_k,
        }
    }
}

/// Entity-level Gram matrices (and θ-derivatives) at one parameter point.
struct EntityEval {
    kg: DMatrix<f64>,
    ke: DMatrix<f64>,
    dkg: Option<DMatrix<f64>>,
    dke: Option<DMatrix<f64>>,
}

/// A half-batch gradient estimate.
#[derive(Debug, Clone)]
pub struct HalfBatch {
    /// Gradient estimate in transformed space, on the full-data scale.
    pub gradient: DVector<f64>,
    /// Likelihood estimate on the full-data scale.
    pub nll_estimate: f64,
    /// True when the data was too small to split and the full gradient was
    /// returned instead.
    pub full_fallback: bool,
}

/// The profiled likelihood as a function of transformed parameters, bound to
/// one training set and kernel configuration.
pub struct Objective<'a> {
    data: FitData<'a>,
    config: KernelConfig,
    spectrum_k: Option<usize>,
    layout: ParamLayout,
    /// ln θ_max caps, present for each active length scale.
    theta_cap_g: Option<f64>,
    theta_cap_e: Option<f64>,
    used_g: Vec<usize>,
    used_e: Vec<usize>,
    cpairs: Vec<(usize, usize)>,
}

impl<'a> Objective<'a> {
    /// Binds the likelihood to data, deriving the parameter layout and the
    /// length-scale caps.
    pub fn new(data: FitData<'a>, config: KernelConfig, spectrum_k: Option<usize>) -> Result<Self> {
        if data.len() < 2 {
            return Err(GxeError::Degenerate(format!(
                "likelihood optimization needs at least 2 observations, got {}",
                data.len()
            )));
        }
        if config.mode.uses_genotype() && !config.geno.has_length_scale() {
            let k = spectrum_k.ok_or_else(|| {
                GxeError::Domain("the spectrum kernel requires a window length k".into())
            })?;
            let feasible = data.workspace().geno_cache().feasible_spectrum_ks();
            if !feasible.contains(&k) {
                return Err(GxeError::Domain(format!(
                    "spectrum window length {k} is infeasible; feasible: {feasible:?}"
                )));
            }
        }
        let layout = ParamLayout::new(&config);
        let (used_g, used_e, cpairs) = data.compact();
        let theta_cap_g = match layout.theta_g {
            Some(_) => Some(theta_max(&data, KernelSide::Genotype)?.ln()),
            None => None,
        };
        let theta_cap_e = match layout.theta_e {
            Some(_) => Some(theta_max(&data, KernelSide::Environment)?.ln()),
            None => None,
        };
        Ok(Self {
            data,
            config,
            spectrum_k,
            layout,
            theta_cap_g,
            theta_cap_e,
            used_g,
            used_e,
            cpairs,
        })
    }

    /// The parameter layout of this objective.
    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    /// Maps hyperparameters into the transformed vector.
    pub fn pack(&self, h: &Hyperparameters) -> DVector<f64> {
        self.layout.pack(h)
    }

    /// Maps a transformed vector back to hyperparameters (ν placeholder 1.0).
    pub fn unpack(&self, psi: &DVector<f64>) -> Hyperparameters {
        self.layout.unpack(psi, self.spectrum_k)
    }

    /// Clips log length scales at their ln θ_max caps, in place.
    pub fn project(&self, psi: &mut DVector<f64>) {
        if let (Some(i), Some(cap)) = (self.layout.theta_g, self.theta_cap_g) {
            psi[i] = psi[i].min(cap);
        }
        if let (Some(i), Some(cap)) = (self.layout.theta_e, self.theta_cap_e) {
            psi[i] = psi[i].min(cap);
        }
    }

    fn entity_eval(&self, h: &Hyperparameters, with_derivs: bool) -> Result<EntityEval> {
        let geno = self.data.workspace().geno_cache();
        let env = self.data.workspace().env_cache();
        let (kg, dkg) = if self.config.mode.uses_genotype() {
            let k = geno.gram_subset(h.theta_g, self.spectrum_k, &self.used_g)?;
            let d = if with_derivs && self.layout.theta_g.is_some() {
                Some(geno.gram_dtheta_subset(h.theta_g, self.spectrum_k, &self.used_g)?)
            } else {
                None
            };
            (k, d)
        } else {
            let n = self.used_g.len();
            (DMatrix::zeros(n, n), None)
        };
        let (ke, dke) = if self.config.mode.uses_environment() {
            let k = env.gram_subset(h.theta_e, &self.used_e)?;
            let d = if with_derivs && self.layout.theta_e.is_some() {
                Some(env.gram_dtheta_subset(h.theta_e, &self.used_e)?)
            } else {
                None
            };
            (k, d)
        } else {
            let n = self.used_e.len();
            (DMatrix::zeros(n, n), None)
        };
        Ok(EntityEval { kg, ke, dkg, dke })
    }

    /// Full-data profiled likelihood at a transformed parameter point.
    pub fn nll_full(&self, psi: &DVector<f64>) -> Result<ProfiledFit> {
        let h = self.unpack(psi);
        let ee = self.entity_eval(&h, false)?;
        let gidx: Vec<usize> = self.cpairs.iter().map(|p| p.0).collect();
        let eidx: Vec<usize> = self.cpairs.iter().map(|p| p.1).collect();
        let kg_obs = gather(&ee.kg, &gidx);
        let ke_obs = gather(&ee.ke, &eidx);
        profiled_negloglik(&kg_obs, &ke_obs, &h.weights, h.varsigma, self.data.z())
    }

    /// Analytic gradient of the profiled likelihood restricted to a subset of
    /// observations, in transformed space, with the subset's likelihood.
    ///
    /// With ν and m profiled out, only the explicit dependence of the
    /// likelihood on K_ς contributes: for each parameter φ with
    /// D = ∂K_ς/∂φ, the derivative is −aᵀDa/(2ν̂) + tr(K_ς⁻¹D)/2 where
    /// a = K_ς⁻¹(z − 1m̂).
    fn subset_eval(
        &self,
        ee: &EntityEval,
        h: &Hyperparameters,
        obs: &[usize],
    ) -> Result<(DVector<f64>, f64)> {
        let m = obs.len();
        if m < 2 {
            return Err(GxeError::Degenerate(format!(
                "gradient evaluation needs at least 2 observations, got {m}"
            )));
        }
        let gidx: Vec<usize> = obs.iter().map(|&o| self.cpairs[o].0).collect();
        let eidx: Vec<usize> = obs.iter().map(|&o| self.cpairs[o].1).collect();
        let kg = gather(&ee.kg, &gidx);
        let ke = gather(&ee.ke, &eidx);
        let w = &h.weights;
        let s = h.varsigma;
        let k = combine_parts(w.alpha, w.beta, w.gamma, &kg, &ke);
        let zsub = DVector::from_fn(m, |r, _| self.data.z[obs[r]]);
        let core = fit_core(&k, s, &zsub)?;
        let kinv = core.chol.inverse();
        let a = &core.kinv_resid;
        let nu = core.nu_hat;
        let contrib = |d: &DMatrix<f64>| -> f64 {
            -0.5 / nu * quad_form(a, d) + 0.5 * trace_prod(&kinv, d)
        };
        let mut grad = DVector::zeros(self.layout.len);
        if let Some(i) = self.layout.theta_g {
            let dkg = gather(ee.dkg.as_ref().expect("genotype derivative"), &gidx);
            let mut d = dkg.scale(w.alpha);
            if w.gamma != 0.0 {
                d += dkg.component_mul(&ke).scale(w.gamma);
            }
            // chain: ∂K_ς/∂θ_G = ς ∂K/∂θ_G, then dθ/d(ln θ) = θ
            grad[i] = contrib(&d.scale(s)) * h.theta_g;
        }
        if let Some(i) = self.layout.theta_e {
            let dke = gather(ee.dke.as_ref().expect("environment derivative"), &eidx);
            let mut d = dke.scale(w.beta);
            if w.gamma != 0.0 {
                d += kg.component_mul(&dke).scale(w.gamma);
            }
            grad[i] = contrib(&d.scale(s)) * h.theta_e;
        }
        {
            // ∂K_ς/∂ς = K − I, then dς/d(logit ς) = ς(1−ς)
            let quad = quad_form(a, &k) - a.dot(a);
            let tr = trace_prod(&kinv, &k) - kinv.trace();
            grad[self.layout.varsigma] = (-0.5 / nu * quad + 0.5 * tr) * s * (1.0 - s);
        }
        if let Some(block) = &self.layout.weights {
            // raw ∂/∂w_i with ∂K_ς/∂w_i = ς C_i, then the softmax chain
            // ∂w_i/∂l_j = w_i(δ_ij − w_j)
            let wvals = [w.alpha, w.beta, w.gamma];
            let mut raws = [0.0f64; 3];
            for (i, &active) in block.active.iter().enumerate() {
                if !active {
                    continue;
                }
                let c = match i {
                    0 => kg.clone(),
                    1 => ke.clone(),
                    _ => kg.component_mul(&ke),
                };
                raws[i] = contrib(&c.scale(s));
            }
            let mut j = block.start;
            for (jj, &active_j) in block.active.iter().enumerate() {
                if !active_j {
                    continue;
                }
                let mut g = 0.0;
                for (i, &active_i) in block.active.iter().enumerate() {
                    if active_i {
                        let delta = if i == jj { 1.0 } else { 0.0 };
                        g += raws[i] * wvals[i] * (delta - wvals[jj]);
                    }
                }
                grad[j] = g;
                j += 1;
            }
        }
        Ok((grad, core.nll))
    }

    /// Full-data analytic gradient in transformed space.
    pub fn gradient(&self, psi: &DVector<f64>) -> Result<DVector<f64>> {
        let h = self.unpack(psi);
        let ee = self.entity_eval(&h, true)?;
        let all: Vec<usize> = (0..self.cpairs.len()).collect();
        Ok(self.subset_eval(&ee, &h, &all)?.0)
    }

    /// Gradient estimate from two disjoint random batches.
    ///
    /// Each batch gradient is rescaled by n/|batch| — a full-data-scale
    /// estimate — and the two estimates are averaged, so the expectation
    /// tracks the full-data gradient. At `batch_fraction` 0.5 the batches
    /// partition the training set (sizes ⌊n/2⌋ and ⌈n/2⌉). Sets smaller than
    /// two observations per batch fall back to the full gradient.
    pub fn half_batch_gradient(
        &self,
        psi: &DVector<f64>,
        batch_fraction: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<HalfBatch> {
        if !(batch_fraction > 0.0 && batch_fraction <= 0.5) {
            return Err(GxeError::Domain(format!(
                "batch_fraction must lie in (0, 0.5], got {batch_fraction}"
            )));
        }
        let n = self.cpairs.len();
        let b = (n as f64 * batch_fraction).floor() as usize;
        let h = self.unpack(psi);
        let ee = self.entity_eval(&h, true)?;
        if b < 2 {
            let all: Vec<usize> = (0..n).collect();
            let (gradient, nll_estimate) = self.subset_eval(&ee, &h, &all)?;
            return Ok(HalfBatch {
                gradient,
                nll_estimate,
                full_fallback: true,
            });
        }
        let (first, second) = split_batches(n, b, batch_fraction, rng);
        let (g1, l1) = self.subset_eval(&ee, &h, &first)?;
        let (g2, l2) = self.subset_eval(&ee, &h, &second)?;
        let s1 = n as f64 / first.len() as f64;
        let s2 = n as f64 / second.len() as f64;
        Ok(HalfBatch {
            gradient: (g1.scale(s1) + g2.scale(s2)).scale(0.5),
            nll_estimate: 0.5 * (s1 * l1 + s2 * l2),
            full_fallback: false,
        })
    }
}

/// Draws two disjoint batches of observation indices; at fraction 0.5 they
/// partition all indices.
fn split_batches(
    n: usize,
    b: usize,
    batch_fraction: f64,
    rng: &mut ChaCha12Rng,
) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let second_size = if batch_fraction == 0.5 { n - b } else { b };
    let first = idx[..b].to_vec();
    let second = idx[b..b + second_size].to_vec();
    (first, second)
}

fn gather(entity: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |r, c| entity[(idx[r], idx[c])])
}

fn quad_form(a: &DVector<f64>, m: &DMatrix<f64>) -> f64 {
    a.dot(&(m * a))
}

fn trace_prod(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Winner of the initialization grid.
#[derive(Debug, Clone)]
pub struct GridInit {
    /// Hyperparameters of the best grid point, with ν̂ profiled on full data.
    pub hyper: Hyperparameters,
    /// Profiled trend m̂ at the best grid point.
    pub trend: f64,
    /// Profiled likelihood at the best grid point.
    pub nll: f64,
    /// Grid points that failed likelihood evaluation.
    pub skipped: usize,
}

/// Evaluates the profiled likelihood over a fixed coarse grid — length scales
/// at fractions of θ_max, ς over a three-point grid, weights at the mode's
/// simplex vertices and barycenter, and every feasible spectrum window — and
/// returns the argmin. Ties resolve to the earliest grid point in iteration
/// order (window, weights, ς, θ_G, θ_E), so equal-likelihood length scales
/// resolve to the smaller θ.
pub fn grid_init(data: &FitData, config: &KernelConfig) -> Result<GridInit> {
    if data.len() < 2 {
        return Err(GxeError::Degenerate(format!(
            "grid initialization needs at least 2 observations, got {}",
            data.len()
        )));
    }
    let (used_g, used_e, cpairs) = data.compact();
    let gidx: Vec<usize> = cpairs.iter().map(|p| p.0).collect();
    let eidx: Vec<usize> = cpairs.iter().map(|p| p.1).collect();
    let n = data.len();
    let geno = data.workspace().geno_cache();
    let env = data.workspace().env_cache();
    let mode = config.mode;

    let theta_g_grid: Vec<f64> = if mode.uses_genotype() && config.geno.has_length_scale() {
        let cap = theta_max(data, KernelSide::Genotype)?;
        GRID_THETA_FRACTIONS.iter().map(|f| f * cap).collect()
    } else {
        vec![PLACEHOLDER_THETA]
    };
    let theta_e_grid: Vec<f64> = if mode.uses_environment() {
        let cap = theta_max(data, KernelSide::Environment)?;
        GRID_THETA_FRACTIONS.iter().map(|f| f * cap).collect()
    } else {
        vec![PLACEHOLDER_THETA]
    };
    let windows: Vec<Option<usize>> = if mode.uses_genotype() && !config.geno.has_length_scale() {
        geno.feasible_spectrum_ks().into_iter().map(Some).collect()
    } else {
        vec![None]
    };

    let ke_obs_grid: Vec<DMatrix<f64>> = theta_e_grid
        .iter()
        .map(|&t| -> Result<DMatrix<f64>> {
            if mode.uses_environment() {
                Ok(gather(&env.gram_subset(t, &used_e)?, &eidx))
            } else {
                Ok(DMatrix::zeros(n, n))
            }
        })
        .collect::<Result<_>>()?;

    struct Best {
        nll: f64,
        fit: ProfiledFit,
        window: Option<usize>,
        weights: CombinationWeights,
        varsigma: f64,
        theta_g: f64,
        theta_e: f64,
    }
    let mut best: Option<Best> = None;
    let mut skipped = 0usize;
    let weight_grid = mode.grid_weights();

    for &window in &windows {
        let kg_obs_grid: Vec<DMatrix<f64>> = theta_g_grid
            .iter()
            .map(|&t| -> Result<DMatrix<f64>> {
                if mode.uses_genotype() {
                    Ok(gather(&geno.gram_subset(t, window, &used_g)?, &gidx))
                } else {
                    Ok(DMatrix::zeros(n, n))
                }
            })
            .collect::<Result<_>>()?;
        for weights in &weight_grid {
            for &varsigma in &GRID_VARSIGMA {
                for (ig, kg_obs) in kg_obs_grid.iter().enumerate() {
                    for (ie, ke_obs) in ke_obs_grid.iter().enumerate() {
                        match profiled_negloglik(kg_obs, ke_obs, weights, varsigma, data.z()) {
                            Ok(fit) if fit.nll.is_finite() => {
                                if best.as_ref().is_none_or(|b| fit.nll < b.nll) {
                                    best = Some(Best {
                                        nll: fit.nll,
                                        fit,
                                        window,
                                        weights: *weights,
                                        varsigma,
                                        theta_g: theta_g_grid[ig],
                                        theta_e: theta_e_grid[ie],
                                    });
                                }
                            }
                            _ => skipped += 1,
                        }
                    }
                }
            }
        }
    }

    let Some(b) = best else {
        return Err(GxeError::Optimizer(format!(
            "all {skipped} grid candidates failed likelihood evaluation"
        )));
    };
    Ok(GridInit {
        hyper: Hyperparameters {
            theta_g: b.theta_g,
            theta_e: b.theta_e,
            weights: b.weights,
            varsigma: b.varsigma,
            nu: b.fit.nu_hat,
            spectrum_k: b.window,
        },
        trend: b.fit.m_hat,
        nll: b.nll,
        skipped,
    })
}

/// A completed Adam fit.
#[derive(Debug, Clone)]
pub struct AdamFit {
    /// Best-seen hyperparameters, with ν̂ recomputed on full data.
    pub hyper: Hyperparameters,
    /// Profiled trend m̂ at those hyperparameters, on full data.
    pub trend: f64,
    /// Full-data profiled likelihood at those hyperparameters.
    pub nll: f64,
    /// Per-iteration optimizer record.
    pub trace: FitTrace,
    /// Non-fatal conditions encountered during the fit.
    pub warnings: Vec<String>,
}

/// A fit that had to stop, with the trace up to the failure.
#[derive(Debug)]
pub struct FitAbort {
    /// What went wrong.
    pub error: GxeError,
    /// Iterations recorded before the abort.
    pub trace: FitTrace,
}

impl From<FitAbort> for GxeError {
    fn from(abort: FitAbort) -> Self {
        abort.error
    }
}

impl std::fmt::Display for FitAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for FitAbort {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Refines hyperparameters by Adam on the transformed parameters, starting
/// from `init` (typically the grid argmin).
///
/// Gradients come from two disjoint half batches redrawn each iteration; the
/// full-data likelihood is re-evaluated every 25 iterations and at
/// termination, and the best full-data iterate is returned — never worse
/// than the start. Iterations stop early once the largest parameter change
/// stays under the tolerance for 10 consecutive steps. A gradient evaluation
/// that fails or returns non-finite values reverts to the last good iterate,
/// halves the learning rate, and redraws the batches, up to 5 times per
/// iteration before the fit aborts with its trace.
pub fn adam_fit(
    init: &Hyperparameters,
    data: &FitData,
    config: &KernelConfig,
    opt: &OptimizerConfig,
) -> std::result::Result<AdamFit, FitAbort> {
    let plain = |error: GxeError| FitAbort {
        error,
        trace: FitTrace::default(),
    };
    opt.validate().map_err(plain)?;
    init.validate().map_err(plain)?;
    let obj = Objective::new(*data, *config, init.spectrum_k).map_err(plain)?;
    let mut psi = obj.pack(init);
    obj.project(&mut psi);
    let mut trace = FitTrace {
        param_names: obj.layout().names(),
        rows: Vec::new(),
    };
    let init_fit = match obj.nll_full(&psi) {
        Ok(fit) if fit.nll.is_finite() => fit,
        Ok(fit) => {
            return Err(plain(GxeError::Optimizer(format!(
                "initial likelihood is not finite: {}",
                fit.nll
            ))))
        }
        Err(e) => return Err(plain(e)),
    };
    let mut best_psi = psi.clone();
    let mut best_fit = init_fit;
    let mut last_good = psi.clone();

    let mut rng = ChaCha12Rng::seed_from_u64(opt.seed);
    let mut m1 = DVector::zeros(psi.len());
    let mut m2 = DVector::zeros(psi.len());
    let mut lr_mult = 1.0f64;
    let mut small_run = 0usize;
    let mut warnings = Vec::new();
    let mut fallback_warned = false;

    for t in 1..=opt.max_iters {
        let mut retries = 0usize;
        let hb = loop {
            let attempt = obj.half_batch_gradient(&psi, opt.batch_fraction, &mut rng);
            match attempt {
                Ok(hb)
                    if hb.gradient.iter().all(|g| g.is_finite())
                        && hb.nll_estimate.is_finite() =>
                {
                    break hb;
                }
                attempt => {
                    let detail = match attempt {
                        Ok(_) => "non-finite gradient estimate".to_string(),
                        Err(e) => e.to_string(),
                    };
                    retries += 1;
                    if retries > MAX_GRADIENT_RETRIES {
                        return Err(FitAbort {
                            error: GxeError::Optimizer(format!(
                                "gradient evaluation kept failing at iteration {t} \
                                 after {MAX_GRADIENT_RETRIES} retries: {detail}"
                            )),
                            trace,
                        });
                    }
                    lr_mult *= 0.5;
                    psi.copy_from(&last_good);
                }
            }
        };
        if hb.full_fallback && !fallback_warned {
            warnings.push(format!(
                "training set of {} observations is too small to split; \
                 using full-data gradients",
                data.len()
            ));
            fallback_warned = true;
        }
        let g = hb.gradient;
        m1 = m1.scale(opt.beta1) + g.scale(1.0 - opt.beta1);
        m2 = m2.scale(opt.beta2) + g.component_mul(&g).scale(1.0 - opt.beta2);
        let bc1 = 1.0 - opt.beta1.powi(t as i32);
        let bc2 = 1.0 - opt.beta2.powi(t as i32);
        let lr = opt.learning_rate_at(t) * lr_mult;
        let prev = psi.clone();
        for i in 0..psi.len() {
            psi[i] -= lr * (m1[i] / bc1) / ((m2[i] / bc2).sqrt() + opt.epsilon);
        }
        obj.project(&mut psi);
        last_good = prev.clone();
        let delta = psi
            .iter()
            .zip(prev.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        small_run = if delta < opt.tolerance {
            small_run + 1
        } else {
            0
        };
        trace.rows.push(TraceRow {
            iter: t,
            params: psi.iter().copied().collect(),
            nll: hb.nll_estimate,
            grad_norm: g.norm(),
        });
        if t % FULL_EVAL_EVERY == 0 {
            if let Ok(fit) = obj.nll_full(&psi) {
                if fit.nll.is_finite() && fit.nll < best_fit.nll {
                    best_fit = fit;
                    best_psi.copy_from(&psi);
                }
            }
        }
        if small_run >= CONVERGENCE_RUN {
            break;
        }
    }
    if let Ok(fit) = obj.nll_full(&psi) {
        if fit.nll.is_finite() && fit.nll < best_fit.nll {
            best_fit = fit;
            best_psi.copy_from(&psi);
        }
    }
    let hyper = Hyperparameters {
        nu: best_fit.nu_hat,
        ..obj.unpack(&best_psi)
    };
    Ok(AdamFit {
        hyper,
        trend: best_fit.m_hat,
        nll: best_fit.nll,
        trace,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{EnvTable, GenotypeTable, DEFAULT_MISSING, PERIODS};
    use crate::env::EnvKernelFamily;
    use crate::geno::GenoKernelFamily;
    use crate::gp::{combined_obs_gram, sample_prior};
    use crate::kernel::GramMatrix;
    use approx::assert_relative_eq;
    use rand::RngExt;

    fn random_genotypes(nv: usize, len: usize, rng: &mut ChaCha12Rng) -> GenotypeTable {
        let rows = (0..nv)
            .map(|i| {
                let seq: String = (0..len)
                    .map(|_| b"ACGT"[rng.random_range(0..4)] as char)
                    .collect();
                (format!("v{i}"), seq)
            })
            .collect();
        GenotypeTable::new(rows, DEFAULT_MISSING).unwrap()
    }

    fn random_envs(ne: usize, vars: usize, rng: &mut ChaCha12Rng) -> EnvTable {
        let ids = (0..ne).map(|i| format!("e{i}")).collect();
        let names = (0..vars).map(|i| format!("x{i}")).collect();
        let values = (0..ne)
            .map(|_| DMatrix::from_fn(PERIODS.len(), vars, |_, _| rng.random_range(-1.5..1.5)))
            .collect();
        EnvTable::new(ids, names, values).unwrap()
    }

    fn toy_workspace(config: &KernelConfig, nv: usize, ne: usize, seed: u64) -> KernelWorkspace {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let genotypes = random_genotypes(nv, 12, &mut rng);
        let envs = random_envs(ne, 2, &mut rng);
        KernelWorkspace::build(config, &genotypes, &envs).unwrap()
    }

    fn all_pairs(nv: usize, ne: usize) -> Vec<(usize, usize)> {
        (0..nv)
            .flat_map(|v| (0..ne).map(move |e| (v, e)))
            .collect()
    }

    /// Draws responses from the model's own prior at the given parameters.
    fn prior_responses(
        workspace: &KernelWorkspace,
        hyper: &Hyperparameters,
        pairs: &[(usize, usize)],
        trend: f64,
        seed: u64,
    ) -> Vec<f64> {
        let kg = workspace.geno_gram(hyper).unwrap();
        let ke = workspace.env_gram(hyper).unwrap();
        let k = combined_obs_gram(&hyper.weights, &kg, &ke, pairs);
        let gram = GramMatrix::new_unchecked(k);
        sample_prior(&gram, hyper, trend, seed)
            .unwrap()
            .iter()
            .copied()
            .collect()
    }

    fn full_config() -> KernelConfig {
        KernelConfig {
            geno: GenoKernelFamily::GauGblup,
            env: EnvKernelFamily::GauEucl,
            mode: CombinationMode::Full,
        }
    }

    fn env_only_config() -> KernelConfig {
        KernelConfig {
            geno: GenoKernelFamily::GauGblup,
            env: EnvKernelFamily::ExpEucl,
            mode: CombinationMode::EOnly,
        }
    }

    #[test]
    fn config_defaults_match_schedule_and_reject_bad_fractions() {
        let opt = OptimizerConfig::default();
        opt.validate().unwrap();
        assert_eq!(opt.learning_rate, 0.01);
        assert_eq!(opt.decay_factor, 0.8);
        assert_eq!(opt.decay_every, 5);
        assert_eq!(opt.max_iters, 1000);
        assert_relative_eq!(opt.learning_rate_at(1), 0.01);
        assert_relative_eq!(opt.learning_rate_at(5), 0.01);
        assert_relative_eq!(opt.learning_rate_at(6), 0.008, max_relative = 1e-12);
        // two decays by step 11
        assert_relative_eq!(opt.learning_rate_at(11), 0.0064, max_relative = 1e-12);

        for bad in [0.0, -0.1, 0.6, f64::NAN] {
            let cfg = OptimizerConfig {
                batch_fraction: bad,
                ..OptimizerConfig::default()
            };
            assert!(cfg.validate().is_err(), "batch_fraction {bad} accepted");
        }
        let cfg = OptimizerConfig {
            learning_rate: 0.0,
            ..OptimizerConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn transform_round_trips_hyperparameters() {
        let layout = ParamLayout::new(&full_config());
        assert_eq!(layout.len(), 6);
        assert_eq!(
            layout.names(),
            [
                "log_theta_g",
                "log_theta_e",
                "logit_varsigma",
                "logit_alpha",
                "logit_beta",
                "logit_gamma"
            ]
        );
        let h = Hyperparameters {
            theta_g: 0.37,
            theta_e: 1.9,
            weights: CombinationWeights::new(0.2, 0.5, 0.3).unwrap(),
            varsigma: 0.85,
            nu: 2.0,
            spectrum_k: None,
        };
        let psi = layout.pack(&h);
        let back = layout.unpack(&psi, None);
        assert_relative_eq!(back.theta_g, h.theta_g, max_relative = 1e-12);
        assert_relative_eq!(back.theta_e, h.theta_e, max_relative = 1e-12);
        assert_relative_eq!(back.varsigma, h.varsigma, max_relative = 1e-12);
        assert_relative_eq!(back.weights.alpha, 0.2, max_relative = 1e-9);
        assert_relative_eq!(back.weights.beta, 0.5, max_relative = 1e-9);
        assert_relative_eq!(back.weights.gamma, 0.3, max_relative = 1e-9);

        // additive mode never resurrects the product weight
        let additive = ParamLayout::new(&KernelConfig {
            mode: CombinationMode::Additive,
            ..full_config()
        });
        assert_eq!(additive.len(), 5);
        let h2 = Hyperparameters {
            weights: CombinationWeights::new(0.7, 0.3, 0.0).unwrap(),
            ..h
        };
        let back2 = additive.unpack(&additive.pack(&h2), None);
        assert_eq!(back2.weights.gamma, 0.0);
        assert_relative_eq!(back2.weights.alpha, 0.7, max_relative = 1e-9);

        // spectrum + genotype-only leaves a single free parameter: ς
        let single = ParamLayout::new(&KernelConfig {
            geno: GenoKernelFamily::Spectrum,
            env: EnvKernelFamily::GauEucl,
            mode: CombinationMode::GOnly,
        });
        assert_eq!(single.len(), 1);
        assert_eq!(single.names(), ["logit_varsigma"]);
    }

    #[test]
    fn theta_max_matches_hand_distances_and_rejects_degenerate_sets() {
        let config = KernelConfig {
            geno: GenoKernelFamily::ExpHamming,
            env: EnvKernelFamily::GauEucl,
            mode: CombinationMode::Full,
        };
        let genotypes = GenotypeTable::new(
            vec![
                ("a".into(), "AAAA".into()),
                ("b".into(), "TTTT".into()),
            ],
            DEFAULT_MISSING,
        )
        .unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let envs = random_envs(3, 2, &mut rng);
        let ws = KernelWorkspace::build(&config, &genotypes, &envs).unwrap();
        let pairs = all_pairs(2, 3);
        let z = vec![0.0; pairs.len()];
        let data = FitData::new(&ws, &pairs, &z).unwrap();
        // every position differs
        assert_eq!(theta_max(&data, KernelSide::Genotype).unwrap(), 1.0);

        // a duplicated environment leaves the maximum unchanged
        let dup_envs = EnvTable::new(
            vec!["e0".into(), "e1".into(), "e2".into(), "dup".into()],
            (0..2).map(|i| format!("x{i}")).collect(),
            vec![
                envs.series(0).clone(),
                envs.series(1).clone(),
                envs.series(2).clone(),
                envs.series(0).clone(),
            ],
        )
        .unwrap();
        let ws_dup = KernelWorkspace::build(&config, &genotypes, &dup_envs).unwrap();
        let pairs_dup = all_pairs(2, 4);
        let z_dup = vec![0.0; pairs_dup.len()];
        let data_dup = FitData::new(&ws_dup, &pairs_dup, &z_dup).unwrap();
        assert_eq!(
            theta_max(&data_dup, KernelSide::Environment).unwrap(),
            theta_max(&data, KernelSide::Environment).unwrap()
        );

        // a single training entity has no pairwise distance
        let solo_pairs = vec![(0, 0), (0, 1), (0, 2)];
        let solo_z = vec![0.0; 3];
        let solo = FitData::new(&ws, &solo_pairs, &solo_z).unwrap();
        assert!(theta_max(&solo, KernelSide::Genotype).is_err());

        // identical sequences leave a zero maximum distance
        let twins = GenotypeTable::new(
            vec![
                ("a".into(), "ACGT".into()),
                ("b".into(), "ACGT".into()),
            ],
            DEFAULT_MISSING,
        )
        .unwrap();
        let ws_twins = KernelWorkspace::build(&config, &twins, &envs).unwrap();
        let twin_pairs = all_pairs(2, 2);
        let twin_z = vec![0.0; twin_pairs.len()];
        let twin_data = FitData::new(&ws_twins, &twin_pairs, &twin_z).unwrap();
        assert!(theta_max(&twin_data, KernelSide::Genotype).is_err());

        // the spectrum kernel has no length scale to bound
        let spec_config = KernelConfig {
            geno: GenoKernelFamily::Spectrum,
            ..config
        };
        let ws_spec = KernelWorkspace::build(&spec_config, &genotypes, &envs).unwrap();
        let spec_data = FitData::new(&ws_spec, &pairs, &z).unwrap();
        assert!(theta_max(&spec_data, KernelSide::Genotype).is_err());
    }

    #[test]
    fn grid_init_respects_mode_and_lands_on_the_grid() {
        let config = full_config();
        let ws = toy_workspace(&config, 5, 4, 11);
        let pairs = all_pairs(5, 4);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let z: Vec<f64> = (0..pairs.len()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let data = FitData::new(&ws, &pairs, &z).unwrap();
        let init = grid_init(&data, &config).unwrap();
        assert!(init.nll.is_finite());
        assert!(init.hyper.nu > 0.0);
        assert!(GRID_VARSIGMA.contains(&init.hyper.varsigma));
        let cap_g = theta_max(&data, KernelSide::Genotype).unwrap();
        let cap_e = theta_max(&data, KernelSide::Environment).unwrap();
        assert!(GRID_THETA_FRACTIONS
            .iter()
            .any(|f| (init.hyper.theta_g - f * cap_g).abs() < 1e-12 * cap_g));
        assert!(GRID_THETA_FRACTIONS
            .iter()
            .any(|f| (init.hyper.theta_e - f * cap_e).abs() < 1e-12 * cap_e));
        let vertex_or_barycenter = config.mode.grid_weights();
        assert!(vertex_or_barycenter.iter().any(|w| {
            (w.alpha - init.hyper.weights.alpha).abs() < 1e-15
                && (w.beta - init.hyper.weights.beta).abs() < 1e-15
        }));

        // genotype-only mode never touches the environment side, even when
        // every environment is identical (no environment distance exists)
        let g_config = KernelConfig {
            geno: GenoKernelFamily::ExpHamming,
            env: EnvKernelFamily::GauEucl,
            mode: CombinationMode::GOnly,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let genotypes = random_genotypes(4, 10, &mut rng);
        let flat = DMatrix::from_element(PERIODS.len(), 2, 0.25);
        let envs = EnvTable::new(
            vec!["e0".into(), "e1".into()],
            vec!["x0".into(), "x1".into()],
            vec![flat.clone(), flat],
        )
        .unwrap();
        let ws_g = KernelWorkspace::build(&g_config, &genotypes, &envs).unwrap();
        let pairs_g = all_pairs(4, 2);
        let z_g: Vec<f64> = (0..pairs_g.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let data_g = FitData::new(&ws_g, &pairs_g, &z_g).unwrap();
        assert!(theta_max(&data_g, KernelSide::Environment).is_err());
        let init_g = grid_init(&data_g, &g_config).unwrap();
        assert_eq!(init_g.hyper.weights, CombinationWeights::genotype_only());
        assert_eq!(init_g.hyper.theta_e, PLACEHOLDER_THETA);
    }

    #[test]
    fn grid_init_breaks_window_ties_toward_the_smallest() {
        // four sequences over disjoint symbols: every window length yields the
        // identity Gram, so all windows tie and the first one must win
        let config = KernelConfig {
            geno: GenoKernelFamily::Spectrum,
            env: EnvKernelFamily::GauEucl,
            mode: CombinationMode::GOnly,
        };
        let genotypes = GenotypeTable::new(
            vec![
                ("a".into(), "AAAA".into()),
                ("b".into(), "CCCC".into()),
                ("c".into(), "GGGG".into()),
                ("d".into(), "TTTT".into()),
            ],
            DEFAULT_MISSING,
        )
        .unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let envs = random_envs(2, 2, &mut rng);
        let ws = KernelWorkspace::build(&config, &genotypes, &envs).unwrap();
        let pairs = all_pairs(4, 2);
        let z: Vec<f64> = (0..pairs.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let data = FitData::new(&ws, &pairs, &z).unwrap();
        assert_eq!(ws.geno_cache().feasible_spectrum_ks(), vec![1, 2, 3, 4]);
        let init = grid_init(&data, &config).unwrap();
        assert_eq!(init.hyper.spectrum_k, Some(1));
    }

    #[test]
    fn grid_init_recovers_the_generating_varsigma() {
        let config = env_only_config();
        let ws = toy_workspace(&config, 5, 6, 23);
        let pairs = all_pairs(5, 6);
        let cap_e = {
            let z0 = vec![0.0; pairs.len()];
            let data = FitData::new(&ws, &pairs, &z0).unwrap();
            theta_max(&data, KernelSide::Environment).unwrap()
        };
        let truth = Hyperparameters {
            theta_g: 1.0,
            theta_e: 0.25 * cap_e,
            weights: CombinationWeights::environment_only(),
            varsigma: 0.9,
            nu: 1.0,
            spectrum_k: None,
        };
        let z = prior_responses(&ws, &truth, &pairs, 1.5, 91);
        let data = FitData::new(&ws, &pairs, &z).unwrap();
        let init = grid_init(&data, &config).unwrap();
        assert_eq!(init.hyper.varsigma, 0.9);
    }

    #[test]
    fn gradient_matches_central_finite_differences() {
        let config = full_config();
        let ws = toy_workspace(&config, 6, 5, 41);
        // a ragged subset of the grid of pairs
        let pairs: Vec<(usize, usize)> = all_pairs(6, 5)
            .into_iter()
            .enumerate()
            .filter(|(i, _)| i % 2 == 0)
            .map(|(_, p)| p)
            .collect();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let z: Vec<f64> = (0..pairs.len()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let data = FitData::new(&ws, &pairs, &z).unwrap();
        let obj = Objective::new(data, config, None).unwrap();
        let cap_g = theta_max(&data, KernelSide::Genotype).unwrap();
        let cap_e = theta_max(&data, KernelSide::Environment).unwrap();
        let h = 1e-6;
        for trial in 0..10 {
            let raw = [
                rng.random_range(0.2..1.0) * cap_g,
                rng.random_range(0.2..1.0) * cap_e,
                rng.random_range(0.2..0.9),
                rng.random_range(0.05..1.0),
                rng.random_range(0.05..1.0),
                rng.random_range(0.05..1.0),
            ];
            let wsum = raw[3] + raw[4] + raw[5];
            let hyper = Hyperparameters {
                theta_g: raw[0],
                theta_e: raw[1],
                weights: CombinationWeights::new(raw[3] / wsum, raw[4] / wsum, raw[5] / wsum)
                    .unwrap(),
                varsigma: raw[2],
                nu: 1.0,
                spectrum_k: None,
            };
            let psi = obj.pack(&hyper);
            let grad = obj.gradient(&psi).unwrap();
            for i in 0..psi.len() {
                let mut hi = psi.clone();
                hi[i] += h;
                let mut lo = psi.clone();
                lo[i] -= h;
                let fd =
                    (obj.nll_full(&hi).unwrap().nll - obj.nll_full(&lo).unwrap().nll) / (2.0 * h);
                assert_relative_eq!(
                    grad[i],
                    fd,
                    max_relative = 1e-3,
                    epsilon = 1e-7
                );
                let _ = trial;
            }
        }
    }

    #[test]
    fn gradient_is_small_at_a_grid_argmin() {
        // scan fixtures deterministically until the θ-grid argmin lands in
        // the grid interior, then check the argmin sandwich there
        let config = env_only_config();
        let ws = toy_workspace(&config, 4, 7, 57);
        let pairs = all_pairs(4, 7);
        let cap_e = {
            let z0 = vec![0.0; pairs.len()];
            let data = FitData::new(&ws, &pairs, &z0).unwrap();
            theta_max(&data, KernelSide::Environment).unwrap()
        };
        let truth = Hyperparameters {
            theta_g: 1.0,
            theta_e: 0.25 * cap_e,
            weights: CombinationWeights::environment_only(),
            varsigma: 0.6,
            nu: 1.0,
            spectrum_k: None,
        };
        for seed in [3u64, 5, 9, 23, 57, 91] {
            let z = prior_responses(&ws, &truth, &pairs, 0.0, seed);
            let data = FitData::new(&ws, &pairs, &z).unwrap();
            let init = grid_init(&data, &config).unwrap();
            let obj = Objective::new(data, config, None).unwrap();

            let thetas: Vec<f64> = GRID_THETA_FRACTIONS.iter().map(|f| f * cap_e).collect();
            let nlls: Vec<f64> = thetas
                .iter()
                .map(|&t| {
                    let h = Hyperparameters {
                        theta_e: t,
                        ..init.hyper
                    };
                    obj.nll_full(&obj.pack(&h)).unwrap().nll
                })
                .collect();
            let argmin = (0..thetas.len())
                .min_by(|&a, &b| nlls[a].total_cmp(&nlls[b]))
                .unwrap();
            assert!(
                (thetas[argmin] - init.hyper.theta_e).abs() < 1e-12 * cap_e,
                "grid argmin over θ_E should match the full grid pick at its ς"
            );
            if argmin == 0 || argmin + 1 == thetas.len() {
                continue;
            }
            let grad = obj.gradient(&obj.pack(&init.hyper)).unwrap();
            let g_theta = grad[0].abs();
            let x: Vec<f64> = thetas.iter().map(|t| t.ln()).collect();
            let left = ((nlls[argmin - 1] - nlls[argmin]) / (x[argmin - 1] - x[argmin])).abs();
            let right = ((nlls[argmin + 1] - nlls[argmin]) / (x[argmin + 1] - x[argmin])).abs();
            assert!(
                g_theta <= left.max(right) + 1e-9,
                "gradient {g_theta} exceeds both secant slopes {left} and {right}"
            );
            return;
        }
        panic!("no fixture produced an interior grid argmin");
    }

    #[test]
    fn duplicating_the_dataset_keeps_the_grid_theta_argmin() {
        let config = env_only_config();
        let ws = toy_workspace(&config, 4, 6, 83);
        let pairs = all_pairs(4, 6);
        let mut rng = ChaCha12Rng::seed_from_u64(29);
        let z: Vec<f64> = (0..pairs.len()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let data = FitData::new(&ws, &pairs, &z).unwrap();
        let init = grid_init(&data, &config).unwrap();

        let mut pairs2 = pairs.clone();
        pairs2.extend_from_slice(&pairs);
        let mut z2 = z.clone();
        z2.extend_from_slice(&z);
        let data2 = FitData::new(&ws, &pairs2, &z2).unwrap();
        let init2 = grid_init(&data2, &config).unwrap();
        assert_relative_eq!(init.hyper.theta_e, init2.hyper.theta_e, max_relative = 1e-12);
    }

    #[test]
    fn batch_split_is_disjoint_and_covers_at_half() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let (a, b) = split_batches(4, 2, 0.5, &mut rng);
        assert_eq!(a.len(), 2);
        assert_eq!(b.len(), 2);
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);

        let (a, b) = split_batches(5, 2, 0.5, &mut rng);
        assert_eq!(a.len(), 2);
        assert_eq!(b.len(), 3);
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);

        // below half the batches stay disjoint without covering
        let (a, b) = split_batches(12, 3, 0.25, &mut rng);
        assert_eq!(a.len(), 3);
        assert_eq!(b.len(), 3);
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 6);
    }

    #[test]
    fn half_batch_gradient_is_deterministic_and_falls_back_when_tiny() {
        let config = full_config();
        let ws = toy_workspace(&config, 5, 4, 13);
        let pairs = all_pairs(5, 4);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let z: Vec<f64> = (0..pairs.len()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let data = FitData::new(&ws, &pairs, &z).unwrap();
        let obj = Objective::new(data, config, None).unwrap();
        let init = grid_init(&data, &config).unwrap();
        let psi = obj.pack(&init.hyper);

        let mut r1 = ChaCha12Rng::seed_from_u64(99);
        let mut r2 = ChaCha12Rng::seed_from_u64(99);
        let hb1 = obj.half_batch_gradient(&psi, 0.5, &mut r1).unwrap();
        let hb2 = obj.half_batch_gradient(&psi, 0.5, &mut r2).unwrap();
        assert_eq!(hb1.gradient, hb2.gradient);
        assert_eq!(hb1.nll_estimate, hb2.nll_estimate);
        assert!(!hb1.full_fallback);
        let mut r3 = ChaCha12Rng::seed_from_u64(100);
        let hb3 = obj.half_batch_gradient(&psi, 0.5, &mut r3).unwrap();
        assert_ne!(hb1.gradient, hb3.gradient);

        // three observations cannot form two batches of two
        let tiny_pairs = vec![(0, 0), (1, 1), (2, 2)];
        let tiny_z = vec![0.4, -0.2, 0.9];
        let tiny = FitData::new(&ws, &tiny_pairs, &tiny_z).unwrap();
        let tiny_obj = Objective::new(tiny, config, None).unwrap();
        let tiny_psi = tiny_obj.pack(&init.hyper);
        let mut r4 = ChaCha12Rng::seed_from_u64(5);
        let hb = tiny_obj
            .half_batch_gradient(&tiny_psi, 0.5, &mut r4)
            .unwrap();
        assert!(hb.full_fallback);
        assert_eq!(hb.gradient, tiny_obj.gradient(&tiny_psi).unwrap());
    }

    #[test]
    fn half_batch_mean_tracks_the_full_gradient() {
        let config = full_config();
        let ws = toy_workspace(&config, 6, 5, 19);
        let pairs = all_pairs(6, 5);
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let z: Vec<f64> = (0..pairs.len()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let data = FitData::new(&ws, &pairs, &z).unwrap();
        let obj = Objective::new(data, config, None).unwrap();
        let init = grid_init(&data, &config).unwrap();
        let psi = obj.pack(&init.hyper);
        let full = obj.gradient(&psi).unwrap();

        let reps = 200;
        let mut sums = DVector::zeros(psi.len());
        let mut sq = DVector::zeros(psi.len());
        for seed in 0..reps {
            let mut r = ChaCha12Rng::seed_from_u64(seed);
            let hb = obj.half_batch_gradient(&psi, 0.5, &mut r).unwrap();
            sums += &hb.gradient;
            sq += hb.gradient.component_mul(&hb.gradient);
        }
        let nf = reps as f64;
        for i in 0..psi.len() {
            let mean = sums[i] / nf;
            let var = (sq[i] / nf - mean * mean).max(0.0);
            let se = (var / nf).sqrt();
            assert!(
                (mean - full[i]).abs() <= 3.0 * se + 1e-9,
                "coordinate {i}: mean {mean} vs full {} with se {se}",
                full[i]
            );
        }
    }

    #[test]
    fn adam_is_deterministic_and_every_iterate_is_feasible() {
        let config = full_config();
        let ws = toy_workspace(&config, 5, 5, 31);
        let pairs = all_pairs(5, 5);
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let z: Vec<f64> = (0..pairs.len()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let data = FitData::new(&ws, &pairs, &z).unwrap();
        let init = grid_init(&data, &config).unwrap();
        let opt = OptimizerConfig {
            max_iters: 40,
            seed: 4242,
            ..OptimizerConfig::default()
        };
        let fit1 = adam_fit(&init.hyper, &data, &config, &opt).unwrap();
        let fit2 = adam_fit(&init.hyper, &data, &config, &opt).unwrap();
        assert_eq!(fit1.trace, fit2.trace);
        assert_eq!(fit1.hyper, fit2.hyper);
        assert!(fit1.trace.rows.len() <= opt.max_iters);

        let obj = Objective::new(data, config, None).unwrap();
        let cap_g = theta_max(&data, KernelSide::Genotype).unwrap();
        let cap_e = theta_max(&data, KernelSide::Environment).unwrap();
        for row in &fit1.trace.rows {
            assert!(row.grad_norm.is_finite());
            let psi = DVector::from_column_slice(&row.params);
            let h = obj.unpack(&psi);
            assert!(h.varsigma > 0.0 && h.varsigma < 1.0);
            assert!(h.theta_g > 0.0 && h.theta_g <= cap_g * (1.0 + 1e-12));
            assert!(h.theta_e > 0.0 && h.theta_e <= cap_e * (1.0 + 1e-12));
            let w = h.weights;
            assert!(w.alpha >= 0.0 && w.beta >= 0.0 && w.gamma >= 0.0);
            assert_relative_eq!(w.alpha + w.beta + w.gamma, 1.0, epsilon = 1e-12);
            assert!(config.mode.admits(&w));
        }
    }

    #[test]
    fn adam_leaves_a_stationary_point_unchanged() {
        // four sequences over disjoint symbols make the spectrum Gram the
        // identity, so the likelihood is flat in ς and the gradient is zero
        let config = KernelConfig {
            geno: GenoKernelFamily::Spectrum,
            env: EnvKernelFamily::GauEucl,
            mode: CombinationMode::GOnly,
        };
        let genotypes = GenotypeTable::new(
            vec![
                ("a".into(), "AAAA".into()),
                ("b".into(), "CCCC".into()),
                ("c".into(), "GGGG".into()),
                ("d".into(), "TTTT".into()),
            ],
            DEFAULT_MISSING,
        )
        .unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let envs = random_envs(1, 2, &mut rng);
        let ws = KernelWorkspace::build(&config, &genotypes, &envs).unwrap();
        let pairs: Vec<(usize, usize)> = (0..4).map(|v| (v, 0)).collect();
        let z = vec![0.3, -0.6, 1.1, 0.2];
        let data = FitData::new(&ws, &pairs, &z).unwrap();
        let init = Hyperparameters {
            theta_g: 1.0,
            theta_e: 1.0,
            weights: CombinationWeights::genotype_only(),
            varsigma: 0.6,
            nu: 1.0,
            spectrum_k: Some(1),
        };
        let opt = OptimizerConfig {
            seed: 7,
            ..OptimizerConfig::default()
        };
        let fit = adam_fit(&init, &data, &config, &opt).unwrap();
        assert_eq!(fit.hyper.varsigma, init.varsigma);
        // zero updates trip the convergence rule as early as possible
        assert_eq!(fit.trace.rows.len(), 10);
        for row in &fit.trace.rows {
            assert_eq!(row.grad_norm, 0.0);
        }
    }

    #[test]
    fn adam_never_returns_worse_than_its_grid_start() {
        let config = full_config();
        let ws = toy_workspace(&config, 6, 5, 67);
        let pairs = all_pairs(6, 5);
        let cap_e = {
            let z0 = vec![0.0; pairs.len()];
            let data = FitData::new(&ws, &pairs, &z0).unwrap();
            theta_max(&data, KernelSide::Environment).unwrap()
        };
        let truth = Hyperparameters {
            theta_g: 0.8,
            theta_e: 0.3 * cap_e,
            weights: CombinationWeights::new(0.2, 0.5, 0.3).unwrap(),
            varsigma: 0.8,
            nu: 1.0,
            spectrum_k: None,
        };
        let z = prior_responses(&ws, &truth, &pairs, 2.0, 123);
        let data = FitData::new(&ws, &pairs, &z).unwrap();
        let init = grid_init(&data, &config).unwrap();
        let opt = OptimizerConfig {
            max_iters: 120,
            seed: 9,
            ..OptimizerConfig::default()
        };
        let fit = adam_fit(&init.hyper, &data, &config, &opt).unwrap();
        assert!(
            fit.nll <= init.nll + 1e-9,
            "optimizer returned {} against grid {}",
            fit.nll,
            init.nll
        );
        assert!(fit.hyper.nu > 0.0);
        fit.hyper.validate().unwrap();
    }

    #[test]
    fn fit_trace_exports_csv_with_param_columns() {
        let config = env_only_config();
        let ws = toy_workspace(&config, 3, 4, 71);
        let pairs = all_pairs(3, 4);
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let z: Vec<f64> = (0..pairs.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let data = FitData::new(&ws, &pairs, &z).unwrap();
        let init = grid_init(&data, &config).unwrap();
        let opt = OptimizerConfig {
            max_iters: 7,
            ..OptimizerConfig::default()
        };
        let fit = adam_fit(&init.hyper, &data, &config, &opt).unwrap();
        let mut buf = Vec::new();
        fit.trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "iter,log_theta_e,logit_varsigma,nll,grad_norm"
        );
        let first = lines.next().unwrap();
        assert!(first.starts_with("1,"));
        assert_eq!(text.lines().count(), 1 + fit.trace.rows.len());
    }

    #[test]
    fn objective_likelihood_matches_direct_profiling() {
        let config = full_config();
        let ws = toy_workspace(&config, 4, 4, 101);
        let pairs = all_pairs(4, 4);
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let z: Vec<f64> = (0..pairs.len()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let data = FitData::new(&ws, &pairs, &z).unwrap();
        let obj = Objective::new(data, config, None).unwrap();
        let hyper = Hyperparameters {
            theta_g: 0.5,
            theta_e: 0.9,
            weights: CombinationWeights::new(0.3, 0.4, 0.3).unwrap(),
            varsigma: 0.7,
            nu: 1.0,
            spectrum_k: None,
        };
        let via_obj = obj.nll_full(&obj.pack(&hyper)).unwrap();

        let kg = ws.geno_gram(&hyper).unwrap();
        let ke = ws.env_gram(&hyper).unwrap();
        let kg_obs = DMatrix::from_fn(pairs.len(), pairs.len(), |r, c| {
            kg[(pairs[r].0, pairs[c].0)]
        });
        let ke_obs = DMatrix::from_fn(pairs.len(), pairs.len(), |r, c| {
            ke[(pairs[r].1, pairs[c].1)]
        });
        let direct =
            profiled_negloglik(&kg_obs, &ke_obs, &hyper.weights, hyper.varsigma, &z).unwrap();
        assert_relative_eq!(via_obj.nll, direct.nll, max_relative = 1e-12);
        assert_relative_eq!(via_obj.m_hat, direct.m_hat, max_relative = 1e-12);
        assert_relative_eq!(via_obj.nu_hat, direct.nu_hat, max_relative = 1e-12);
    }
}
