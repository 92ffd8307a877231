//! Genotype-side kernels on SNP call strings.
//!
//! Three families are supported:
//!
//! * exponential kernel on the normalized Hamming distance between call
//!   strings (a missing call in either sequence is a forced match, and a
//!   heterozygote code is its own symbol, distinct from both homozygotes);
//! * Gaussian kernel on the marker-count-scaled Euclidean distance between
//!   major-allele dosage rows (the classic genomic-relationship encoding);
//! * cosine-normalized k-spectrum kernel on k-mer count profiles, where any
//!   window containing a missing call is skipped.
//!
//! A Gaussian composition with the Hamming distance is deliberately absent:
//! it is not positive semidefinite on this space.

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{encode_biallelic, BiallelicMatrix, GenotypeTable};
use crate::error::GxeError;
use crate::kernel::{exp_kernel, gau_kernel};
use crate::Result;

/// Largest k-mer size tried when the spectrum kernel's k is selected.
pub const SPECTRUM_K_MAX: usize = 5;

/// Normalized Hamming distance between two call strings.
///
/// Counts positions whose symbols differ, treating a missing call on either
/// side as a match, and divides by the full sequence length.
pub fn hamming_distance(a: &[u8], b: &[u8], missing: u8) -> Result<f64> {
    if a.len() != b.len() {
        return Err(GxeError::Dimension {
            what: "hamming distance call strings",
            expected: a.len(),
            found: b.len(),
        });
    }
    if a.is_empty() {
        return Err(GxeError::Degenerate(
            "hamming distance over empty sequences".into(),
        ));
    }
    let mismatches = a
        .iter()
        .zip(b)
        .filter(|(&x, &y)| x != y && x != missing && y != missing)
        .count();
    Ok(mismatches as f64 / a.len() as f64)
}

/// Exponential kernel on the normalized Hamming distance.
pub fn exp_hamming_kernel(a: &[u8], b: &[u8], theta: f64, missing: u8) -> Result<f64> {
    exp_kernel(hamming_distance(a, b, missing)?, theta)
}

/// Euclidean distance between dosage rows, scaled by the square root of the
/// marker count.
pub fn gblup_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(GxeError::Dimension {
            what: "dosage rows",
            expected: a.len(),
            found: b.len(),
        });
    }
    if a.is_empty() {
        return Err(GxeError::Degenerate("dosage rows with no markers".into()));
    }
    let ss: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((ss / a.len() as f64).sqrt())
}

/// Gaussian kernel on the scaled Euclidean distance between dosage rows.
pub fn gblup_kernel(a: &[f64], b: &[f64], theta: f64) -> Result<f64> {
    gau_kernel(gblup_distance(a, b)?, theta)
}

/// Sparse k-mer count profile of one call string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumProfile {
    /// Window length.
    pub k: usize,
    /// Counts of each k-mer observed in a window free of missing calls.
    pub counts: HashMap<Vec<u8>, u32>,
}

impl SpectrumProfile {
    /// Euclidean norm of the count vector.
    pub fn norm(&self) -> f64 {
        self.counts
            .values()
            .map(|&c| f64::from(c) * f64::from(c))
            .sum::<f64>()
            .sqrt()
    }

    /// Inner product with another profile of the same k.
    pub fn dot(&self, other: &Self) -> f64 {
        let (small, large) = if self.counts.len() <= other.counts.len() {
            (self, other)
        } else {
            (other, self)
        };
        small
            .counts
            .iter()
            .filter_map(|(kmer, &c)| {
                large
                    .counts
                    .get(kmer)
                    .map(|&d| f64::from(c) * f64::from(d))
            })
            .sum()
    }
}

/// Builds the k-mer count profile of a call string, skipping every window
/// that contains a missing call.
pub fn spectrum_profile(seq: &[u8], k: usize, missing: u8) -> Result<SpectrumProfile> {
    if k == 0 {
        return Err(GxeError::Domain("spectrum window length k must be positive".into()));
    }
    if k > seq.len() {
        return Err(GxeError::Domain(format!(
            "spectrum window length {k} exceeds sequence length {}",
            seq.len()
        )));
    }
    let mut counts: HashMap<Vec<u8>, u32> = HashMap::new();
    for window in seq.windows(k) {
        if window.contains(&missing) {
            continue;
        }
        *counts.entry(window.to_vec()).or_insert(0) += 1;
    }
    Ok(SpectrumProfile { k, counts })
}

/// Cosine similarity of two k-mer profiles.
pub fn spectrum_kernel(a: &SpectrumProfile, b: &SpectrumProfile) -> Result<f64> {
    if a.k != b.k {
        return Err(GxeError::Dimension {
            what: "spectrum profiles (window length)",
            expected: a.k,
            found: b.k,
        });
    }
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        let which = if na == 0.0 { "first" } else { "second" };
        return Err(GxeError::Degenerate(format!(
            "{which} sequence has no window of length {} free of missing calls",
            a.k
        )));
    }
    Ok(a.dot(b) / (na * nb))
}

/// Normalized-Hamming distance matrix over a genotype table.
pub fn hamming_distance_matrix(table: &GenotypeTable) -> Result<DMatrix<f64>> {
    let n = table.len();
    let missing = table.missing_symbol();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = hamming_distance(table.sequence(i), table.sequence(j), missing)?;
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    Ok(d)
}

/// Scaled-Euclidean distance matrix over dosage rows.
pub fn gblup_distance_matrix(enc: &BiallelicMatrix) -> Result<DMatrix<f64>> {
    let n = enc.ids().len();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| enc.dosages().row(i).iter().copied().collect())
        .collect();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = gblup_distance(&rows[i], &rows[j])?;
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    Ok(d)
}

/// Genotype kernel families selectable by the model presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenoKernelFamily {
    /// Gaussian kernel on dosage-row Euclidean distances.
    GauGblup,
    /// Exponential kernel on normalized Hamming distances.
    ExpHamming,
    /// Cosine-normalized k-spectrum kernel (no length scale; k is discrete).
    Spectrum,
}

impl GenoKernelFamily {
    /// True when the family carries a continuous length scale.
    pub fn has_length_scale(&self) -> bool {
        !matches!(self, GenoKernelFamily::Spectrum)
    }

    /// Short name used in logs and traces.
    pub fn name(&self) -> &'static str {
        match self {
            GenoKernelFamily::GauGblup => "gau-gblup",
            GenoKernelFamily::ExpHamming => "exp-ham",
            GenoKernelFamily::Spectrum => "spectrum",
        }
    }
}

/// Precomputed genotype-side structures for fast Gram evaluation while the
/// length scale varies.
#[derive(Debug, Clone)]
pub struct GenoKernelCache {
    family: GenoKernelFamily,
    /// Pairwise distances (Hamming or scaled Euclidean); absent for spectrum.
    dist: Option<DMatrix<f64>>,
    /// Spectrum Gram per k (index k-1); `None` marks an infeasible k.
    spectrum: Vec<Option<DMatrix<f64>>>,
}

impl GenoKernelCache {
    /// Precomputes distances (or spectrum Grams for every feasible k) over
    /// all varieties of the table.
    pub fn build(family: GenoKernelFamily, table: &GenotypeTable) -> Result<Self> {
        match family {
            GenoKernelFamily::ExpHamming => Ok(Self {
                family,
                dist: Some(hamming_distance_matrix(table)?),
                spectrum: Vec::new(),
            }),
            GenoKernelFamily::GauGblup => {
                let enc = encode_biallelic(table)?;
                Ok(Self {
                    family,
                    dist: Some(gblup_distance_matrix(&enc)?),
                    spectrum: Vec::new(),
                })
            }
            GenoKernelFamily::Spectrum => {
                let n = table.len();
                let missing = table.missing_symbol();
                let mut by_k = Vec::with_capacity(SPECTRUM_K_MAX);
                for k in 1..=SPECTRUM_K_MAX {
                    if k > table.n_markers() {
                        by_k.push(None);
                        continue;
                    }
                    let profiles: Vec<SpectrumProfile> = (0..n)
                        .map(|i| spectrum_profile(table.sequence(i), k, missing))
                        .collect::<Result<_>>()?;
                    if profiles.iter().any(|p| p.counts.is_empty()) {
                        // Some variety has no valid window at this k.
                        by_k.push(None);
                        continue;
                    }
                    let mut m = DMatrix::zeros(n, n);
                    for i in 0..n {
                        m[(i, i)] = 1.0;
                        for j in (i + 1)..n {
                            let v = spectrum_kernel(&profiles[i], &profiles[j])?;
                            m[(i, j)] = v;
                            m[(j, i)] = v;
                        }
                    }
                    by_k.push(Some(m));
                }
                if by_k.iter().all(Option::is_none) {
                    return Err(GxeError::Degenerate(format!(
                        "no spectrum window length in 1..={SPECTRUM_K_MAX} is feasible \
                         for the genotype table"
                    )));
                }
                Ok(Self {
                    family,
                    dist: None,
                    spectrum: by_k,
                })
            }
        }
    }

    /// The kernel family of this cache.
    pub fn family(&self) -> GenoKernelFamily {
        self.family
    }

    /// Window lengths the spectrum kernel can actually use on this table.
    pub fn feasible_spectrum_ks(&self) -> Vec<usize> {
        self.spectrum
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|_| i + 1))
            .collect()
    }

    /// Entity-level Gram matrix at the given hyperparameters.
    ///
    /// `theta` is read by families with a length scale; `spectrum_k` selects
    /// the window length for the spectrum family.
    pub fn gram(&self, theta: f64, spectrum_k: Option<usize>) -> Result<DMatrix<f64>> {
        match self.family {
            GenoKernelFamily::ExpHamming => {
                let d = self.dist.as_ref().expect("built with distances");
                elementwise_kernel(d, |v| exp_kernel(v, theta))
            }
            GenoKernelFamily::GauGblup => {
                let d = self.dist.as_ref().expect("built with distances");
                elementwise_kernel(d, |v| gau_kernel(v, theta))
            }
            GenoKernelFamily::Spectrum => {
                let k = spectrum_k.ok_or_else(|| {
                    GxeError::Domain("spectrum kernel requires a window length k".into())
                })?;
                self.spectrum
                    .get(k.wrapping_sub(1))
                    .and_then(Option::as_ref)
                    .cloned()
                    .ok_or_else(|| {
                        GxeError::Domain(format!(
                            "spectrum window length {k} is infeasible for this table"
                        ))
                    })
            }
        }
    }

    /// Entrywise derivative of the Gram matrix with respect to the length
    /// scale; zero for the spectrum family.
    pub fn gram_dtheta(&self, theta: f64, _spectrum_k: Option<usize>) -> Result<DMatrix<f64>> {
        match self.family {
            GenoKernelFamily::ExpHamming => {
                let d = self.dist.as_ref().expect("built with distances");
                // d/dtheta exp(-d/theta) = exp(-d/theta) * d / theta^2
                elementwise_kernel(d, |v| {
                    Ok(exp_kernel(v, theta)? * v / (theta * theta))
                })
            }
            GenoKernelFamily::GauGblup => {
                let d = self.dist.as_ref().expect("built with distances");
                // d/dtheta exp(-d^2/theta^2) = exp(-d^2/theta^2) * 2 d^2 / theta^3
                elementwise_kernel(d, |v| {
                    Ok(gau_kernel(v, theta)? * 2.0 * v * v / (theta * theta * theta))
                })
            }
            GenoKernelFamily::Spectrum => {
                let n = self
                    .spectrum
                    .iter()
                    .flatten()
                    .next()
                    .expect("at least one feasible k")
                    .nrows();
                Ok(DMatrix::zeros(n, n))
            }
        }
    }

    /// Gram matrix restricted to a subset of entities (indices into the full
    /// table), in subset order.
    pub fn gram_subset(
        &self,
        theta: f64,
        spectrum_k: Option<usize>,
        subset: &[usize],
    ) -> Result<DMatrix<f64>> {
        match self.family {
            GenoKernelFamily::ExpHamming => {
                let d = self.dist.as_ref().expect("built with distances");
                elementwise_kernel_subset(d, subset, |v| exp_kernel(v, theta))
            }
            GenoKernelFamily::GauGblup => {
                let d = self.dist.as_ref().expect("built with distances");
                elementwise_kernel_subset(d, subset, |v| gau_kernel(v, theta))
            }
            GenoKernelFamily::Spectrum => {
                let full = self.spectrum_ref(spectrum_k)?;
                Ok(DMatrix::from_fn(subset.len(), subset.len(), |r, c| {
                    full[(subset[r], subset[c])]
                }))
            }
        }
    }

    /// Derivative of `gram_subset` with respect to the length scale; zero for
    /// the spectrum family.
    pub fn gram_dtheta_subset(
        &self,
        theta: f64,
        _spectrum_k: Option<usize>,
        subset: &[usize],
    ) -> Result<DMatrix<f64>> {
        match self.family {
            GenoKernelFamily::ExpHamming => {
                let d = self.dist.as_ref().expect("built with distances");
                elementwise_kernel_subset(d, subset, |v| {
                    Ok(exp_kernel(v, theta)? * v / (theta * theta))
                })
            }
            GenoKernelFamily::GauGblup => {
                let d = self.dist.as_ref().expect("built with distances");
                elementwise_kernel_subset(d, subset, |v| {
                    Ok(gau_kernel(v, theta)? * 2.0 * v * v / (theta * theta * theta))
                })
            }
            GenoKernelFamily::Spectrum => Ok(DMatrix::zeros(subset.len(), subset.len())),
        }
    }

    fn spectrum_ref(&self, spectrum_k: Option<usize>) -> Result<&DMatrix<f64>> {
        let k = spectrum_k.ok_or_else(|| {
            GxeError::Domain("spectrum kernel requires a window length k".into())
        })?;
        self.spectrum
            .get(k.wrapping_sub(1))
            .and_then(Option::as_ref)
            .ok_or_else(|| {
                GxeError::Domain(format!(
                    "spectrum window length {k} is infeasible for this table"
                ))
            })
    }

    /// Largest pairwise distance among the given entities, or `None` when the
    /// family has no length scale.
    pub fn max_distance(&self, subset: &[usize]) -> Option<f64> {
        let d = self.dist.as_ref()?;
        let mut best = 0.0_f64;
        for (a, &i) in subset.iter().enumerate() {
            for &j in &subset[a + 1..] {
                best = best.max(d[(i, j)]);
            }
        }
        Some(best)
    }
}

/// Applies a scalar kernel entrywise to a distance matrix, pinning the
/// diagonal at 1.
fn elementwise_kernel(
    d: &DMatrix<f64>,
    f: impl Fn(f64) -> Result<f64>,
) -> Result<DMatrix<f64>> {
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

fn elementwise_kernel_subset(
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
