//! Gaussian-process prediction of genotype-by-environment trial outcomes.
//!
//! The crate models a quantitative trait measured on varieties grown across
//! environments. A zero-mean latent surface over (variety, environment) pairs
//! is given a correlation kernel assembled from a genotype kernel (on SNP
//! sequences) and an environment kernel (on per-period weather covariates),
//! combined additively and/or multiplicatively. An unknown constant trend is
//! profiled out, hyperparameters are fitted by grid search plus Adam on the
//! profiled likelihood, and predictions are scored under grouped
//! cross-validation that holds out whole environments or whole varieties.
//!
//! Modules follow the pipeline: [`data`] ingests and encodes trial files,
//! [`kernel`] holds the base kernels and combination rules, [`geno`] and
//! [`env`] build the genotype- and environment-side Gram matrices, [`gp`]
//! fits and predicts, [`hyperopt`] optimizes hyperparameters, [`eval`] runs
//! cross-validation and scoring, and [`synth`] generates synthetic datasets
//! and houses brute-force reference implementations used by the test suite.

pub mod data;
pub mod env;
pub mod error;
pub mod eval;
pub mod geno;
pub mod gp;
pub mod hyperopt;
pub mod kernel;
pub mod synth;

pub use error::GxeError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, GxeError>;
