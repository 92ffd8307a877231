//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by data ingestion, kernel evaluation, fitting and scoring.
#[derive(Debug, Error)]
pub enum GxeError {
    /// Underlying file-system failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed CSV input.
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    /// Malformed JSON (model files, run configuration).
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// A file violated its schema (header, column count, field syntax).
    #[error("format error: {0}")]
    Format(String),

    /// A SNP call outside the supported alphabet. Position is 1-based.
    #[error("unknown symbol {symbol:?} at position {position} of variety {variety:?}")]
    UnknownSymbol {
        variety: String,
        position: usize,
        symbol: char,
    },

    /// A sequence whose length disagrees with the rest of the table.
    #[error("sequence length mismatch for variety {variety:?}: expected {expected}, found {found}")]
    LengthMismatch {
        variety: String,
        expected: usize,
        found: usize,
    },

    /// An identifier that cannot be resolved against the loaded tables.
    #[error("unknown {kind} id {id:?}")]
    UnknownId { kind: &'static str, id: String },

    /// A quantity outside its mathematical domain (negative distance,
    /// non-positive length scale, weights off the simplex, bad plan fractions).
    #[error("domain error: {0}")]
    Domain(String),

    /// Mismatched dimensions between two objects that must align.
    #[error("dimension mismatch ({what}): expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    /// A marker, distance matrix or profile that carries no usable signal.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Covariance factorization failure: the matrix is not positive definite.
    #[error("matrix not positive definite (minimum eigenvalue {min_eigenvalue:.3e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },

    /// Non-finite value where a finite one is required.
    #[error("numeric error: {0}")]
    NonFinite(String),

    /// Hyperparameter optimization could not proceed.
    #[error("optimizer error: {0}")]
    Optimizer(String),
}
