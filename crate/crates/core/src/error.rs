//! Error taxonomy shared by every module in the crate.
//!
//! Variants are grouped into three coarse categories so binaries can map
//! failures onto distinct process exit codes: configuration problems,
//! data-validation problems, and estimation problems.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter or configuration value is out of its documented domain.
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("column `{0}` not found")]
    MissingColumn(String),

    #[error("duplicate column `{0}`")]
    DuplicateColumn(String),

    #[error("treatment must be 0 or 1, found {value} at row {row}")]
    NonBinaryTreatment { row: usize, value: f64 },

    #[error("dummy column `{column}` must be 0 or 1, found {value} at row {row}")]
    NonBinaryDummy {
        column: String,
        row: usize,
        value: f64,
    },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("column `{column}` has zero variance")]
    ZeroVariance { column: String },

    #[error("length mismatch: {context}")]
    LengthMismatch { context: String },

    /// All rows of a cluster must share one margin value.
    #[error("cluster `{cluster}` has rows with differing margins")]
    InconsistentMargin { cluster: String },

    #[error("{context}: no rows remain")]
    EmptyFrame { context: String },

    #[error("need at least {needed} clusters, found {got}")]
    TooFewClusters { needed: usize, got: usize },

    /// A weighted treatment-residual denominator fell below the numerical
    /// threshold, so the local effect is not identified.
    #[error("degenerate treatment variation: {context}")]
    DegenerateTreatment { context: String },

    #[error("design is rank deficient; collinear columns: {}", columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error(
        "no convergence after {iterations} iterations \
         (last max coefficient change {last_delta:e})"
    )]
    NoConvergence { iterations: usize, last_delta: f64 },

    #[error("tree growth failed after {attempts} attempts: {reason}")]
    TreeGrowth { attempts: usize, reason: String },

    #[error("estimation error: {0}")]
    Estimation(String),
}

/// Coarse failure category, used to choose a process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Validation,
    Estimation,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        use Error::*;
        match self {
            InvalidParam(_) => ErrorCategory::Config,
            MissingColumn(_)
            | DuplicateColumn(_)
            | NonBinaryTreatment { .. }
            | NonBinaryDummy { .. }
            | NonFinite { .. }
            | ZeroVariance { .. }
            | LengthMismatch { .. }
            | InconsistentMargin { .. }
            | EmptyFrame { .. }
            | TooFewClusters { .. } => ErrorCategory::Validation,
            DegenerateTreatment { .. }
            | RankDeficient { .. }
            | NoConvergence { .. }
            | TreeGrowth { .. }
            | Estimation(_) => ErrorCategory::Estimation,
        }
    }
}
