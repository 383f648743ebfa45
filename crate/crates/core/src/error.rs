//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by simulator components.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter violated its domain (value reported with context).
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    /// Matrix or list dimensions do not line up.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// The requested subspace split is impossible (K >= N_RF).
    #[error("noise subspace is empty: K = {k} targets but only {n_rf} RF chains")]
    EmptyNoiseSubspace { k: usize, n_rf: usize },

    /// Block-diagonalization cannot proceed at this column budget.
    #[error("block diagonalization infeasible: {0}")]
    BdInfeasible(String),

    /// Configuration file problem; names the offending key where possible.
    #[error("config error: {0}")]
    Config(String),

    /// Filesystem failure while loading configs or writing results.
    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// JSON parse failure.
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
