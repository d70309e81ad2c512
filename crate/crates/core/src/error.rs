use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("empty set: {0}")]
    EmptySet(String),

    #[error("invalid options: {0}")]
    InvalidOptions(String),

    #[error("matrix is not ({block_rows},{block_cols})-block-lower-triangular (max upper-block entry {max_upper:e})")]
    NotBlockLowerTriangular {
        block_rows: usize,
        block_cols: usize,
        max_upper: f64,
    },

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("system response violates the affine constraints (residual {residual:e} > {tolerance:e})")]
    Feasibility { residual: f64, tolerance: f64 },

    #[error("set is not supported here: {0}")]
    UnsupportedSet(String),

    #[error("causality violation: {0}")]
    Causality(String),

    #[error("problem is infeasible (solver status {status})")]
    Infeasible { status: String },

    #[error("solver failure at reweighting iteration {iteration}: {status}")]
    SolverFailure { iteration: usize, status: String },

    #[error("internal invariant violated: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
