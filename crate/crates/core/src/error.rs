use thiserror::Error;

use crate::eigensolve::EigenResult;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("catalog is empty: cutoff {e_max} lies below the ground level {ground}")]
    EmptyCatalog { e_max: f64, ground: f64 },

    #[error("grid refused: {0}")]
    GridRefused(String),

    #[error("assembly failed: {0}")]
    Assembly(String),

    #[error("shifted operator is not positive definite at shift {shift}")]
    NotPositiveDefinite { shift: f64 },

    #[error("dimension {dim} exceeds the dense limit {limit}")]
    TooLarge { dim: usize, limit: usize },

    #[error("eigensolver did not converge after {iterations} iterations (worst residual {worst_residual:e})")]
    NotConverged {
        iterations: usize,
        worst_residual: f64,
        partial: Box<EigenResult>,
    },

    #[error("refinement did not settle: {0}")]
    Unresolved(String),

    #[error("solver failed at p = {momentum}: {source}")]
    AtMomentum {
        momentum: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
