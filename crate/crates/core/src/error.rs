use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid distribution parameters: {0}")]
    InvalidSpec(String),

    #[error("importance distribution underflow: {0}")]
    Underflow(String),

    #[error("zero total importance weight")]
    ZeroWeight,

    #[error("unidentifiable: {0}")]
    Unidentifiable(String),

    #[error("no convergence: {0}")]
    NonConvergence(String),

    #[error("M-step infeasible: {0}")]
    Infeasible(String),

    #[error("enumeration guard violated: {0}")]
    Guard(String),

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
