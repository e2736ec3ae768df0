use thiserror::Error;

/// Errors raised by the numeric kernel, the diffusion worlds and the runner.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("unreachable transition: {0}")]
    Unreachable(String),

    #[error("oracle unavailable: {0}")]
    OracleUnavailable(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("degenerate importance weights at t={t}")]
    DegenerateWeights { t: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
