use thiserror::Error;

/// Errors raised by the model, theory and training code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate parameters: {0}")]
    Degenerate(String),

    #[error("{0}")]
    Usage(String),

    #[error("training diverged at iteration {iteration}: {reason}")]
    Diverged { iteration: usize, reason: String },

    #[error("recursion unstable for eta = {eta} at iteration {iteration}")]
    Unstable { eta: f64, iteration: usize },

    #[error("fit window never entered: {0}")]
    FitWindow(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
