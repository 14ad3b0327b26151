use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Core(mamba_icl::Error),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl From<mamba_icl::Error> for LabError {
    fn from(e: mamba_icl::Error) -> Self {
        match e {
            mamba_icl::Error::Config(msg) | mamba_icl::Error::Dimension(msg) => LabError::Config(msg),
            mamba_icl::Error::Diverged { .. } | mamba_icl::Error::Unstable { .. } => LabError::Diverged(e.to_string()),
            other => LabError::Core(other),
        }
    }
}

impl LabError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        LabError::Io { path: path.as_ref().display().to_string(), source }
    }

    /// Process exit code: 1 configuration (and other) errors, 2 failed
    /// verification, 3 training divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Verification(_) => 2,
            LabError::Diverged(_) => 3,
            _ => 1,
        }
    }
}

pub type LabResult<T> = std::result::Result<T, LabError>;
