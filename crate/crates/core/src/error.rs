use thiserror::Error;

/// Errors raised anywhere in the training, evaluation and theory pipeline.
#[derive(Debug, Error)]
pub enum FairNetError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("training diverged at epoch {epoch}: {msg}")]
    Diverged { epoch: usize, msg: String },

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl FairNetError {
    /// Short stable identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            FairNetError::Dimension(_) => "dimension",
            FairNetError::InvalidConfig(_) => "invalid_config",
            FairNetError::NonFinite(_) => "non_finite",
            FairNetError::Parse { .. } => "parse",
            FairNetError::Diverged { .. } => "diverged",
            FairNetError::MissingArtifact(_) => "missing_artifact",
            FairNetError::InsufficientData(_) => "insufficient_data",
            FairNetError::Io(_) => "io",
            FairNetError::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, FairNetError>;

pub(crate) fn invalid(msg: impl Into<String>) -> FairNetError {
    FairNetError::InvalidConfig(msg.into())
}

pub(crate) fn dim(msg: impl Into<String>) -> FairNetError {
    FairNetError::Dimension(msg.into())
}
