use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum IconError {
    /// A precondition on shapes, ranges or inputs was violated.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A function produced or received a non-finite value.
    #[error("numeric domain error: {0}")]
    NumericDomain(String),
    /// Coupling log-scales left the admissible range.
    #[error("flow instability: |log-scale| = {magnitude:.3} exceeds {limit}")]
    Instability { magnitude: f64, limit: f64 },
    /// The autodiff tape was asked for a primitive it does not know.
    #[error("unsupported autodiff primitive `{0}`")]
    UnsupportedOp(String),
    /// Pearson correlation of a constant vector.
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),
    /// Training produced a non-finite loss or gradient.
    #[error("training diverged in {stage} (task {task}, step {step}): {detail}")]
    Divergence {
        stage: String,
        task: usize,
        step: usize,
        detail: String,
    },
    /// Synthetic data generation could not satisfy its constraints.
    #[error("generation failed: {0}")]
    Generation(String),
    /// A dataset or embedding file failed validation.
    #[error("ingestion error at {record}: {message}")]
    Ingestion { record: String, message: String },
    /// Invalid run configuration.
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl IconError {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            IconError::Divergence { .. }
            | IconError::Instability { .. }
            | IconError::NumericDomain(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, IconError>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(IconError::Contract(msg.into()))
}
