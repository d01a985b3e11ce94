use thiserror::Error;

/// Errors shared across the factorization pipeline.
#[derive(Debug, Error)]
pub enum FioError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("matrix is not positive definite (pivot {pivot}{})", context.as_deref().map(|c| format!(", {c}")).unwrap_or_default())]
    NotPositiveDefinite {
        pivot: usize,
        context: Option<String>,
    },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<FioError>,
    },
}

pub type Result<T> = std::result::Result<T, FioError>;

impl FioError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        FioError::InvalidInput(msg.into())
    }

    /// Tag an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        FioError::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
