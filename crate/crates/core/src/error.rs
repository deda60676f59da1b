use thiserror::Error;

/// Errors raised by the optimization library.
#[derive(Debug, Error)]
pub enum DynamoError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("unsupported dimension {requested} (maximum {max})")]
    UnsupportedDimension { requested: usize, max: usize },

    #[error("ill-conditioned kernel matrix: {0}")]
    IllConditioned(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<DynamoError>,
    },
}

pub type Result<T> = std::result::Result<T, DynamoError>;

impl DynamoError {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        DynamoError::Domain(msg.into())
    }

    pub(crate) fn precondition(msg: impl Into<String>) -> Self {
        DynamoError::Precondition(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        DynamoError::Numeric(msg.into())
    }

    /// Wraps the error with a human-readable context string.
    pub fn context(self, context: impl Into<String>) -> Self {
        DynamoError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, with all context layers removed.
    pub fn root(&self) -> &DynamoError {
        match self {
            DynamoError::Context { source, .. } => source.root(),
            other => other,
        }
    }
}
