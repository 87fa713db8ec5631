use std::io;

/// Errors produced anywhere in the ranking engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("attention mask row {row} permits no entries")]
    FullyMaskedRow { row: usize },

    #[error("stale representation: {0}")]
    StaleRepresentation(String),

    #[error("document not found: {0}")]
    NotFound(String),

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidInput(_) => "invalid_input",
            Error::FullyMaskedRow { .. } => "fully_masked_row",
            Error::StaleRepresentation(_) => "stale_representation",
            Error::NotFound(_) => "not_found",
            Error::Integrity(_) => "integrity",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
