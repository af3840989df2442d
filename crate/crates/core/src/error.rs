//! Common error type for the toolkit.

/// Errors surfaced by any module in this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller violated a documented precondition (shape or range-tag mismatch,
    /// out-of-domain probability, etc.).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A dataset on disk could not be loaded or decoded.
    #[error("ingestion error: {0}")]
    Ingest(String),

    /// A metric is undefined for the given inputs (zero variance, empty mask, ...).
    #[error("metric error: {0}")]
    Metric(String),

    /// A checkpoint file is corrupt or from an incompatible version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// The requested operation does not apply to this model scheme.
    #[error("scheme error: {0}")]
    Scheme(String),

    /// The model is not in a state that permits the operation (e.g. untrained).
    #[error("state error: {0}")]
    State(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) => 2,
            Error::Ingest(_) | Error::Io(_) | Error::Metric(_) => 3,
            Error::Checkpoint(_) | Error::Scheme(_) | Error::State(_) => 4,
            Error::Serde(_) => 3,
        }
    }
}
