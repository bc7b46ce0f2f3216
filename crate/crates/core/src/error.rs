use thiserror::Error;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("numeric domain violation in {op}: {detail}")]
    NumericDomain { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("ingestion error at row {row}: {detail}")]
    Ingest { row: u64, detail: String },

    #[error("ingestion error: {0}")]
    IngestFile(String),

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: u64, loss: f64 },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Dimension {
        op,
        detail: detail.into(),
    }
}
