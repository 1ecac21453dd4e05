use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("tree structure mismatch: {0}")]
    Structure(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("exponential overflow in update composition (max exponent {0})")]
    ExpOverflow(f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("inner task diverged at step {step}: loss = {loss}")]
    Diverged { step: u64, loss: f64 },

    #[error("optimizer state does not match transform: expected {0}")]
    State(&'static str),

    #[error("dataset error in {path}: {detail}")]
    Dataset { path: PathBuf, detail: String },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("unsupported checkpoint version: {0}")]
    Version(String),

    #[error("checksum mismatch for tensor '{0}'")]
    Checksum(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
