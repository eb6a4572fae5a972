//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Ill-defined numeric input (non-finite values, zero norms).
    #[error("numeric domain error: {0}")]
    Numeric(String),

    /// Invalid configuration (dimensions, ranges, flag combinations).
    #[error("config error: {0}")]
    Config(String),

    /// Operation applied in the wrong order (e.g. extending a sequence twice).
    #[error("state error: {0}")]
    State(String),

    /// Episode sampling could not satisfy the request.
    #[error("sampling error: {0}")]
    Sampling(String),

    /// Invalid data passed to an operation (labels out of range, empty groups).
    #[error("input error: {0}")]
    Input(String),

    /// Text-format parsing failure, pointing at the offending line.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Training diverged; reports the global step at which it happened.
    #[error("training error at step {step}: {msg}")]
    Training { step: usize, msg: String },

    /// Iterative solver did not reach its tolerance within the iteration cap.
    #[error("convergence error: {0}")]
    Convergence(String),

    /// A class name had no entry in the embedding table.
    #[error("missing embedding for class {0:?}")]
    MissingEmbedding(String),

    /// I/O failure, tagged with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Malformed binary file (bad magic, truncated block, ...).
    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
