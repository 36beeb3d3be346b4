//! Unified error type for the whole crate.
//!
//! Every fallible operation names the offending quantity (dimension, label,
//! path, ...) in its message so a failure in a deep pipeline is attributable
//! without a debugger.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/layer shape disagreement. `detail` names the offending dimension.
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// Argument outside the documented domain (negative stride, label out of
    /// range, probability outside [0,1), ...).
    #[error("{op}: invalid argument: {detail}")]
    InvalidArg { op: &'static str, detail: String },

    /// Stateful component used before being given state (batch-norm inference
    /// before any training step or load, empty gallery, ...).
    #[error("uninitialized: {0}")]
    Uninitialized(String),

    #[error("not found: {0}")]
    NotFound(String),

    /// Malformed on-disk artifact (annotation, config, model, score file).
    #[error("{path}:{line}: {detail}")]
    Parse {
        path: String,
        line: usize,
        detail: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn arg(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArg {
            op,
            detail: detail.into(),
        }
    }

    pub fn parse(path: impl AsRef<std::path::Path>, line: usize, detail: impl Into<String>) -> Self {
        Error::Parse {
            path: path.as_ref().display().to_string(),
            line,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
