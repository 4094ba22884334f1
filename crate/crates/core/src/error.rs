use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: {dim} mismatch (expected {expected}, found {found})")]
    Shape {
        op: &'static str,
        dim: String,
        expected: usize,
        found: usize,
    },

    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("degenerate box after scaling: span {span:.3e} along {axis}")]
    DegenerateBox { axis: &'static str, span: f64 },

    #[error("{path}: {reason}")]
    Schema { path: String, reason: String },

    #[error("checkpoint version mismatch: file has {found:?}, expected {expected:?}")]
    VersionMismatch { expected: String, found: String },

    #[error("corrupt container {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("tensor {name}: shape {found:?} does not match configured shape {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("missing tensor {0}")]
    MissingTensor(String),

    #[error("training diverged at iteration {iteration}: loss {loss}")]
    Diverged { iteration: u64, loss: f64 },

    #[error("data: {0}")]
    Data(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, dim: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::Shape {
            op,
            dim: dim.into(),
            expected,
            found,
        }
    }

    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
