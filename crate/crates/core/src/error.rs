use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: numeric failure: {detail}")]
    Numeric { op: &'static str, detail: String },

    #[error("{op}: degenerate vector (norm {norm:e} below {eps:e})")]
    Degenerate { op: &'static str, norm: f64, eps: f64 },

    #[error("{op}: index {index:?} out of range for dims {dims:?}")]
    Index {
        op: &'static str,
        index: Vec<i64>,
        dims: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: field `{field}`: {msg}")]
    Parse {
        path: String,
        line: usize,
        field: String,
        msg: String,
    },

    #[error("malformed tensor container: {0}")]
    Container(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn numeric(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Numeric {
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

    /// Process exit code for the command-line front end: 3 for numeric
    /// failures, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric { .. } | Error::Degenerate { .. } => 3,
            _ => 2,
        }
    }
}
