use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("format error in {field}: {message}")]
    Format { field: String, message: String },

    #[error("config conflict: {0}")]
    ConfigConflict(String),

    #[error("shape conflict for `{name}`: expected {expected:?}, found {found:?}")]
    ShapeConflict {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape_mismatch(op: &str, a: &[usize], b: &[usize]) -> Self {
        Error::Dimension(format!("{op}: incompatible shapes {a:?} and {b:?}"))
    }

    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
