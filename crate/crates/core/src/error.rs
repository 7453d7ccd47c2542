use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("degenerate sample: no node contributes to the loss")]
    DegenerateSample,

    #[error("gradient cache does not match the parameters or sample it is applied to")]
    StaleCache,

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("model shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("unsupported {what} format version {found} (expected {expected})")]
    Version {
        what: &'static str,
        expected: u32,
        found: u32,
    },

    #[error("malformed {what} file: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(context: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::Dimension {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
