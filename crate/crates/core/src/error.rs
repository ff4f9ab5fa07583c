use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("expected a scalar tensor, got shape {0:?}")]
    Rank(Vec<usize>),
    #[error("masked softmax over a mask with no true entries")]
    DegenerateMask,
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward already ran on this tape; record a fresh forward pass")]
    TapeConsumed,
    #[error("{file}: row {row}: {msg}")]
    Schema {
        file: String,
        row: usize,
        msg: String,
    },
    #[error("index out of range: {0}")]
    Index(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("training diverged at epoch {epoch}: {msg}")]
    TrainingFailure { epoch: usize, msg: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from bad input (config, schema, shapes)
    /// rather than a failure while computing.
    pub fn is_input_error(&self) -> bool {
        !matches!(
            self,
            Error::NonFinite(_) | Error::Numeric(_) | Error::TrainingFailure { .. }
        )
    }
}
