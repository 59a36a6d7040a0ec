use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch on axis {axis}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        axis: usize,
        expected: usize,
        got: usize,
    },

    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("variable was recorded on a different tape")]
    ForeignVar,

    #[error("gradient check needs a deterministic function, but dropout ran in training mode")]
    StochasticGraph,

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Data(#[from] crate::data::DataError),

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for NaN/Inf failures during training or evaluation.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }

    /// True for failures caused by files on disk (datasets, checkpoints, i/o).
    pub fn is_data(&self) -> bool {
        matches!(
            self,
            Error::Data(_) | Error::Checkpoint { .. } | Error::Io { .. }
        )
    }
}
