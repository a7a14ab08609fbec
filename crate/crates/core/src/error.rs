use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("backward already ran on this tape; record a new forward pass first")]
    AlreadyBackpropagated,

    #[error("miss rate is undefined without ground-truth boxes")]
    NoGroundTruth,

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("training diverged at epoch {epoch} (loss is not finite)")]
    Diverged { epoch: usize },

    #[error("weights: {0}")]
    Weights(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> Self {
        Error::Shape {
            op,
            expected: format!("{expected:?}"),
            got: format!("{got:?}"),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
