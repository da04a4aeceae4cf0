use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),

    #[error("invalid attribute for {op}: {detail}")]
    InvalidAttr { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss is not recorded on any tape")]
    DetachedLoss,

    #[error("tensors recorded on different tapes")]
    TapeMismatch,

    #[error("{what} out of range: {value} not in {range}")]
    OutOfRange {
        what: &'static str,
        value: i64,
        range: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file at byte {offset}: {reason}")]
    Malformed { offset: u64, reason: String },

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("session is closed")]
    SessionClosed,

    #[error("frame {index}: {detail}")]
    Frame { index: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn out_of_range(
    what: &'static str,
    value: impl Into<i64>,
    range: impl Into<String>,
) -> Error {
    Error::OutOfRange {
        what,
        value: value.into(),
        range: range.into(),
    }
}
