use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {dims:?}: {reason}")]
    InvalidShape { dims: Vec<usize>, reason: &'static str },

    #[error("data length {got} does not match shape element count {expected}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("non-finite value at flat offset {offset}")]
    NonFinite { offset: usize },

    #[error("mode {mode} out of range for order-{order} tensor")]
    ModeOutOfRange { mode: usize, order: usize },

    #[error("dimension mismatch in {op}: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("expected an order-{expected} tensor in {op}, got order {got}")]
    OrderMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{0} requires at least one operand")]
    Empty(&'static str),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed bundle: {0}")]
    Bundle(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dims(op: &'static str, expected: &[usize], got: &[usize]) -> Self {
        Error::DimensionMismatch {
            op,
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}
