use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("group {0} has no members")]
    EmptyGroup(usize),

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("empty batch: no visible points")]
    EmptyBatch,

    #[error("needs at least one negative (M = {0})")]
    TooFewAnchors(usize),

    #[error("no negatives remain for anchor {0}")]
    NoNegatives(usize),

    #[error("no negatives remain: k = {k} with M = {m}")]
    KTooLarge { k: usize, m: usize },

    #[error("invalid similarity value {value} at ({row}, {col}); alpha must not exceed 1")]
    AlphaOutOfRange { row: usize, col: usize, value: f64 },

    #[error("negative vote range; rescale alpha")]
    NegativeVotes,

    #[error("weight sum must be positive, got {0}")]
    NonPositiveWeightSum(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("training diverged at step {step} (loss = {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("{0}")]
    Format(String),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
