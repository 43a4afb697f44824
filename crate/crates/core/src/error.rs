use alloc::boxed::Box;
use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("vector norm {norm} deviates from 1 by more than the allowed tolerance")]
    NotUnitNorm { norm: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("support set is empty")]
    EmptySupport,

    #[error("all aggregation weights are degenerate")]
    DegenerateWeights,

    #[error("batch element {index}: {source}")]
    BatchElement { index: usize, source: Box<Error> },

    #[error("learning rate flips the sign of w[{index}] (updated value {value})")]
    SignFlip { index: usize, value: f64 },

    #[error("sample {0} has no ground-truth label or domain")]
    MissingLabel(usize),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn at(self, index: usize) -> Self {
        Error::BatchElement {
            index,
            source: Box::new(self),
        }
    }
}
