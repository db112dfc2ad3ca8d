use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid {field}: {reason}")]
    Validation { field: &'static str, reason: String },

    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("feature row {row} has zero norm")]
    ZeroNormFeature { row: usize },

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("degenerate variance in {what}")]
    DegenerateVariance { what: &'static str },

    #[error("empty span")]
    EmptySpan,

    #[error("span [{start}, {end}) outside [0, {len})")]
    SpanOutOfRange { start: usize, end: usize, len: usize },

    #[error("requested {requested} regions but only {available} tokens")]
    TooManyRegions { requested: usize, available: usize },

    #[error("{0}")]
    InsufficientData(String),

    #[error("training failed: {0}")]
    Training(String),
}

impl Error {
    pub(crate) fn validation(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Validation {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn check_dim(what: &'static str, expected: usize, actual: usize) -> Result<()> {
        if expected == actual {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                what,
                expected,
                actual,
            })
        }
    }
}
