use thiserror::Error;

/// Errors raised by the estimator library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("batch size must be at least {min}, got {got}")]
    BatchTooSmall { min: usize, got: usize },

    #[error("alpha must lie in [0,1), got {0}")]
    InvalidAlpha(f64),

    #[error("parameter `{name}` is not finite ({value})")]
    NonFiniteParam { name: String, value: f64 },

    #[error("log weight of sample {index} is not finite ({value})")]
    NonFiniteLogWeight { index: usize, value: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("baseline argument for sample {index} is not positive ({value})")]
    NonPositiveBaselineArgument { index: usize, value: f64 },

    #[error("estimator {kind} requires alpha = {required}, got {got}")]
    AlphaMismatch { kind: &'static str, required: f64, got: f64 },

    #[error("gradient estimate is not finite at coordinate {coordinate}")]
    NonFiniteEstimate { coordinate: usize },

    #[error("non-finite gradient at iteration {iteration}, coordinate {coordinate}")]
    NonFiniteGradient { iteration: usize, coordinate: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
