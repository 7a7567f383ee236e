use thiserror::Error;

#[derive(Debug, Error)]
pub enum NhoError {
    #[error("objective must be a scalar (1x1), got {0}x{1}")]
    NonScalarObjective(usize, usize),
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },
    #[error("unsupported primitive in trace: {0}")]
    UnsupportedPrimitive(String),
    #[error("non-finite state at step {step}, path {path}")]
    NonFinite { step: usize, path: usize },
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("quadratic-variation matrix not symmetric within {tol:e}: max deviation {max_dev:e}")]
    NotSymmetric { tol: f64, max_dev: f64 },
    #[error("unknown benchmark id: {0}")]
    UnknownBenchmark(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("no checkpoint found: {0}")]
    NoCheckpoint(String),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NhoError>;

impl NhoError {
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        NhoError::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }
}
