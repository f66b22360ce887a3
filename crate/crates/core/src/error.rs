use thiserror::Error;

/// Errors raised by the estimators, the optimizer and the benchmark harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("truncation region has negligible mass ({mass:e}); refusing to sample")]
    DegenerateTruncation { mass: f64 },

    #[error("gave up after {attempts} consecutive redraws of perturbation coefficient {index}")]
    CoefficientRedrawLimit { index: usize, attempts: usize },

    #[error("regression design is singular (condition number {condition:e})")]
    SingularDesign { condition: f64 },

    #[error("ground truth for `{0}` is not available for this problem")]
    MissingTruth(&'static str),

    #[error("budget too small: {0}")]
    Budget(String),

    #[error("unknown problem id `{0}`")]
    UnknownProblem(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
