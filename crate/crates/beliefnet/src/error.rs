use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("observation {obs} at index {index} has zero probability under the current belief")]
    ImpossibleObservation { index: usize, obs: usize },
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("softmax input has no finite entry")]
    EmptySupport,
    #[error("calibration did not converge: {0}")]
    Calibration(String),
    #[error("unsupported model: {0}")]
    Unsupported(String),
    #[error("task error: {0}")]
    Task(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("training diverged at epoch {epoch}, step {step}")]
    Divergence { epoch: usize, step: usize },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }
}
