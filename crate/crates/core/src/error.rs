use thiserror::Error;

/// Errors produced by the reliability layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    TrainingDiverged { epoch: usize },

    #[error(
        "insufficient calibration data: {n} scores at miscoverage {miscoverage}, need at least {min_n}"
    )]
    InsufficientCalibration { n: usize, miscoverage: f64, min_n: usize },

    #[error("covariance is singular after ridge {ridge:e}; try a larger ridge")]
    SingularCovariance { ridge: f64 },

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid_input(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

pub(crate) fn invalid_config(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}
