use thiserror::Error;

/// Errors raised anywhere in the planning stack.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum MpicError {
    #[error("matrix is not positive semi-definite (jitter escalated to {jitter:e})")]
    NotPositiveSemiDefinite { jitter: f64 },

    #[error("all importance weights are degenerate (every log-weight is -inf or NaN)")]
    AllWeightsDegenerate,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    DivergedTraining { epoch: usize, loss: f64 },

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("point is off the road: lateral offset {offset:.3} m exceeds {limit:.3} m")]
    OffRoadProjection { offset: f64, limit: f64 },

    #[error("time {t:.3} s is outside the table range [{start:.3}, {end:.3}] s")]
    OutOfTableRange { t: f64, start: f64, end: f64 },

    #[error("matrix is not symmetric positive definite: {0}")]
    NotSpd(String),

    #[error("planning failed at step {step}: {source}")]
    PlanningFailed {
        step: usize,
        #[source]
        source: Box<MpicError>,
    },

    #[error("grid of {points} points exceeds the limit of {limit}")]
    GridTooLarge { points: u128, limit: u128 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for MpicError {
    fn from(e: std::io::Error) -> Self {
        MpicError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, MpicError>;
