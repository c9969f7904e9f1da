use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("unknown problem `{0}`")]
    UnknownProblem(String),

    #[error("unknown stepper `{0}`")]
    UnknownStepper(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("trajectory diverged at step {step}")]
    Divergence { step: usize, last_finite: Vec<f64> },

    #[error("Newton iteration failed at step {step} after {iterations} iterations (residual {residual:e})")]
    NewtonFailure { step: usize, iterations: usize, residual: f64 },

    #[error("fixed-point iteration failed at step {step} after {iterations} iterations (residual {residual:e})")]
    FixedPointFailure { step: usize, iterations: usize, residual: f64 },

    #[error("invalid step distribution: {0}")]
    InvalidDistribution(String),

    #[error("index {index} out of range for trajectories of {len} states")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("not enough samples: {0}")]
    InsufficientSamples(String),

    #[error("all {0} trajectories failed")]
    AllFailed(usize),

    #[error("non-positive error {value:e} at h = {h}; increase the sample count or narrow the grid")]
    NonPositiveError { h: f64, value: f64 },

    #[error("density does not integrate to one (integral {0})")]
    Unnormalized(f64),

    #[error("assumption check failed: {}", .0.join("; "))]
    AssumptionViolated(Vec<String>),

    #[error("{0}")]
    InvalidInput(String),
}

impl Error {
    pub(crate) fn invalid_param(name: &str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter { name: name.to_string(), reason: reason.into() }
    }
}
