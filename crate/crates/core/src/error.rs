use thiserror::Error;

/// Errors raised by the numerical routines in this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical overflow at {location}")]
    NumericalOverflow { location: String },

    #[error("particle {particle} diverged at step {step} (|x| = {value:e})")]
    Divergence {
        step: usize,
        particle: usize,
        value: f64,
    },

    #[error("non-finite coefficient: {0}")]
    NonFiniteCoefficient(String),

    #[error("stability condition violated: {0}")]
    Stability(String),

    #[error("negative density {value:e} at step {step}, x = {x}")]
    NegativeDensity { step: usize, x: f64, value: f64 },

    #[error("mass drift {drift:e} exceeds limit {limit:e} at t = {time}")]
    MassDrift { time: f64, drift: f64, limit: f64 },

    #[error("Riccati solution blew up at s = {time}")]
    BlowUp { time: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidArgument {
        name,
        reason: reason.into(),
    }
}
