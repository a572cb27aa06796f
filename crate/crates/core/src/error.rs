use thiserror::Error;

/// Errors produced by the simulation and analysis routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("grid too coarse: pulse FWHM {fwhm:e} s needs at least {min_samples} samples per FWHM (dt = {dt:e} s)")]
    UnderResolved { fwhm: f64, dt: f64, min_samples: usize },

    #[error("propagation did not converge: energy changed by {rel_change:e} between {steps} and {} steps", steps * 2)]
    NonConvergence { steps: usize, rel_change: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("rejected data: {0}")]
    RejectedData(String),

    #[error("malformed tag file at byte {offset}: {reason}")]
    MalformedTags { offset: u64, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
