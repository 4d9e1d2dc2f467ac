use thiserror::Error;

/// Errors raised by the simulation library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unsupported dimension {0}: this routine requires one-dimensional clouds")]
    UnsupportedDimension(usize),

    #[error("cloud sizes differ ({left} vs {right}) for uniform-weight transport")]
    SizeMismatch { left: usize, right: usize },

    #[error("cloud size {n} exceeds the exact-transport cap {cap}; use w2_entropic instead")]
    OverCap { n: usize, cap: usize },

    #[error("exact transport supports uniform weights only")]
    NonUniformWeights,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite state for particle {particle} at step {step}; try halving the step")]
    NonFinite { step: usize, particle: usize },

    #[error("state norm {norm:e} exceeds the divergence guard for particle {particle} at step {step}")]
    Diverged { step: usize, particle: usize, norm: f64 },

    #[error("coefficient evaluation failed at sample {sample}: {reason}")]
    Coefficient { sample: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}
