use thiserror::Error;

#[derive(Debug, Error)]
pub enum MpgError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite preference at action {action}, state {state}")]
    NonFinitePreference { action: usize, state: usize },

    #[error("kl divergence undefined: q({0}) = 0 while p({0}) > 0")]
    KlUnsupported(usize),

    #[error("soft value iteration failed to converge after {0} sweeps")]
    NoConvergence(usize),

    #[error("identity violated beyond tolerance: {0}")]
    IdentityViolation(String),

    #[error("parameter divergence: |theta| component reached {0:.3e}")]
    Divergence(f64),

    #[error("malformed layout: {0}")]
    MalformedLayout(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, MpgError>;
