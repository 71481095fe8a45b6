use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("time {t} outside the admissible domain [{lo}, {hi}]")]
    Domain { t: f64, lo: f64, hi: f64 },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("singular configuration: {0}")]
    Singular(String),

    #[error("non-stationary OU fit (AR coefficient a = {a:.6}, n = {n}): {reason}")]
    NonStationaryFit { a: f64, n: usize, reason: String },

    #[error("regression basis degenerate at time step {step}: {reason}")]
    BasisDegeneracy { step: usize, reason: String },

    #[error("data ingestion: {0}")]
    Data(String),

    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter { name, reason: reason.into() }
    }
}
