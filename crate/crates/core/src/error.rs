use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{what} out of domain: {value}")]
    Domain { what: &'static str, value: f64 },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("integration failed at t = {t_last:e} s: {reason}")]
    Integration { t_last: f64, reason: String },

    #[error("no sign change of the detuning in field range [{lo:e}, {hi:e}] G")]
    NoBracket { lo: f64, hi: f64 },

    #[error("fit is rank deficient along: {}", directions.join(", "))]
    RankDeficient { directions: Vec<String> },

    #[error("fit did not converge after {iterations} iterations")]
    NotConverged { iterations: usize },

    #[error("reconstruction invalid: |Δ/J| = {ratio:.3} is below the detuned-readout limit {limit}")]
    Regime { ratio: f64, limit: f64 },

    #[error("singular quantity: {0} is undefined")]
    Singularity(&'static str),

    #[error("time grids are misaligned: {0}")]
    Alignment(String),

    #[error("signal has zero energy; cannot normalize")]
    ZeroEnergy,

    #[error("branch tracking failed: {0}")]
    BranchTracking(String),

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub(crate) fn invalid(name: &str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name: name.to_string(),
        reason: reason.into(),
    }
}
