//! Error type shared by every module.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("trace is empty")]
    EmptyTrace,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("undefined: {0}")]
    Undefined(String),
    #[error("dt = {dt} out of range for state {state} (rate {rate}, need dt < {limit})")]
    InvalidDt {
        state: usize,
        rate: f64,
        dt: f64,
        limit: f64,
    },
    #[error("arrival matrix is identically zero")]
    NoArrivals,
    #[error("all emission weights underflowed at step {step}; rescale the observations")]
    Underflow { step: usize },
    #[error("model is not stationary")]
    NonStationary,
    #[error("event row of state {state} sums to zero, cannot normalize")]
    NonNormalizable { state: usize },
    #[error("chain is not ergodic: {0}")]
    NonErgodic(String),
    #[error("enumeration too large: {0}")]
    TooLarge(String),
    #[error("MGF diverges on transition ({from}, {to}): theta*sigma*v = {value}")]
    DivergentMgf { from: usize, to: usize, value: f64 },
    #[error("singular system: {0}")]
    Singular(String),
    #[error("states never visited during sampling: {0:?}")]
    MissingStates(Vec<usize>),
    #[error("numerical degeneracy: {0}")]
    Degenerate(String),
    #[error("no stable theta: {0}")]
    Unstable(String),
    #[error("topology is not feed-forward: {0}")]
    NotFeedForward(String),
    #[error("need at least {required} samples, got {got}")]
    InsufficientSamples { required: usize, got: usize },
    #[error("unknown baseline `{0}`")]
    UnknownBaseline(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the error class. 0, 1 and 2 are left for
    /// success, unclassified failures and usage errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 9,
            Error::Parse { .. } | Error::Format(_) | Error::EmptyTrace => 3,
            Error::InvalidArgument(_) | Error::InvalidDt { .. } | Error::UnknownBaseline(_) => 4,
            Error::InsufficientData(_)
            | Error::InsufficientSamples { .. }
            | Error::Undefined(_)
            | Error::NoArrivals => 5,
            Error::NonStationary
            | Error::NonErgodic(_)
            | Error::NonNormalizable { .. }
            | Error::NotFeedForward(_) => 6,
            Error::Underflow { .. }
            | Error::Singular(_)
            | Error::Degenerate(_)
            | Error::DivergentMgf { .. }
            | Error::MissingStates(_)
            | Error::TooLarge(_) => 7,
            Error::Unstable(_) => 8,
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
        Error::Parse {
            line,
            msg: e.to_string(),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Format(e.to_string())
    }
}
