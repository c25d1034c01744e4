use thiserror::Error;

/// Errors raised by the estimators, the data generator and the harness.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("probability {value} at index {index} is outside [0, 1]")]
    InvalidProbability { index: usize, value: f64 },
    #[error("matrix is not symmetric positive definite (pivot {pivot:e} at row {row})")]
    NonSpd { row: usize, pivot: f64 },
    #[error("covariate column {column} has zero variance")]
    Degenerate { column: usize },
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("response has a single class")]
    OneClass,
    #[error("standard error is zero")]
    ZeroSe,
    #[error("every unit was trimmed from one treatment arm")]
    AllTrimmed,
    #[error("no treated unit found an admissible match")]
    NoMatches,
    #[error("need at least 2 matched pairs, found {0}")]
    TooFewPairs(usize),
    #[error("matched differences have zero variance (att = {att})")]
    ZeroVariance { att: f64 },
    #[error("weight denominator is zero")]
    DegenerateWeights,
    #[error("propensity score of 1 leaves a zero control-arm denominator")]
    DegeneratePs,
    #[error("outcome is constant; cannot scale to [0, 1]")]
    FlatOutcome,
    #[error("bracket [{lo}, {hi}] does not straddle target {target}")]
    BracketFailure { lo: f64, hi: f64, target: f64 },
    #[error("replicate drew {treated} treated and {control} control units")]
    DegenerateDraw { treated: usize, control: usize },
    #[error("method {method} has {valid} valid replicates, need at least 2")]
    InsufficientReplicates { method: String, valid: usize },
    #[error("no learner in the library could be fitted")]
    EmptyLibrary,
    #[error("io: {0}")]
    Io(String),
    #[error("malformed result store: {0}")]
    Store(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Store(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Store(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
