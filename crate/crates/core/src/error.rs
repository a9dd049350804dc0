use std::path::PathBuf;

use crate::backtest::OosReturns;
use crate::solver::SolveStatus;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("invalid price {value} for asset {asset} at index {index}")]
    InvalidPrice { asset: String, index: usize, value: f64 },

    #[error("price series {0} is malformed: {1}")]
    InvalidSeries(String, String),

    #[error("price series share no common dates")]
    NoCommonDates,

    #[error("duplicate asset id {0}")]
    DuplicateAsset(String),

    #[error("empty scenario set")]
    EmptyScenarios,

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("invalid level {0}: must lie in (0, 1)")]
    InvalidLevel(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("all expansion points are identical")]
    DegeneratePoints,

    #[error("Gram matrix not factorizable with jitter up to {jitter:e}")]
    NotFactorizable { jitter: f64 },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("structurally infeasible model: {0}")]
    StructurallyInfeasible(String),

    #[error("invalid ellipsoid shape matrix: {0}")]
    InvalidShapeMatrix(String),

    #[error("invalid MMD radius {0}")]
    InvalidRadius(f64),

    #[error("solver output violates portfolio invariants: {0}")]
    CorruptSolution(String),

    #[error("enumeration over {n} assets exceeds the limit of {limit}")]
    TooLarge { n: usize, limit: usize },

    #[error("empty return series")]
    EmptySeries,

    #[error("market series has zero variance")]
    DegenerateMarket,

    #[error("malformed program: {0}")]
    InvalidProgram(String),

    #[error("window {index} of {} failed with solver status {status:?}", partial.strategy)]
    WindowFailure {
        index: usize,
        status: SolveStatus,
        partial: Box<OosReturns>,
    },

    #[error("index {index} out of range (0..{len})")]
    OutOfRange { index: usize, len: usize },

    #[error("config error in {field}: {message}")]
    Config { field: String, message: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
