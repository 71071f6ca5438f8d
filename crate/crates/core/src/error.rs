use thiserror::Error;

use crate::model::GroupTag;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("duplicate observation id {0}")]
    DuplicateId(u64),

    #[error("observation {id} has {found} covariates, expected {expected}")]
    RaggedCovariates { id: u64, expected: usize, found: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("propensity pool contains a single class")]
    OneClassPool,

    #[error("propensity pool is empty")]
    EmptyPool,

    #[error("perfect separation detected while fitting the propensity model")]
    Separation,

    #[error("singular design: covariates are rank deficient")]
    SingularDesign,

    #[error("pooled covariance is not positive definite")]
    SingularCovariance,

    #[error("propensity scores are degenerate (zero spread)")]
    DegenerateScores,

    #[error("group {group} emptied in round {round}")]
    GroupEmptied { group: GroupTag, round: usize },

    #[error("group sizes did not equalize within {rounds} rounds")]
    MaxRoundsExceeded { rounds: usize },

    #[error("scheme {0} is not supported by this procedure")]
    SchemeMismatch(String),

    #[error("both samples have zero variance but different means")]
    DegenerateSamples,

    #[error("sample too small: need at least {needed}, got {got}")]
    SampleTooSmall { needed: usize, got: usize },

    #[error("empty group {0}")]
    EmptyGroup(GroupTag),

    #[error("rank-deficient design")]
    RankDeficientDesign,

    #[error("pool for group {group} has {available} rows, {requested} requested")]
    PoolExhausted { group: GroupTag, requested: usize, available: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("line {line}, column {column}: {message}")]
    Schema { line: u64, column: String, message: String },

    #[error("{0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        let line = e.position().map(|p| p.line()).unwrap_or(0);
        Error::Schema { line, column: String::new(), message: e.to_string() }
    }
}
