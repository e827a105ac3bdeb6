use thiserror::Error;

use crate::dataset::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("column `{column}`: {reason}")]
    Value { column: String, reason: String },

    #[error("dataset has {} violation(s); first: {}", .0.len(), .0.first().map(|v| v.to_string()).unwrap_or_default())]
    Invalid(Vec<Violation>),

    #[error("empty sample")]
    EmptySample,

    #[error("no observed events")]
    NoEvents,

    #[error("no observed events at the tree root")]
    NoEventsAtRoot,

    #[error("each sample needs at least one event (got {n_a} and {n_b})")]
    InvalidEventCount { n_a: usize, n_b: usize },

    #[error("significance level {0} is outside (0, 1]")]
    InvalidAlpha(f64),

    #[error("test count must be at least 1")]
    InvalidCount,

    #[error("need at least two groups, got {0}")]
    TooFewGroups(usize),

    #[error("group {0} is empty")]
    EmptyGroup(usize),

    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("subject does not match the model schema: {0}")]
    SchemaMismatch(String),

    #[error("cannot reach {k} clusters: at most {found} groups found")]
    UnreachableK { k: usize, found: usize },

    #[error("labels contain a single class")]
    SingleClass,

    #[error("horizons must satisfy 0 < t0 < t1 (got t0 = {t0}, t1 = {t1})")]
    InvalidHorizons { t0: f64, t1: f64 },

    #[error("cutoff must be positive, got {0}")]
    InvalidCutoff(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by reading or writing files rather than by the data.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io(_) => true,
            Error::Csv(e) => matches!(e.kind(), csv::ErrorKind::Io(_)),
            _ => false,
        }
    }
}
