//! Error type shared by the whole engine.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv header mismatch: {0}")]
    Header(String),

    #[error("line {line}: {reason}")]
    Row { line: u64, reason: String },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("time periods overlap: [{0}, {1})")]
    OverlappingPeriods(String, String),

    #[error("period [{0}, {1}) is not covered by the customer index")]
    PeriodNotIndexed(String, String),

    #[error("MAP optimizer did not converge after {iterations} iterations (gradient norm {grad_norm:.3e})")]
    NonConvergence { iterations: usize, grad_norm: f64 },

    #[error("Hessian is not positive definite, even after jitter")]
    NotPositiveDefinite,

    #[error("no grid price exceeds the unit cost {cost}")]
    NoProfitablePrice { cost: f64 },

    #[error("data inconsistency: {0}")]
    DataInconsistency(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn row(line: u64, reason: impl Into<String>) -> Self {
        Error::Row {
            line,
            reason: reason.into(),
        }
    }
}
