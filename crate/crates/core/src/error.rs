use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("infeasible point: {0}")]
    Infeasible(String),
    #[error("non-finite value at step {step}, particle {particle}")]
    NonFinite { step: usize, particle: usize },
    #[error("regression design rank-deficient at step {step} even after degree reduction")]
    RankDeficient { step: usize },
    #[error("Riccati blow-up at t = {time}")]
    RiccatiBlowup { time: f64 },
    #[error("no convergence after {iterations} iterations (last residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("abnormal certificate (r0 = 0), comparison undefined")]
    Abnormal,
    #[error("empty feasible set: {0}")]
    EmptyFeasibleSet(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid override {key}: {msg}")]
    Override { key: String, msg: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing data: {0}")]
    MissingData(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch {
            what,
            expected,
            found,
        });
    }
    Ok(())
}
