use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the planning toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got} ({context})")]
    Shape {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("training diverged at step {step}: loss = {loss}")]
    TrainingDivergence { step: usize, loss: f64 },

    #[error("environment usage error: {0}")]
    EnvUsage(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no window fits: horizon {horizon} exceeds every episode (longest is {longest})")]
    EmptyWindows { horizon: usize, longest: usize },

    #[error("diffusion step {step} out of range 1..={max}")]
    StepOutOfRange { step: usize, max: usize },

    #[error("guidance error: {0}")]
    Guidance(String),

    #[error("planner produced non-finite candidates twice in a row")]
    NonFiniteCandidate,

    #[error("infeasible budget {budget}: no trajectory with C(tau) <= budget has positive probability")]
    InfeasibleBudget { budget: f64 },

    #[error("bound undefined: state-action pair ({state}, {action}) has zero count")]
    UndefinedBound { state: usize, action: usize },

    #[error("oracle internal error: {0}")]
    OracleInternal(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("artifact error at {path}: {reason}")]
    Artifact { path: PathBuf, reason: String },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
