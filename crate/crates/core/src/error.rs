use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate state at t = {t}: gamma is zero")]
    DegenerateState { t: f64 },

    #[error("infeasible dims: sum of dims {total} exceeds ambient dimension {n}")]
    InfeasibleDims { total: usize, n: usize },

    #[error("invalid params: {0}")]
    InvalidParams(String),

    #[error("unsupported schedule: {0}")]
    UnsupportedSchedule(String),

    #[error("training diverged at iteration {iter}")]
    TrainingDiverged { iter: usize },

    #[error("solver diverged at step {step}")]
    SolverDiverged { step: usize },

    #[error("undefined score: {0}")]
    UndefinedScore(String),

    #[error("invalid index {index}: numerical rank is {rank}")]
    InvalidIndex { index: usize, rank: usize },

    #[error("serialization: {0}")]
    Serialization(String),
}

impl Error {
    /// True for failures caused by the numbers rather than by the caller.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateState { .. }
                | Error::TrainingDiverged { .. }
                | Error::SolverDiverged { .. }
                | Error::UndefinedScore(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
