use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("operator is not symmetric positive definite: {0}")]
    NotSpd(String),

    #[error("rank-deficient system: {0}")]
    RankDeficient(String),

    #[error("ill-conditioned system: {0}")]
    IllConditioned(String),

    #[error("inner prox solver stalled: step residual {residual:.3e} after {iters} iterations")]
    InnerSolve { residual: f64, iters: usize },

    #[error("no admissible samples in the requested region after {attempts} attempts")]
    RegionEmpty { attempts: usize },

    #[error("trace data error: {0}")]
    TraceData(String),

    #[error("schedule infeasible at k = {k}: {reason}")]
    ScheduleInfeasible { k: usize, reason: String },

    #[error("objective diverged at iteration {k} (f = {value})")]
    Diverged { k: usize, value: f64 },

    #[error("insufficient tail data: {0}")]
    InsufficientTail(String),

    #[error("prerequisite failed: {0}")]
    Prerequisite(String),
}

pub type Result<T> = std::result::Result<T, Error>;
