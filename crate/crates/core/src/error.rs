use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("field has {found} values, grid expects {expected}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("field contains a non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("fields live on different grids")]
    GridMismatch,

    #[error("spectrum violates Hermitian symmetry (defect {defect:.3e}, allowed {allowed:.3e})")]
    HermitianViolation { defect: f64, allowed: f64 },

    #[error("right-hand side is incompatible: mean {mean:.6e} must vanish")]
    Incompatible { mean: f64 },

    #[error("exponential overflow: max u = {max_u:.6e}")]
    Overflow { max_u: f64 },

    #[error("linear solve stagnated after {iterations} iterations (residual history {history:?})")]
    LinearSolveStagnation { iterations: usize, history: Vec<f64> },

    #[error("time step underflow at t = {t:.6e}: dt = {dt:.3e} below the minimum")]
    StepUnderflow { t: f64, dt: f64 },

    #[error("optimizer did not converge: {0}")]
    OptimizerFailure(String),

    #[error("{0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable snake_case name of the failure class.
    pub fn class(&self) -> &'static str {
        match self {
            Error::InvalidGrid(_) => "invalid_grid",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::NonFinite { .. } => "non_finite",
            Error::GridMismatch => "grid_mismatch",
            Error::HermitianViolation { .. } => "hermitian_violation",
            Error::Incompatible { .. } => "incompatible",
            Error::Overflow { .. } => "overflow",
            Error::LinearSolveStagnation { .. } => "linear_solve_stagnation",
            Error::StepUnderflow { .. } => "step_underflow",
            Error::OptimizerFailure(_) => "optimizer_failure",
            Error::Format(_) => "format",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
        }
    }

    /// Failures of the numerics, as opposed to bad input or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::HermitianViolation { .. }
                | Error::Incompatible { .. }
                | Error::Overflow { .. }
                | Error::LinearSolveStagnation { .. }
                | Error::StepUnderflow { .. }
                | Error::OptimizerFailure(_)
        )
    }
}
