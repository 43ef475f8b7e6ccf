use thiserror::Error;

/// Library-wide error type.
///
/// Variants are grouped by how callers are expected to react: input
/// validation problems (`InvalidArgument`, `Config`), numerical failures
/// that carry enough state to diagnose the run (`ConvergenceFailure`,
/// `Divergence`), and orchestration failures from the experiment layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("did not converge after {iterations} iterations (last estimate {last_estimate:e})")]
    ConvergenceFailure { iterations: usize, last_estimate: f64 },

    #[error("graph construction failed: {0}")]
    ConstructionFailure(String),

    #[error("iterates diverged at iteration {iteration}: {context}")]
    Divergence { iteration: usize, context: String },

    #[error("step-size search failed: {0}")]
    SearchFailure(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("precondition violated: {0}")]
    PreconditionViolation(String),

    #[error("experiment failed: {0}")]
    ExperimentFailure(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Process exit code used by the CLI: 2 for validation errors,
    /// 3 for divergence-type failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) | Error::PreconditionViolation(_) => 2,
            Error::Divergence { .. } | Error::ExperimentFailure(_) => 3,
            _ => 1,
        }
    }
}
