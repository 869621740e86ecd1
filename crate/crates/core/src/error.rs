use nalgebra::DVector;
use thiserror::Error;

/// Errors returned by the library.
#[derive(Debug, Error)]
pub enum SweepError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("precondition violated: {0}")]
    PreconditionViolation(String),

    /// An iterative method stopped without converging. `best` is the best
    /// iterate found, when one exists.
    #[error("numerical failure: {message}")]
    NumericalFailure { message: String, best: Option<DVector<f64>> },

    /// A velocity or vector is not representable by the normal cone.
    #[error("not in cone: residual {residual:.3e} exceeds {tolerance:.3e}")]
    NotInCone { residual: f64, tolerance: f64 },

    #[error("direction outside the coderivative domain: {0}")]
    DomainViolation(String),

    /// The backward dual sweep could not satisfy the stage equations.
    /// `profile[j]` is the stage residual at node `j`.
    #[error("dual reconstruction failed: max stage residual {max:.3e}")]
    ReconstructionFailed { max: f64, profile: Vec<f64> },

    #[error("config error in `{field}`{}: {message}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Config { field: String, line: Option<usize>, message: String },

    #[error("csv error: {0}")]
    Csv(String),
}

pub type Result<T> = std::result::Result<T, SweepError>;

pub(crate) fn invalid(msg: impl Into<String>) -> SweepError {
    SweepError::InvalidArgument(msg.into())
}

pub(crate) fn precondition(msg: impl Into<String>) -> SweepError {
    SweepError::PreconditionViolation(msg.into())
}

pub(crate) fn check_finite(v: &DVector<f64>, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(invalid(format!("{what} has non-finite entries")))
    }
}
