use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("operator is not positive semidefinite (smallest eigenvalue {min_eig:e})")]
    NotPositiveSemidefinite { min_eig: f64 },
    #[error("operator positivity was never checked")]
    UncheckedOperator,
    #[error("vector has a component in the null space of the metric (size {residual:e})")]
    NullSpaceComponent { residual: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("singular system in {0}")]
    Singular(&'static str),
    #[error("zero pivot at row {0}")]
    ZeroPivot(usize),
    #[error("newton iteration failed to converge after {iterations} iterations (residual {residual:e})")]
    NewtonFailed { iterations: usize, residual: f64 },
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("step-length condition violated: {0}")]
    StepLength(String),
    #[error("point lies outside the admissible parameter region")]
    OutsideRegion,
    #[error("unsupported combination: {0}")]
    Unsupported(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

pub(crate) fn check_dim(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Dimension {
            what,
            expected,
            found,
        })
    }
}
