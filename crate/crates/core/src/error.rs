use thiserror::Error;

/// Errors raised by the barycenter library.
#[derive(Debug, Error)]
pub enum Error {
    /// An input failed a structural or numeric precondition.
    #[error("validation error: {0}")]
    Validation(String),

    /// Two objects that must share a dimension do not.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Marginals of a transport problem carry different total mass.
    #[error("infeasible marginals: source mass {source_mass}, target mass {target_mass}")]
    InfeasibleMarginals { source_mass: f64, target_mass: f64 },

    /// A linear-algebra routine met a matrix it cannot handle.
    #[error("linear algebra error: {0}")]
    LinearAlgebra(String),

    /// An iterative solver stopped before reaching its tolerance.
    #[error("{solver} did not converge after {iterations} iterations")]
    NotConverged { solver: &'static str, iterations: usize },

    /// A computation produced a non-finite value.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A CSV or JSON document could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }

    /// True for errors caused by the numerics rather than by malformed input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::LinearAlgebra(_) | Error::NotConverged { .. } | Error::Numerical(_)
        )
    }
}
