use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// The predicted or simulated state left the finite region.
    #[error("state diverged at sample {sample} (t = {time})")]
    Divergence { sample: usize, time: f64 },

    #[error("control polytope is empty")]
    EmptyPolytope,

    #[error("control polytope is unbounded along axis {axis}")]
    UnboundedPolytope { axis: usize },

    #[error("linear program is unbounded")]
    Unbounded,

    #[error("quadratic program is infeasible")]
    Infeasible,

    #[error("{solver} did not converge within {iterations} iterations")]
    IterationLimit {
        solver: &'static str,
        iterations: usize,
    },

    #[error("estimation failed: {0}")]
    Estimation(String),

    /// Raised when a guarantee the filter relies on is violated at runtime.
    #[error("internal contract violated: {0}")]
    InternalContract(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
