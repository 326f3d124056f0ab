use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    /// An iterative routine ran out of iterations. The last iterate is kept
    /// so callers can report partial diagnostics.
    #[error("{what} did not converge after {iterations} iterations")]
    ConvergenceFailure {
        what: &'static str,
        iterations: usize,
        last_iterate: Vec<f64>,
    },

    #[error("singular information: {0}")]
    SingularInformation(String),

    #[error("unsupported method: {0}")]
    UnsupportedMethod(String),

    #[error("infeasible truncation: acceptance probability {0:.3e} is below 1e-6")]
    InfeasibleTruncation(f64),

    #[error("degenerate case: {0}")]
    Degenerate(String),
}

impl Error {
    /// True for failures caused by the numbers rather than by the inputs' shape.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::ConvergenceFailure { .. }
                | Error::SingularInformation(_)
                | Error::InfeasibleTruncation(_)
                | Error::Degenerate(_)
        )
    }
}
