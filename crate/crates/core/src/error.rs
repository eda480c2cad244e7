use thiserror::Error;

/// Errors raised by the numerical routines in this crate.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("eigen-decomposition of the Jacobi matrix failed to converge for {n_nodes} nodes")]
    QuadratureSetup { n_nodes: usize },

    #[error("distribution {kind} cannot bind to a {family} dimension")]
    FamilyMismatch {
        kind: &'static str,
        family: &'static str,
    },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {context} at quadrature node {node} (xi = {xi:?})")]
    NonFiniteAtNode {
        context: &'static str,
        node: usize,
        xi: Vec<f64>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("state outside the model's operating envelope: {0}")]
    Envelope(String),

    #[error("matrix is singular in {0}")]
    Singular(&'static str),

    #[error("Newton iteration did not converge in {iterations} iterations (residual {residual:e})")]
    NewtonDiverged { iterations: usize, residual: f64 },

    #[error("Q_uu is not positive definite at step {step} (min eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { step: usize, min_eigenvalue: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("too many Monte-Carlo samples diverged: {failed} of {total}")]
    SampleBlowUp { failed: usize, total: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
