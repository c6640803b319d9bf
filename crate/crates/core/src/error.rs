use thiserror::Error;

/// Errors raised by the environment, discretization and solver layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid environment: {0}")]
    InvalidEnvironment(String),

    #[error("invalid sampling plan: {0}")]
    InvalidSampling(String),

    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("scale eps = {eps} is not commensurate with the grid: {reason}")]
    Incommensurate { eps: f64, reason: String },

    #[error("field mismatch: {0}")]
    FieldMismatch(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("integrand rejected: {0}")]
    NonConvex(String),

    #[error("conjugate gradient did not converge after {iterations} iterations (relative residual {residual:e})")]
    CgNotConverged { iterations: usize, residual: f64 },

    #[error("line search failed after {halvings} step halvings (gradient norm {gradient_norm:e})")]
    LineSearch { halvings: usize, gradient_norm: f64 },

    #[error("solver did not converge: {0}")]
    Divergence(String),

    #[error("Voigt-Reuss bound violated: {0}")]
    BoundViolation(String),

    #[error("degenerate potential field: {0}")]
    Degenerate(String),

    #[error("invalid flow specification: {0}")]
    InvalidFlow(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
