use alloc::string::String;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid potential: {0}")]
    InvalidPotential(String),

    #[error("invalid density: {0}")]
    InvalidDensity(String),

    #[error("invalid field: {0}")]
    InvalidField(String),

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: usize, found: usize },

    #[error("kernel entry ({row}, {col}) is not strictly positive; grid too coarse or domain too small")]
    PositivityViolation { row: usize, col: usize },

    #[error("field {field} is not strictly positive at node {node}")]
    NonPositiveField { field: &'static str, node: usize },

    #[error("no convergence after {iterations} iterations (last residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("division by {value:e} at node {node}; domain too small")]
    Underflow { node: usize, value: f64 },

    #[error("rescaled arguments leave the grid: {0}")]
    DomainExceeded(String),

    #[error("drift fields come from different Schroedinger pairs")]
    ProvenanceMismatch,

    #[error("request too large: {0}")]
    TooLarge(String),

    #[error("expression error: {0}")]
    Expression(String),

    #[error("invalid symmetry triple: {0}")]
    InvalidTriple(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T> = core::result::Result<T, Error>;
