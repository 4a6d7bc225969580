use thiserror::Error;

/// Errors raised across the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("vertex {0} has no outgoing edge")]
    ZeroOutDegree(usize),

    #[error("digraph is not simple: {0}")]
    NotSimple(String),

    #[error("power iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("symmetry violated at ({i}, {j}): deviation {deviation:e}")]
    Asymmetric { i: usize, j: usize, deviation: f64 },

    #[error("not a metric: {0}")]
    NotMetric(String),

    #[error("invalid composition: {0}")]
    InvalidComposition(String),

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("weight norm {norm} exceeds budget {budget} in layer {layer}")]
    BudgetExceeded { layer: usize, norm: f64, budget: f64 },

    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },

    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error("{what} too large: {size} > {limit}")]
    TooLarge { what: &'static str, size: usize, limit: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
