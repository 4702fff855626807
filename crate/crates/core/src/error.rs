use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A graph node could not be evaluated at the given point.
    #[error("evaluation failed at node {node} ({op}): {msg}")]
    Eval { node: u64, op: &'static str, msg: String },

    /// An argument lies outside the open support of a component law.
    #[error("point outside law support: {0}")]
    Domain(String),

    /// Invalid configuration (bad JSON, inconsistent shapes, out-of-range knobs).
    #[error("config error: {0}")]
    Config(String),

    /// A request would exceed a hard resource cap.
    #[error("resource limit: {0}")]
    Resource(String),

    /// A Monte Carlo estimator failed (non-finite samples, empty input, ...).
    #[error("estimator failure: {0}")]
    Estimator(String),

    /// A model violates a structural assumption (e.g. non-invertible jump map).
    #[error("model violation: {0}")]
    Model(String),

    /// Requested operation is not implemented for these arguments.
    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;
