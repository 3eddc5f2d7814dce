use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument is outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A marginal or score was requested at t <= 0, where the score of a
    /// discrete initial law does not exist.
    #[error("singular time t = {0}: the score is undefined for t <= 0")]
    Singularity(f64),

    /// Integration produced a non-finite state.
    #[error("integration diverged at step {step} (t = {t})")]
    Divergence { step: usize, t: f64 },

    /// Caller misuse (mismatched shapes, endpoints, empty inputs).
    #[error("usage error: {0}")]
    Usage(String),

    /// Problem too large for the exact solver.
    #[error("capacity exceeded: {pairs} pairs > {limit}; use the entropic solver")]
    Capacity { pairs: usize, limit: usize },

    /// Geometric degeneracy (collinear centroids, singular simplex).
    #[error("degenerate geometry: {0}")]
    Degeneracy(String),

    /// The latent complex does not cover enough of the source.
    #[error("coverage error: {0}")]
    Coverage(String),

    /// Malformed input file.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
