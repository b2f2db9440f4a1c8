use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the estimation and inference pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("solver did not converge: {0}")]
    NoConvergence(String),

    #[error("edge ({0}, {1}) is not in the selected edge set")]
    EdgeNotSelected(usize, usize),

    #[error("confidence bound unbounded on the {side} side after bracket expansion")]
    UnboundedInterval { side: &'static str },

    #[error("degenerate input: {0}")]
    Degenerate(String),
}
