use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// The input geometry does not determine a unique solution.
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    /// A bounded resource (grid budget, placement retries) ran out.
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("no keypoint found: accumulator is empty")]
    NoPeak,
    /// Kernel fitting produced a non-finite loss; the trace up to that point is kept.
    #[error("loss diverged at epoch {epoch}")]
    Diverged { epoch: usize, trace: Vec<f64> },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        Error::Degenerate(msg.into())
    }

    pub(crate) fn capacity(msg: impl Into<String>) -> Self {
        Error::Capacity(msg.into())
    }
}
