use thiserror::Error;

use crate::backends::BackendError;
use crate::calibration::CalibrationError;
use crate::curation::CurationError;
use crate::io::JsonlError;
use crate::metrics::MetricsError;
use crate::rewards::RewardError;
use crate::trace::TraceError;

/// Crate-wide error, wrapping each module's own error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Curation(#[from] CurationError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

impl Error {
    /// True when the failure came from an external service rather than from
    /// invalid input.
    pub fn is_backend(&self) -> bool {
        match self {
            Error::Backend(_) => true,
            Error::Curation(e) => e.is_backend(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
