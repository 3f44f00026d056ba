use thiserror::Error;

use crate::selection::SelectionReport;

pub type Result<T> = std::result::Result<T, SlpcaError>;

#[derive(Debug, Error)]
pub enum SlpcaError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// The score update could not be solved even after ridge stabilization,
    /// or the orthonormalization produced a degenerate factor.
    #[error("degenerate factor: {0}")]
    DegenerateFactor(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A grid search aborted part-way; the rows fitted so far are kept.
    #[error("model selection aborted after {} grid points: {source}", partial.rows.len())]
    Selection {
        partial: Box<SelectionReport>,
        source: Box<SlpcaError>,
    },

    #[error("{failed} of {attempted} replicates failed (need at least {required} successes)")]
    TooManyFailures {
        failed: usize,
        attempted: usize,
        required: usize,
    },
}

impl SlpcaError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        SlpcaError::InvalidInput(msg.into())
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        SlpcaError::DimensionMismatch(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        SlpcaError::InvalidConfig(msg.into())
    }

    /// True for errors caused by numerical degeneracy rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            SlpcaError::DegenerateFactor(_) | SlpcaError::Numerical(_) => true,
            SlpcaError::Selection { source, .. } => source.is_numerical(),
            SlpcaError::TooManyFailures { .. } => true,
            _ => false,
        }
    }
}
