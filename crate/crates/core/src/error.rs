use thiserror::Error;

use crate::align::IterationRecord;

pub type Result<T> = std::result::Result<T, MrlrError>;

#[derive(Debug, Error)]
pub enum MrlrError {
    #[error("invalid transform: {0}")]
    InvalidTransform(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: String, found: String },

    /// A vector that must be normalized has zero (or non-finite) l2 norm.
    #[error("zero-norm vector: {0}")]
    ZeroNorm(String),

    #[error("singular system: {0}")]
    Singular(String),

    /// Alignment stopped early. The records gathered before the failure are kept.
    #[error("alignment failed after {} inner iterations: {cause}", trace.len())]
    AlignmentFailed {
        cause: Box<MrlrError>,
        trace: Vec<IterationRecord>,
    },

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl MrlrError {
    pub(crate) fn mismatch(expected: impl ToString, found: impl ToString) -> Self {
        MrlrError::DimensionMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    /// True for failures that originate in the numerics rather than the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            MrlrError::ZeroNorm(_)
                | MrlrError::Singular(_)
                | MrlrError::InvalidTransform(_)
                | MrlrError::AlignmentFailed { .. }
        )
    }
}
