use thiserror::Error;

/// Errors raised by validation and by the numeric kernels.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch in {field}: expected {expected}, found {found}")]
    DimensionMismatch {
        field: String,
        expected: usize,
        found: usize,
    },

    #[error("{field} is empty")]
    EmptyTrajectory { field: String },

    #[error("length mismatch in {field}: expected {expected}, found {found}")]
    LengthMismatch {
        field: String,
        expected: usize,
        found: usize,
    },

    #[error("pooling weights must be non-negative and sum to 1 (sum = {sum})")]
    BadPoolingWeights { sum: f64 },

    #[error("prototype does not match the pooled image states")]
    PrototypeMismatch,

    #[error("visual context has no image states")]
    EmptyImageStates,

    #[error("rollout group has no trajectories")]
    EmptyGroup,

    #[error("non-finite value in {field}")]
    NonFinite { field: String },

    #[error("log-probabilities are required but missing ({field})")]
    MissingLogProbs { field: String },

    #[error("attention split is required but missing")]
    MissingAttentionSplit,

    #[error("negative attention mass at step {step}")]
    NegativeMass { step: usize },

    #[error("sequence is constant; correlation undefined")]
    ConstantSequence,

    #[error("unknown schedule `{0}`")]
    UnknownSchedule(String),

    #[error("invalid value for `{key}`: {reason}")]
    InvalidConfig { key: String, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(field: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            field: field.into(),
            expected,
            found,
        }
    }

    pub(crate) fn len(field: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::LengthMismatch {
            field: field.into(),
            expected,
            found,
        }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            key: key.into(),
            reason: reason.into(),
        }
    }
}
