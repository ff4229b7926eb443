use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("{op}: non-finite value produced at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("empty reduction")]
    EmptyReduction,

    #[error("axis {axis} out of range for shape {shape:?}")]
    Axis { axis: usize, shape: Vec<usize> },

    #[error("backward needs a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("invalid config `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("{tokens} tokens exceed the cross-attention limit of {limit}; downsample the feature map first")]
    TokenOverflow { tokens: usize, limit: usize },

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
