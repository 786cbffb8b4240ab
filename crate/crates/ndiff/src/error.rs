use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NdiffError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("optimizer: non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("optimizer: state does not match parameter `{param}`")]
    StateMismatch { param: String },
}

pub type Result<T> = std::result::Result<T, NdiffError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> NdiffError {
    NdiffError::Shape { op, detail: detail.into() }
}
