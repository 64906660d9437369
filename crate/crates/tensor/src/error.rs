use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this graph; call reset_grads first")]
    BackwardTwice,
    #[error("graph is empty")]
    EmptyGraph,
    #[error("function value is not finite: {0}")]
    NonFinite(f64),
    #[error("tensor blob: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn mismatch(op: &'static str, shapes: &[&[usize]]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        msg: msg.into(),
    }
}
