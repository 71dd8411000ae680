use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("numeric fault in {op}: non-finite value {value} at flat index {index}")]
    NumericFault {
        op: &'static str,
        index: usize,
        value: f64,
    },

    #[error("contract error: {0}")]
    Contract(String),

    #[error("value error: {0}")]
    Value(String),
}

impl TensorError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
