use std::path::PathBuf;

use jers_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error in {field}: {detail}")]
    Format { field: String, detail: String },

    #[error("value error: {0}")]
    Value(String),

    #[error("singular affine matrix: determinant {det:e}")]
    Singular { det: f64 },

    #[error("numeric fault in loss term {term}: {source}")]
    NumericTerm {
        term: &'static str,
        source: TensorError,
    },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CoreError {
    pub(crate) fn format(field: impl Into<String>, detail: impl Into<String>) -> Self {
        CoreError::Format {
            field: field.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for faults caused by non-finite values anywhere in the computation.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            CoreError::NumericTerm { .. } | CoreError::Tensor(TensorError::NumericFault { .. })
        )
    }
}
