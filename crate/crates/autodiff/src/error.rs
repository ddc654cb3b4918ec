use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch in {dim}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: expected rank {expected}, got rank {got}")]
    Rank {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar root, got {numel} elements")]
    NonScalarRoot { numel: usize },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

pub(crate) fn check_dim(op: &'static str, dim: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(AutodiffError::Shape {
            op,
            dim,
            expected,
            got,
        })
    }
}
