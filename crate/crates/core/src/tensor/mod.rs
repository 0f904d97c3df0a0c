//! Dense matrices and a deterministic SVD.

mod matrix;
mod svd;

pub use matrix::{dot, l2_norm, outer, Matrix};
pub use svd::{svd, truncate_svd, SvdResult, JACOBI_TOLERANCE, MAX_SWEEPS};

use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("data length {len} does not match {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("non-finite entry at flat index {index}")]
    NonFinite { index: usize },
    #[error("svd did not converge after {sweeps} sweeps (max off-diagonal {off_diagonal:e})")]
    SvdNoConvergence { sweeps: usize, off_diagonal: f64 },
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, left: &Matrix, right: &Matrix) -> Self {
        TensorError::ShapeMismatch {
            op,
            left: left.shape(),
            right: right.shape(),
        }
    }
}
