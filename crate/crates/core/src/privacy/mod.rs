//! Differential privacy for the shared module: DP-SGD clipping/noising and an RDP accountant.

mod accountant;
mod mechanism;

pub use accountant::{account, rdp_epsilon, PrivacySpend, ALPHA_GRID, DEFAULT_DELTA};
pub use mechanism::{clip, clip_and_noise, DpParams, DpScope};

use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum PrivacyError {
    #[error("empty gradient batch")]
    EmptyBatch,
    #[error("per-sample gradients have inconsistent lengths ({expected} vs {found})")]
    GradientLength { expected: usize, found: usize },
    #[error("clipping norm must be positive, got {0}")]
    ClipNorm(f64),
    #[error("noise multiplier must be non-negative, got {0}")]
    NoiseMultiplier(f64),
    #[error("noise needs a finite clipping norm")]
    UnboundedNoise,
    #[error("target delta must lie in (0, 1), got {0}")]
    Delta(f64),
}
