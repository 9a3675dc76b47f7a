//! Per-tensor linear arithmetic over checkpoints and Frobenius-norm
//! diagnostics.
//!
//! Every merge is a two-term linear combination `c0 * base + c1 * tuned`,
//! evaluated tensor by tensor so that at most one tensor from each input and
//! one output buffer are alive at a time. Interpolation and extrapolation are
//! the coefficient pairs `(1 - gamma, gamma)` and `(-alpha, 1 + alpha)`.

mod merge;
mod norm;
mod residency;

use thiserror::Error;

use crate::tensor_store::StoreError;

pub use merge::{
    combine_values, extrapolate, interpolate, lincomb, lincomb_checkpoint, lincomb_with,
    CastPolicy, MergeMode, MergeSpec, MergeSummary,
};
pub use norm::{
    frobenius_norm, norm_report, normalized_frobenius_norm, sum_of_squares, CompensatedSum,
    NormReport, NormRow,
};
pub use residency::{ResidencyGauge, ResidencyToken};

#[derive(Debug, Error)]
pub enum ArithError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("incompatible checkpoints: {0}")]
    Incompatible(String),
    #[error("invalid merge: {0}")]
    InvalidSpec(String),
    #[error("tensor {tensor:?} has a non-finite value at element {index}")]
    NonFinite { tensor: String, index: usize },
}
