//! Minimal reverse-mode automatic differentiation over dense f64 tensors:
//! just enough for the MLP fields, pattern bilinear sampling, volumetric
//! compositing and the image losses.

mod adam;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_update, AdamConfig, AdamState};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{bilinear_footprint, bilinear_sample, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("backward needs a scalar loss, got {0}x{1}")]
    NotScalar(usize, usize),
    #[error("tape already consumed by backward; re-record the computation")]
    TapeSpent,
}
