//! Dense tensors with a recording tape for reverse-mode differentiation.
//!
//! The engine covers the operation set a sequential recommender needs
//! (matrix products, gated activations, normalisations, row gathers and a
//! fused softmax cross-entropy) and nothing else. Shapes must match exactly;
//! the only broadcasts are scalar scaling and per-row scaling.
//!
//! Values are generic over [`Scalar`] so the same model code runs in `f32`
//! for training and in `f64` for finite-difference gradient checks.

mod error;
pub mod kernels;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use scalar::{DType, Scalar};
pub use tape::{Gradients, Mode, Reduction, Tape, Var};
pub use tensor::Tensor;

/// Stabiliser added to the mean square in RMS normalisation.
pub const RMS_NORM_EPS: f64 = 1e-6;

/// Lower clamp on vector norms in cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;
