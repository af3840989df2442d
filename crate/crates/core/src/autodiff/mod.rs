//! Minimal reverse-mode automatic differentiation over `ndarray`.
//!
//! The engine is generic over the element type: training runs in `f32` (and
//! checkpoints are then bit-exact), while gradient-check tests instantiate the
//! same graphs in `f64`. Graphs are built eagerly per forward pass and dropped
//! afterwards; there is no global tape. Single-threaded by construction, so a
//! fixed seed reproduces runs bit for bit.

mod adam;
mod scalar;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use scalar::Scalar;
pub use tensor::Tensor;
