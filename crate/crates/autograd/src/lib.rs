//! Small reverse-mode automatic differentiation engine over f64 arrays.
//!
//! Graphs are recorded eagerly as operations run. Every operation needed by
//! the image-translation networks (convolution, instance normalization,
//! reflection padding, upsampling, pooling, channel concatenation, spectral
//! weight division) carries a hand-written backward rule.

pub mod array;
pub mod check;
mod ops;
pub mod tensor;

pub use array::Array;
pub use tensor::{Gradients, Tensor};
