//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation as it is evaluated; [`Graph::backward`] walks the
//! record in reverse. Heavy kernels (convolution, matrix products) run through
//! `matrixmultiply` and split work per batch item via [`crate::parallel`], reducing
//! per-item partial gradients in a fixed order.

mod conv;
mod gemm;
pub mod gradcheck;
mod graph;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;

