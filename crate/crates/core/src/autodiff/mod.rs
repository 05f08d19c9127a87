//! Minimal dense tensors with tape-based reverse-mode differentiation.

mod tape;
mod tensor;

#[cfg(test)]
mod gradcheck_tests;

pub use tape::{grad_wrt_leaf, sigmoid, AttnMask, Gradients, Tape, Var};
pub use tensor::{gelu, gelu_scalar, layer_norm, matmul, softmax, Tensor, LAYER_NORM_EPS};
