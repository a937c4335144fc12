//! Minimal reverse-mode differentiation over [`Tensor`](crate::tensor::Tensor)
//! values, covering the layers used by the denoising networks.

mod kernels;
mod tape;

pub use tape::{CustomOp, Padding, Tape, Var};

#[cfg(test)]
mod tests;
