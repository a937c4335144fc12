//! Trainable image denoising built around a differentiable graph Laplacian
//! regularization layer.
//!
//! Exemplar feature maps define an 8-connected graph on each image patch; the
//! denoised patch solves `(I + mu L) x = y` and gradients flow back into the
//! feature networks analytically.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adam;
pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod graph;
pub mod harness;
pub mod net;
pub mod params;
pub mod patch;
pub mod tensor;

pub use error::{GlrError, Result};
pub use tensor::Tensor;
