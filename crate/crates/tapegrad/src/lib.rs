//! Minimal reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! The engine records an eagerly-evaluated computation graph (a tape) and
//! replays it backwards to accumulate gradients for the leaves that were
//! marked trainable. It covers exactly the operator set needed by a small
//! convolutional image pipeline:
//!
//! * 3D (and, via a depth-1 axis, 2D) convolution and transposed convolution
//! * nearest-neighbor resampling, channel-wise scale/shift modulation
//! * pointwise nonlinearities, concatenation, reshape, row slicing
//! * reductions (global mean, per-channel spatial mean), L2 normalization
//!
//! All values are dynamic-dimension arrays of a [`Scalar`] (`f32` or `f64`);
//! the same graph code runs in either precision, which is what makes
//! finite-difference verification at 64-bit meaningful for a 32-bit model.

extern crate blas_src;

mod conv;
mod tape;

pub mod check;

pub use conv::ConvGeom;
pub use tape::{Grads, NodeId, Tape};

use ndarray::LinalgScalar;
use ndarray::ScalarOperand;

/// Element types the tape can differentiate through.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + num_traits::FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + 'static
{
    /// Lossy conversion from `f64`, used for literal constants.
    fn lit(v: f64) -> Self {
        num_traits::FromPrimitive::from_f64(v).expect("finite literal")
    }
    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f32 {
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn to_f64_lossy(self) -> f64 {
        self
    }
}
