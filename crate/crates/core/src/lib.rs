//! Temporally-adaptive convolution (TAdaConv) and the machinery to check it.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`tape`] and [`ops`]: a small dense tensor engine with
//!   reverse-mode differentiation over whole-tensor primitives.
//! * [`baseline`]: the static video operators TAdaConv is measured against,
//!   and the rewrite of a temporal convolution as per-location calibrated
//!   spatial kernels.
//! * [`tada`]: calibration-weight generation and the calibrated convolution.
//! * [`blocks`]: temporal feature aggregation, bottleneck blocks and network
//!   descriptors.
//! * [`cost`]: closed-form FLOPs / parameter accounting.
//! * [`harness`]: seeded verification suites and the synthetic ordering task.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below pin the common choices.

pub mod baseline;
pub mod blocks;
pub mod cost;
mod error;
pub mod gradcheck;
pub mod harness;
mod kernels;
pub mod nn;
pub mod ops;
pub mod params;
pub mod reference;
mod scalar;
pub mod tada;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type ParamStore32 = params::ParamStore<f32>;
pub type ParamStore64 = params::ParamStore<f64>;
