//! ConBiMamba speaker diarization: a bidirectional selective-state-space
//! encoder with layer-wise feature aggregation, PIT and boundary-enhanced
//! training losses, and a chunk → embed → cluster inference pipeline with
//! DER scoring.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which the training loop and pipeline use.

pub mod cli;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nn;
pub mod numcore;
pub mod pipeline;
pub mod scalar;
pub mod ssm;
pub mod synthdata;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = numcore::Tensor<f64>;
pub type Tape = numcore::Tape<f64>;
pub type ParamStore = numcore::ParamStore<f64>;
pub type Ctx = nn::Ctx<f64>;
pub type Model = encoder::Model<f64>;
