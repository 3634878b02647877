//! Auditory attention decoding from EEG and two speakers' spectrograms.
//!
//! The crate covers the full path: signal conditioning ([`dsp`]), a small
//! reverse-mode autodiff core ([`tensor`]), the joint CNN/BLSTM classifier
//! ([`model`]), training and statistics ([`train`]), magnitude pruning
//! ([`sparsify`]) and a synthetic trial generator ([`synth`]).
//!
//! All numerics are generic over [`Scalar`]; training uses `f32` and
//! gradient checks use `f64`.

pub mod dsp;
pub mod error;
pub mod model;
pub mod scalar;
pub mod sparsify;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{AadError, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape32 = tensor::Tape<f32>;
pub type Tape64 = tensor::Tape<f64>;
pub type AadModel32 = model::AadModel<f32>;
pub type AadModel64 = model::AadModel<f64>;
