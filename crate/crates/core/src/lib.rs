//! Detection of sequential image manipulations as image-to-sequence
//! prediction.
//!
//! The crate bundles everything needed to run the experiments end to end:
//!
//! * [`tensor`]: dense f32 tensors with tape-based reverse-mode autodiff;
//! * [`backbone`], [`encoder`], [`decoder`]: a residual CNN, a self-attention
//!   encoder over its feature grid, and an autoregressive decoder whose
//!   cross-attention is biased by learned Gaussian spatial weight maps;
//! * [`inference`]: greedy adaptive-length decoding and batch reports;
//! * [`metrics`]: fixed-length and adaptive-length sequence accuracy;
//! * [`synth`]: a procedural, exactly invertible manipulation dataset and
//!   inverse-order recovery;
//! * [`train`]: losses, SGD with momentum, the learning-rate schedule, the
//!   training loop for both model kinds, checkpoints and ablations.

pub mod backbone;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};

/// Longest manipulation sequence the system handles.
pub const MAX_SEQ_LEN: usize = 5;
