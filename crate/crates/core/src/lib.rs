//! Differentiable ACO-OFDM link simulator with learned joint probabilistic
//! and geometric constellation shaping under a PAPR penalty.
//!
//! The transmitter (NN1 probabilities, NN2 geometry), the ACO-OFDM chain
//! and the NN3 demapper are trained end to end on a small tape-based
//! autodiff engine. Baselines (uniform QAM, clipping, SLM) and Monte-Carlo
//! metrics share the same chain.

// `!(x > 0.0)` is used on purpose so NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod fft;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod nn;
pub mod ofdm;
pub mod optim;
pub mod selftest;
pub mod shaping;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
