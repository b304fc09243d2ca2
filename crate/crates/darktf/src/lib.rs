//! darktf: a triple-branch, weight-sharing video transformer for
//! day-to-night action recognition, small enough to train and verify on a
//! single CPU core.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense f64 tensors with reverse-mode automatic differentiation
//! - [`rng`]: seeded deterministic random numbers (SplitMix64)
//! - [`video`] / [`tokenizer`]: clips, frame sampling, patch embedding
//! - [`attention`]: divided temporal/spatial self-attention and cross-attention
//! - [`model`]: the three-branch transformer and inference
//! - [`losses`]: classification and distillation objectives
//! - [`synth`] / [`clipfile`]: the synthetic paired day/night benchmark and
//!   the on-disk clip format
//! - [`train`]: optimizers, the training loop, evaluation, ablation grids
//! - [`checkpoint`] / [`config`] / [`export`]: persistence and CSV exports
//! - [`gradcheck`]: the finite-difference verification suite

pub mod attention;
pub mod checkpoint;
pub mod clipfile;
pub mod config;
pub mod export;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod train;
pub mod video;

mod error;
pub use error::Error;

pub type Result<T> = std::result::Result<T, Error>;
