//! Masked discrete diffusion language modeling at desk scale.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: dense tensors with reverse-mode autodiff, a forkable
//!   counter-based random stream, AdamW and finite-difference gradient checks.
//! - [`model`]: a small pre-norm Transformer whose logits at position `i`
//!   predict the token at `i + 1`, runnable with causal or full attention.
//! - [`diffusion`]: the absorbing-state forward process, the `1/t` weighted
//!   loss, the context-adaptive token-level reweighting and SFT corruption.
//! - [`sampler`]: template-driven iterative unmasking.
//! - [`tasks`]: Countdown and 4x4 Sudoku generators, solvers, verifiers and a
//!   character tokenizer.
//! - [`harness`]: configs, checkpoints, metrics and the experiment drivers.

pub mod diffusion;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod par;
pub mod sampler;
pub mod tasks;

pub use error::{Error, Result};
