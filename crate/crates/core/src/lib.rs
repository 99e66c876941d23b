//! Non-autoregressive sequence generation with learnable query tokens.
//!
//! The parallel decoder turns a fixed, trained sequence of query vectors into
//! a grid of token logits in a single pass. Training marginalizes over every
//! alignment of the grid that collapses (merge repeats, drop blanks) to the
//! target; inference takes the per-position argmax and collapses it.
//!
//! Module map:
//! - [`numerics`]: tensors, log-space helpers, reverse-mode tape, PRNG
//! - [`ctc`]: collapse rule, alignment enumeration, alignment loss and CE
//! - [`model`]: encoder, autoregressive and parallel decoders, checkpoints
//! - [`decoding`]: greedy/prefix-beam for grids, greedy/beam for AR
//! - [`training`]: Adam loops for teacher and student, distillation
//! - [`tasks`]: seeded synthetic datasets and their file format
//! - [`experiments`]: evaluation, latency benchmark, query sweep, error propagation

pub mod ctc;
pub mod decoding;
pub mod error;
pub mod experiments;
pub mod model;
pub mod numerics;
pub mod tasks;
pub mod training;

pub use error::{Error, Result};
