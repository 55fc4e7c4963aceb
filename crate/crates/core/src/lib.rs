//! Multi-modal activity recognition with spatial/temporal transformer
//! streams, pairwise fusion tokens, and teacher-to-student distillation.
//!
//! Everything numeric runs on the small reverse-mode engine in [`tensor`].
//! The layers on top of it are:
//!
//! - [`nn`]: linear layers, layer norm, positional encoding, attention and
//!   pre-norm encoder layers.
//! - [`data`]: synthetic dataset generation, on-disk dataset ingestion,
//!   window pooling / alignment, split protocols and batching.
//! - [`model`]: the teacher (streams + mid-fusion) and student networks,
//!   ensemble prediction and checkpoints.
//! - [`distill`]: losses, Adam, training loops, evaluation metrics and
//!   reports.
//! - [`exec`]: run-level data parallelism with a sequential fallback.

pub mod data;
pub mod distill;
mod error;
pub mod exec;
pub mod model;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Real, Tensor, Var};
