//! Task-level curriculum learning for non-autoregressive sequence transduction.
//!
//! A single Transformer decoder covers autoregressive (`k = 1`),
//! semi-autoregressive (`1 < k < N`) and non-autoregressive (`k = N`)
//! generation through a causal-k self-attention mask. Training moves the
//! model through those tasks on a curriculum schedule.

pub mod corpus;
pub mod curriculum;
pub mod decode;
pub mod error;
pub mod harness;
pub mod model;
pub mod numcore;

pub use error::{Error, Result};
