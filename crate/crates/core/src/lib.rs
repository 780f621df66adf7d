//! Box-to-mask video object segmentation built around a differentiable
//! spatio-temporal aggregation layer.
//!
//! The aggregation layer fits one convolution filter jointly over all frames
//! of a window by unrolled steepest descent ([`solver`]); encoders, decoder
//! and a toy backbone ([`model`]) wrap it into a trainable pipeline
//! ([`pipeline`]) that turns per-frame boxes into masks.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod pipeline;
pub mod registry;
pub mod solver;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod testutil;
