//! Layer-cyclic selective backpropagation on a desk-scale LoRA transformer.
//!
//! Each training step computes exact gradients for only a subset of blocks.
//! Unselected blocks still run forward, but their residual branch is cut from
//! the tape, so upstream blocks keep receiving gradient through the identity
//! path and AdamW momentum keeps moving the unselected adapters.

pub mod autodiff;
pub mod bench;
mod error;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod optim;
pub mod rng;
pub mod selection;

pub use error::{Error, Result};
