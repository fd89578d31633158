//! AdamW (with the zero-gradient implicit update), stale-gradient caching for
//! ablations, and a forward-only zeroth-order stepper.

mod adamw;
mod stale;
mod zeroth;

use std::collections::BTreeMap;

use crate::autodiff::Tensor;

pub use adamw::{AdamWConfig, Moments, OptimizerState};
pub use stale::{stale_cache_step, FillMode, GradientCache};
pub use zeroth::{zero_order_step, zo_apply, zo_probe, ZeroOrderConfig, ZeroOrderOutcome, ZoParams};

/// Gradients keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor>;
