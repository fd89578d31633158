use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{GradMap, OptimizerState};
use crate::autodiff::Tensor;
use crate::error::Result;

/// What a parameter without an exact gradient this step receives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillMode {
    /// Zeros: the moment-only update.
    #[default]
    ZeroFill,
    /// The most recent exact gradient, zeros if there never was one.
    CachedFill,
}

/// Last exact gradient per parameter and the step it was computed at.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientCache {
    pub entries: BTreeMap<String, (Tensor, u64)>,
}

impl GradientCache {
    pub fn get(&self, name: &str) -> Option<&(Tensor, u64)> {
        self.entries.get(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Fills missing gradients per `mode`, refreshes the cache with every exact
/// gradient, then takes one AdamW step over all of `params`.
pub fn stale_cache_step(
    state: &mut OptimizerState,
    cache: &mut GradientCache,
    params: &mut [(String, &mut Tensor)],
    exact: &GradMap,
    mode: FillMode,
    step: u64,
) -> Result<()> {
    let mut full = GradMap::new();
    for (name, p) in params.iter() {
        let g = match (exact.get(name), mode) {
            (Some(g), _) => {
                cache.entries.insert(name.clone(), (g.clone(), step));
                g.clone()
            }
            (None, FillMode::CachedFill) => match cache.entries.get(name) {
                Some((g, _)) => g.clone(),
                None => Tensor::zeros(p.shape()),
            },
            (None, FillMode::ZeroFill) => Tensor::zeros(p.shape()),
        };
        full.insert(name.clone(), g);
    }
    state.adamw_step(params, &full)
}
