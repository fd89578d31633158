//! Per-step layer selection: warmup, ratio schedules and selection strategies.

mod schedule;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use schedule::{schedule_ratio, RatioSchedule, ScheduleKind};

use crate::error::{Error, Result};
use crate::model::BlockMode;
use crate::rng::RunRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Uniform,
    RoundRobin,
    Importance,
    Freeze,
    Full,
    StochasticDepth,
}

impl StrategyKind {
    fn name(self) -> &'static str {
        match self {
            StrategyKind::Uniform => "uniform",
            StrategyKind::RoundRobin => "round_robin",
            StrategyKind::Importance => "importance",
            StrategyKind::Freeze => "freeze",
            StrategyKind::Full => "full",
            StrategyKind::StochasticDepth => "stochastic_depth",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionStrategy {
    pub kind: StrategyKind,
    /// Leading fraction of layers that stay detached under `freeze`.
    pub freeze_fraction: f64,
    /// EMA decay of importance scores.
    pub ema_alpha: f64,
    /// Softmax temperature of importance sampling.
    pub temperature: f64,
}

impl Default for SelectionStrategy {
    fn default() -> Self {
        Self {
            kind: StrategyKind::Uniform,
            freeze_fraction: 0.5,
            ema_alpha: 0.9,
            temperature: 2.0,
        }
    }
}

impl SelectionStrategy {
    pub fn of(kind: StrategyKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.freeze_fraction) {
            return Err(Error::Config(format!(
                "freeze_fraction must be in [0, 1), got {}",
                self.freeze_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return Err(Error::Config(format!("ema_alpha must be in [0, 1], got {}", self.ema_alpha)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// EMA of per-layer LoRA gradient norms, starting at 1.0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceState {
    pub scores: Vec<f64>,
}

impl ImportanceState {
    pub fn new(n_layers: usize) -> Self {
        Self {
            scores: vec![1.0; n_layers],
        }
    }

    /// Sampling probabilities `softmax(scores / temperature)`.
    pub fn probabilities(&self, temperature: f64) -> Vec<f64> {
        let max = self.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = self.scores.iter().map(|s| ((s - max) / temperature).exp()).collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|x| x / total).collect()
    }
}

/// Which blocks are attached at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionPlan {
    pub modes: Vec<BlockMode>,
    pub step: usize,
    pub r_used: f64,
    pub k_used: usize,
}

impl SelectionPlan {
    pub fn all_attached(n: usize, step: usize) -> Self {
        Self {
            modes: vec![BlockMode::Attached; n],
            step,
            r_used: 1.0,
            k_used: n,
        }
    }

    fn from_attached(n: usize, step: usize, r_used: f64, attached: &[usize], rest: BlockMode) -> Self {
        let mut modes = vec![rest; n];
        for &i in attached {
            modes[i] = BlockMode::Attached;
        }
        Self {
            modes,
            step,
            r_used,
            k_used: attached.len(),
        }
    }

    pub fn attached(&self) -> Vec<usize> {
        self.modes
            .iter()
            .enumerate()
            .filter(|(_, m)| **m == BlockMode::Attached)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn is_attached(&self, layer: usize) -> bool {
        self.modes.get(layer) == Some(&BlockMode::Attached)
    }
}

/// `⌈n·r⌉`, clamped to `1..=n`. The small slack keeps products such as
/// `10 × 0.3 = 3.0000000000000004` from rounding up.
pub fn layers_for_ratio(n: usize, r: f64) -> usize {
    ((n as f64 * r - 1e-9).ceil() as usize).clamp(1, n)
}

/// Builds the plan for step `t` (1-based).
pub fn select_layers(
    strategy: &SelectionStrategy,
    importance: &ImportanceState,
    t: usize,
    warmup: usize,
    n: usize,
    r: f64,
    rng: Option<&mut RunRng>,
) -> Result<SelectionPlan> {
    if n == 0 {
        return Err(Error::Input("cannot select from zero layers".into()));
    }
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::Input(format!("selection ratio {r} outside (0, 1]")));
    }
    if t <= warmup || strategy.kind == StrategyKind::Full {
        return Ok(SelectionPlan::all_attached(n, t));
    }

    let k = layers_for_ratio(n, r);
    let missing = || Error::MissingRng(strategy.kind.name());
    let plan = match strategy.kind {
        StrategyKind::Full => unreachable!("handled above"),
        StrategyKind::Uniform => {
            let attached = sample_uniform(rng.ok_or_else(missing)?, n, k);
            SelectionPlan::from_attached(n, t, r, &attached, BlockMode::Detached)
        }
        StrategyKind::StochasticDepth => {
            let kept = sample_uniform(rng.ok_or_else(missing)?, n, k);
            SelectionPlan::from_attached(n, t, r, &kept, BlockMode::Dropped)
        }
        StrategyKind::RoundRobin => {
            let start = ((t - warmup - 1) * k) % n;
            let attached: Vec<usize> = (0..k).map(|j| (start + j) % n).collect();
            SelectionPlan::from_attached(n, t, r, &attached, BlockMode::Detached)
        }
        StrategyKind::Importance => {
            if importance.scores.len() != n {
                return Err(Error::Input(format!(
                    "{} importance scores for {n} layers",
                    importance.scores.len()
                )));
            }
            let probs = importance.probabilities(strategy.temperature);
            let attached = sample_weighted(rng.ok_or_else(missing)?, &probs, k);
            SelectionPlan::from_attached(n, t, r, &attached, BlockMode::Detached)
        }
        StrategyKind::Freeze => {
            let first = (n as f64 * strategy.freeze_fraction).floor() as usize;
            let attached: Vec<usize> = (first.min(n - 1)..n).collect();
            let r_used = attached.len() as f64 / n as f64;
            SelectionPlan::from_attached(n, t, r_used, &attached, BlockMode::Detached)
        }
    };
    Ok(plan)
}

fn sample_uniform(rng: &mut RunRng, n: usize, k: usize) -> Vec<usize> {
    let mut picked = rand::seq::index::sample(rng, n, k).into_vec();
    picked.sort_unstable();
    picked
}

/// `k` distinct indices, each draw proportional to the remaining weights.
fn sample_weighted(rng: &mut RunRng, weights: &[f64], k: usize) -> Vec<usize> {
    let mut remaining = weights.to_vec();
    let mut picked = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = remaining.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut choice = None;
        for (i, &w) in remaining.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            choice = Some(i);
            if u < w {
                break;
            }
            u -= w;
        }
        let i = choice.expect("k <= number of layers");
        remaining[i] = 0.0;
        picked.push(i);
    }
    picked.sort_unstable();
    picked
}

/// `scores[i] ← α·scores[i] + (1−α)·g_i` for attached layers only.
pub fn update_importance(
    state: &mut ImportanceState,
    plan: &SelectionPlan,
    lora_grad_norms: &[f64],
    alpha: f64,
) -> Result<()> {
    if lora_grad_norms.len() != state.scores.len() || plan.modes.len() != state.scores.len() {
        return Err(Error::Input(format!(
            "{} gradient norms / {} plan entries for {} layers",
            lora_grad_norms.len(),
            plan.modes.len(),
            state.scores.len()
        )));
    }
    for i in plan.attached() {
        let g = lora_grad_norms[i];
        if !(g >= 0.0) {
            return Err(Error::Input(format!("gradient norm of layer {i} is {g}")));
        }
        state.scores[i] = alpha * state.scores[i] + (1.0 - alpha) * g;
    }
    Ok(())
}
