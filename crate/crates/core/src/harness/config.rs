use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::{AdamWConfig, FillMode, ZeroOrderConfig};
use crate::selection::{RatioSchedule, SelectionStrategy, StrategyKind};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Lcsb,
    FullBackprop,
    StochasticDepth,
    Freeze,
    Mezo,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Lcsb => "lcsb",
            Method::FullBackprop => "full_backprop",
            Method::StochasticDepth => "stochastic_depth",
            Method::Freeze => "freeze",
            Method::Mezo => "mezo",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    #[default]
    None,
    CachedFill,
}

impl AblationMode {
    pub fn fill_mode(self) -> FillMode {
        match self {
            AblationMode::None => FillMode::ZeroFill,
            AblationMode::CachedFill => FillMode::CachedFill,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub method: Method,
    pub strategy: SelectionStrategy,
    pub schedule: RatioSchedule,
    pub optimizer: AdamWConfig,
    pub zero_order: ZeroOrderConfig,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub corpus_path: Option<PathBuf>,
    pub eval_fraction: f64,
    /// Steps between evaluations; step 0 and the final step are always evaluated.
    pub eval_interval: usize,
    /// Caps the number of eval windows (evenly spaced); `None` uses all.
    pub eval_max_windows: Option<usize>,
    /// Training loss above this (or non-finite) ends the run as diverged.
    pub divergence_threshold: f64,
    pub ablation_mode: AblationMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            method: Method::Lcsb,
            strategy: SelectionStrategy::default(),
            schedule: RatioSchedule::default(),
            optimizer: AdamWConfig::default(),
            zero_order: ZeroOrderConfig::default(),
            warmup_steps: 50,
            total_steps: 500,
            batch_size: 1,
            seed: 42,
            corpus_path: None,
            eval_fraction: 0.1,
            eval_interval: 50,
            eval_max_windows: None,
            divergence_threshold: 20.0,
            ablation_mode: AblationMode::None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.strategy.validate()?;
        self.schedule.validate()?;
        self.optimizer.validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.total_steps == 0 {
            return bad("total_steps must be positive".into());
        }
        if self.method != Method::Mezo && self.warmup_steps >= self.total_steps {
            return bad(format!(
                "warmup_steps ({}) must be below total_steps ({})",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return bad(format!("eval_fraction must be in (0, 1), got {}", self.eval_fraction));
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be positive".into());
        }
        if self.eval_max_windows == Some(0) {
            return bad("eval_max_windows must be positive".into());
        }
        if !(self.divergence_threshold > 0.0) {
            return bad("divergence_threshold must be positive".into());
        }
        if !(self.zero_order.perturbation_scale > 0.0) {
            return bad("zero_order.perturbation_scale must be positive".into());
        }
        Ok(())
    }

    /// The strategy a method actually runs with.
    pub fn effective_strategy(&self) -> SelectionStrategy {
        let kind = match self.method {
            Method::Lcsb => self.strategy.kind,
            Method::FullBackprop | Method::Mezo => StrategyKind::Full,
            Method::StochasticDepth => StrategyKind::StochasticDepth,
            Method::Freeze => StrategyKind::Freeze,
        };
        SelectionStrategy {
            kind,
            ..self.strategy.clone()
        }
    }
}
