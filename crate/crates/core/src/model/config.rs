use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Projection sites that can carry a LoRA adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 7] = [
        LoraTarget::Q,
        LoraTarget::K,
        LoraTarget::V,
        LoraTarget::O,
        LoraTarget::Gate,
        LoraTarget::Up,
        LoraTarget::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LoraTarget::Q => "q",
            LoraTarget::K => "k",
            LoraTarget::V => "v",
            LoraTarget::O => "o",
            LoraTarget::Gate => "gate",
            LoraTarget::Up => "up",
            LoraTarget::Down => "down",
        }
    }
}

/// Architecture of the decoder-only transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub lora_rank: usize,
    pub lora_alpha: f32,
    pub lora_targets: Vec<LoraTarget>,
    pub quantize_base: bool,
    pub quant_group_size: usize,
    pub norm_eps: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 8,
            d_model: 128,
            n_heads: 4,
            d_ff: 256,
            vocab_size: 256,
            seq_len: 128,
            lora_rank: 16,
            lora_alpha: 32.0,
            lora_targets: LoraTarget::ALL.to_vec(),
            quantize_base: false,
            quant_group_size: 32,
            norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `(d_in, d_out)` of a projection.
    pub fn projection_dims(&self, target: LoraTarget) -> (usize, usize) {
        match target {
            LoraTarget::Q | LoraTarget::K | LoraTarget::V | LoraTarget::O => (self.d_model, self.d_model),
            LoraTarget::Gate | LoraTarget::Up => (self.d_model, self.d_ff),
            LoraTarget::Down => (self.d_ff, self.d_model),
        }
    }

    pub fn has_lora(&self, target: LoraTarget) -> bool {
        self.lora_targets.contains(&target)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("seq_len", self.seq_len),
            ("lora_rank", self.lora_rank),
            ("quant_group_size", self.quant_group_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.lora_rank > self.d_model {
            return Err(Error::Config(format!(
                "lora_rank ({}) must not exceed d_model ({})",
                self.lora_rank, self.d_model
            )));
        }
        if !(self.lora_alpha > 0.0 && self.lora_alpha.is_finite()) {
            return Err(Error::Config(format!("lora_alpha must be positive, got {}", self.lora_alpha)));
        }
        if !(self.norm_eps >= 0.0) {
            return Err(Error::Config("norm_eps must be non-negative".into()));
        }
        if self.quantize_base {
            for d in [self.d_model, self.d_ff] {
                if d % self.quant_group_size != 0 {
                    return Err(Error::Config(format!(
                        "quant_group_size ({}) must divide projection width {d}",
                        self.quant_group_size
                    )));
                }
            }
        }
        Ok(())
    }
}
