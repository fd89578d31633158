//! Decoder-only transformer with LoRA adapters on frozen (optionally 4-bit)
//! base projections.
//!
//! Blocks are pre-norm: `h1 = h + Attn(RMSNorm(h))`, `out = h1 + MLP(RMSNorm(h1))`
//! with causal multi-head attention and a SwiGLU MLP. The output head is tied
//! to the token embedding. Only LoRA factors are trainable.

mod config;
mod lora;
mod quant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use config::{LoraTarget, ModelConfig};
pub use lora::{LoraAdapter, LoraMatrix};
pub use quant::{dequantize, quantize_weights, QuantizedLinear, CODE_MAX, CODE_MIN};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

const BASE_STD: f32 = 0.02;
const BASE_STREAM: u64 = 0;
const LORA_STREAM: u64 = 1;

/// How a block takes part in a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockMode {
    /// Full gradient flow through the residual branch.
    Attached,
    /// Same forward values; the residual branch is cut from the tape, so the
    /// block's parameters get no gradient and `h` sees an identity Jacobian.
    Detached,
    /// Residual branch skipped entirely (`y = x`), as in stochastic depth.
    Dropped,
}

/// A trainable tensor: one LoRA factor of one projection in one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamRef {
    pub layer: usize,
    pub target: LoraTarget,
    pub matrix: LoraMatrix,
}

impl ParamRef {
    pub fn name(&self) -> String {
        let m = match self.matrix {
            LoraMatrix::A => "lora_a",
            LoraMatrix::B => "lora_b",
        };
        format!("layers.{}.{}.{m}", self.layer, self.target.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BaseWeight {
    Dense(Tensor),
    Quantized(QuantizedLinear),
}

impl BaseWeight {
    /// The weight as it enters the matmul.
    pub fn materialize(&self) -> Tensor {
        match self {
            BaseWeight::Dense(t) => t.clone(),
            BaseWeight::Quantized(q) => dequantize(q),
        }
    }
}

/// Frozen `[d_out, d_in]` projection with an optional adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub base: BaseWeight,
    pub lora: Option<LoraAdapter>,
}

impl Linear {
    fn forward<'a>(
        &'a self,
        g: &mut Graph<'a>,
        x: Var,
        site: (usize, LoraTarget),
        bindings: &mut Vec<(ParamRef, Var)>,
    ) -> Result<Var> {
        let w = match &self.base {
            BaseWeight::Dense(t) => g.constant(t),
            BaseWeight::Quantized(q) => g.leaf(dequantize(q), false),
        };
        let y = g.matmul_t(x, w, false, true)?;
        let Some(lora) = &self.lora else { return Ok(y) };
        let a = g.param(&lora.a);
        let b = g.param(&lora.b);
        if g.grad_enabled() {
            let (layer, target) = site;
            bindings.push((ParamRef { layer, target, matrix: LoraMatrix::A }, a));
            bindings.push((ParamRef { layer, target, matrix: LoraMatrix::B }, b));
        }
        let xa = g.matmul_t(x, a, false, true)?;
        let xab = g.matmul_t(xa, b, false, true)?;
        let delta = g.scale(xab, lora.scaling());
        g.add(y, delta)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub attn_norm: Tensor,
    pub mlp_norm: Tensor,
    /// Indexed in [`LoraTarget::ALL`] order.
    pub projections: [Linear; 7],
}

impl Block {
    pub fn projection(&self, t: LoraTarget) -> &Linear {
        &self.projections[t as usize]
    }

    pub fn projection_mut(&mut self, t: LoraTarget) -> &mut Linear {
        &mut self.projections[t as usize]
    }
}

/// Output of a forward pass: logits plus the graph leaves that carry each
/// trainable parameter (attached blocks only).
pub struct Forward {
    pub logits: Var,
    pub bindings: Vec<(ParamRef, Var)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<Block>,
    pub final_norm: Tensor,
}

fn gaussian(shape: &[usize], std: f32, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0f32, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("shape")
}

impl Model {
    /// Deterministic initialization. Base weights and adapters draw from
    /// separate streams, so adding or removing adapters leaves the base model
    /// unchanged.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut base_rng = ChaCha8Rng::seed_from_u64(seed);
        base_rng.set_stream(BASE_STREAM);
        let mut lora_rng = ChaCha8Rng::seed_from_u64(seed);
        lora_rng.set_stream(LORA_STREAM);

        let d = config.d_model;
        let tok_emb = gaussian(&[config.vocab_size, d], BASE_STD, &mut base_rng);
        let pos_emb = gaussian(&[config.seq_len, d], BASE_STD, &mut base_rng);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let projections = LoraTarget::ALL.map(|t| {
                let (d_in, d_out) = config.projection_dims(t);
                let w = gaussian(&[d_out, d_in], BASE_STD, &mut base_rng);
                let base = if config.quantize_base {
                    BaseWeight::Quantized(quantize_weights(&w, config.quant_group_size).expect("validated group size"))
                } else {
                    BaseWeight::Dense(w)
                };
                let lora = config
                    .has_lora(t)
                    .then(|| LoraAdapter::init(d_in, d_out, config.lora_rank, config.lora_alpha, &mut lora_rng));
                Linear { base, lora }
            });
            blocks.push(Block {
                attn_norm: Tensor::ones(&[d]),
                mlp_norm: Tensor::ones(&[d]),
                projections,
            });
        }
        Ok(Self {
            tok_emb,
            pos_emb,
            blocks,
            final_norm: Tensor::ones(&[d]),
            config,
        })
    }

    /// Assembles a model from loaded parts.
    pub fn from_parts(
        config: ModelConfig,
        tok_emb: Tensor,
        pos_emb: Tensor,
        blocks: Vec<Block>,
        final_norm: Tensor,
    ) -> Result<Self> {
        config.validate()?;
        if blocks.len() != config.n_layers {
            return Err(Error::Config(format!("{} blocks for {} layers", blocks.len(), config.n_layers)));
        }
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            blocks,
            final_norm,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    /// Trainable parameters in a fixed layer-major order.
    pub fn param_refs(&self) -> Vec<ParamRef> {
        let mut out = Vec::new();
        for (layer, block) in self.blocks.iter().enumerate() {
            for t in LoraTarget::ALL {
                if block.projection(t).lora.is_some() {
                    for matrix in [LoraMatrix::A, LoraMatrix::B] {
                        out.push(ParamRef { layer, target: t, matrix });
                    }
                }
            }
        }
        out
    }

    pub fn param(&self, p: &ParamRef) -> Option<&Tensor> {
        let lora = self.blocks.get(p.layer)?.projection(p.target).lora.as_ref()?;
        Some(lora.matrix(p.matrix))
    }

    pub fn param_mut(&mut self, p: &ParamRef) -> Option<&mut Tensor> {
        let lora = self.blocks.get_mut(p.layer)?.projection_mut(p.target).lora.as_mut()?;
        Some(lora.matrix_mut(p.matrix))
    }

    /// `(name, tensor)` for every trainable parameter, in [`Model::param_refs`] order.
    pub fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (layer, block) in self.blocks.iter_mut().enumerate() {
            for (t, proj) in LoraTarget::ALL.into_iter().zip(block.projections.iter_mut()) {
                if let Some(lora) = proj.lora.as_mut() {
                    out.push((ParamRef { layer, target: t, matrix: LoraMatrix::A }.name(), &mut lora.a));
                    out.push((ParamRef { layer, target: t, matrix: LoraMatrix::B }.name(), &mut lora.b));
                }
            }
        }
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.param_refs().iter().filter_map(|p| self.param(p)).map(Tensor::numel).sum()
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<Vec<usize>> {
        if tokens.is_empty() || tokens.len() > self.config.seq_len {
            return Err(Error::Input(format!(
                "sequence length {} outside 1..={}",
                tokens.len(),
                self.config.seq_len
            )));
        }
        tokens
            .iter()
            .map(|&t| {
                let t = t as usize;
                if t < self.config.vocab_size {
                    Ok(t)
                } else {
                    Err(Error::Input(format!("token id {t} >= vocab size {}", self.config.vocab_size)))
                }
            })
            .collect()
    }

    /// Token plus position embedding, `[tokens, d_model]`.
    pub fn embed<'a>(&'a self, g: &mut Graph<'a>, tokens: &[u32]) -> Result<Var> {
        let ids = self.check_tokens(tokens)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok = g.constant(&self.tok_emb);
        let pos = g.constant(&self.pos_emb);
        let te = g.embedding(tok, &ids)?;
        let pe = g.embedding(pos, &positions)?;
        g.add(te, pe)
    }

    fn block_body<'a>(
        &'a self,
        g: &mut Graph<'a>,
        h: Var,
        layer: usize,
        bindings: &mut Vec<(ParamRef, Var)>,
    ) -> Result<Var> {
        let block = &self.blocks[layer];
        let eps = self.config.norm_eps;
        let proj = |t: LoraTarget| (block.projection(t), (layer, t));

        let norm = g.constant(&block.attn_norm);
        let x = g.rms_norm(h, norm, eps)?;
        let (lq, sq) = proj(LoraTarget::Q);
        let (lk, sk) = proj(LoraTarget::K);
        let (lv, sv) = proj(LoraTarget::V);
        let q = lq.forward(g, x, sq, bindings)?;
        let k = lk.forward(g, x, sk, bindings)?;
        let v = lv.forward(g, x, sv, bindings)?;

        let hd = self.config.head_dim();
        let inv_sqrt = 1.0 / (hd as f32).sqrt();
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for head in 0..self.config.n_heads {
            let (s, e) = (head * hd, (head + 1) * hd);
            let qh = g.slice(q, 1, s, e)?;
            let kh = g.slice(k, 1, s, e)?;
            let vh = g.slice(v, 1, s, e)?;
            let scores = g.matmul_t(qh, kh, false, true)?;
            let scores = g.scale(scores, inv_sqrt);
            let probs = g.softmax(scores, true)?;
            heads.push(g.matmul(probs, vh)?);
        }
        let attn = g.concat(&heads, 1)?;
        let (lo, so) = proj(LoraTarget::O);
        let attn = lo.forward(g, attn, so, bindings)?;
        let h1 = g.add(h, attn)?;

        let norm = g.constant(&block.mlp_norm);
        let x2 = g.rms_norm(h1, norm, eps)?;
        let (lg, sg) = proj(LoraTarget::Gate);
        let (lu, su) = proj(LoraTarget::Up);
        let (ld, sd) = proj(LoraTarget::Down);
        let gate = lg.forward(g, x2, sg, bindings)?;
        let up = lu.forward(g, x2, su, bindings)?;
        let act = g.silu(gate);
        let act = g.mul(act, up)?;
        let down = ld.forward(g, act, sd, bindings)?;
        g.add(h1, down)
    }

    /// One residual block in the given mode. `h` is `[tokens, d_model]`.
    pub fn block_forward<'a>(
        &'a self,
        g: &mut Graph<'a>,
        h: Var,
        layer: usize,
        mode: BlockMode,
        bindings: &mut Vec<(ParamRef, Var)>,
    ) -> Result<Var> {
        if layer >= self.n_layers() {
            return Err(Error::Plan(format!("layer {layer} >= n_layers {}", self.n_layers())));
        }
        match mode {
            BlockMode::Attached => self.block_body(g, h, layer, bindings),
            BlockMode::Detached => {
                let o = g.no_grad(|g| self.block_body(g, h, layer, &mut Vec::new()))?;
                g.detach_residual(h, o)
            }
            BlockMode::Dropped => Ok(h),
        }
    }

    /// Final norm and tied head.
    pub fn head<'a>(&'a self, g: &mut Graph<'a>, h: Var) -> Result<Var> {
        let norm = g.constant(&self.final_norm);
        let x = g.rms_norm(h, norm, self.config.norm_eps)?;
        let emb = g.constant(&self.tok_emb);
        g.matmul_t(x, emb, false, true)
    }

    /// Logits `[tokens, vocab]` with each block run in `modes[i]`.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, tokens: &[u32], modes: &[BlockMode]) -> Result<Forward> {
        if modes.len() != self.n_layers() {
            return Err(Error::Plan(format!(
                "plan covers {} layers, model has {}",
                modes.len(),
                self.n_layers()
            )));
        }
        let mut bindings = Vec::new();
        let mut h = self.embed(g, tokens)?;
        for (layer, &mode) in modes.iter().enumerate() {
            h = self.block_forward(g, h, layer, mode, &mut bindings)?;
        }
        let logits = self.head(g, h)?;
        Ok(Forward { logits, bindings })
    }

    /// Mean next-token loss of one sequence with every block attached, no tape.
    pub fn loss_no_grad(&self, inputs: &[u32], targets: &[u32]) -> Result<f32> {
        let modes = vec![BlockMode::Attached; self.n_layers()];
        let targets: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
        let mut g = Graph::new();
        let loss = g.no_grad(|g| -> Result<Var> {
            let fwd = self.forward(g, inputs, &modes)?;
            g.cross_entropy(fwd.logits, &targets)
        })?;
        g.value(loss).item()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 32,
            seq_len: 8,
            lora_rank: 4,
            lora_alpha: 8.0,
            quant_group_size: 8,
            ..ModelConfig::default()
        }
    }

    fn tokens() -> Vec<u32> {
        vec![1, 5, 9, 3, 30, 7, 2]
    }

    fn logits(model: &Model, modes: &[BlockMode]) -> Tensor {
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &tokens(), modes).unwrap();
        g.value(fwd.logits).clone()
    }

    fn randomize_b(model: &mut Model, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in model.param_refs() {
            if p.matrix == LoraMatrix::B {
                for v in model.param_mut(&p).unwrap().data_mut() {
                    *v = rng.random_range(-0.5..0.5);
                }
            }
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = Model::init(small(), 7).unwrap();
        let b = Model::init(small(), 7).unwrap();
        assert_eq!(a, b);
        let c = Model::init(small(), 8).unwrap();
        assert_ne!(a.tok_emb, c.tok_emb);
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = ModelConfig {
            d_model: 6,
            n_heads: 4,
            ..small()
        };
        let err = Model::init(cfg, 0).unwrap_err();
        assert!(err.to_string().contains("n_heads"), "{err}");
    }

    #[test]
    fn rank_bounded_by_width() {
        let cfg = ModelConfig {
            lora_rank: 17,
            ..small()
        };
        assert!(matches!(Model::init(cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn fresh_adapters_do_not_change_logits() {
        let with = Model::init(small(), 3).unwrap();
        let without = Model::init(
            ModelConfig {
                lora_targets: vec![],
                ..small()
            },
            3,
        )
        .unwrap();
        let modes = vec![BlockMode::Attached; 3];
        assert_eq!(logits(&with, &modes), logits(&without, &modes));
    }

    #[test]
    fn logits_shape() {
        let model = Model::init(small(), 1).unwrap();
        let out = logits(&model, &[BlockMode::Attached, BlockMode::Detached, BlockMode::Dropped]);
        assert_eq!(out.shape(), &[tokens().len(), 32]);
    }

    #[test]
    fn detached_block_matches_attached_bitwise() {
        let mut model = Model::init(small(), 5).unwrap();
        randomize_b(&mut model, 9);
        let all = logits(&model, &[BlockMode::Attached; 3]);
        for modes in [
            [BlockMode::Detached, BlockMode::Attached, BlockMode::Attached],
            [BlockMode::Attached, BlockMode::Detached, BlockMode::Detached],
            [BlockMode::Detached; 3],
        ] {
            let out = logits(&model, &modes);
            assert!(out.data().iter().zip(all.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn dropped_block_is_identity() {
        let model = Model::init(small(), 2).unwrap();
        let mut g = Graph::new();
        let h = model.embed(&mut g, &tokens()).unwrap();
        let out = model
            .block_forward(&mut g, h, 1, BlockMode::Dropped, &mut Vec::new())
            .unwrap();
        assert_eq!(g.value(out), g.value(h));
    }

    #[test]
    fn all_dropped_is_head_of_embedding() {
        let model = Model::init(small(), 4).unwrap();
        let got = logits(&model, &[BlockMode::Dropped; 3]);
        let mut g = Graph::new();
        let h = model.embed(&mut g, &tokens()).unwrap();
        let want = model.head(&mut g, h).unwrap();
        assert_eq!(&got, g.value(want));
    }

    #[test]
    fn detached_block_gradients() {
        let mut model = Model::init(small(), 6).unwrap();
        randomize_b(&mut model, 1);
        let mut g = Graph::new();
        let emb = model.embed(&mut g, &tokens()).unwrap();
        let h = g.leaf(g.value(emb).clone(), true);
        let mut bindings = Vec::new();
        let out = model
            .block_forward(&mut g, h, 0, BlockMode::Detached, &mut bindings)
            .unwrap();
        assert!(bindings.is_empty());
        let loss = g.sum(out);
        let grads = g.backward(loss).unwrap();
        let gh = grads.get(h).unwrap();
        assert!(gh.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn plan_length_checked() {
        let model = Model::init(small(), 0).unwrap();
        let mut g = Graph::new();
        let err = model.forward(&mut g, &tokens(), &[BlockMode::Attached; 2]);
        assert!(matches!(err, Err(Error::Plan(_))));
    }

    #[test]
    fn token_range_checked() {
        let model = Model::init(small(), 0).unwrap();
        let mut g = Graph::new();
        assert!(model.forward(&mut g, &[40], &[BlockMode::Attached; 3]).is_err());
    }

    #[test]
    fn quantized_model_uses_dequantized_weights() {
        let cfg = ModelConfig {
            quantize_base: true,
            ..small()
        };
        let q = Model::init(cfg, 11).unwrap();
        let dense = Model::init(small(), 11).unwrap();
        for (bq, bd) in q.blocks.iter().zip(&dense.blocks) {
            for (pq, pd) in bq.projections.iter().zip(&bd.projections) {
                let BaseWeight::Quantized(qw) = &pq.base else { panic!("expected quantized base") };
                let BaseWeight::Dense(w) = &pd.base else { panic!("expected dense base") };
                let back = dequantize(qw);
                let bound = qw.max_scale() / 2.0 * (1.0 + 1e-5);
                assert!(back.data().iter().zip(w.data()).all(|(a, b)| (a - b).abs() <= bound));
            }
        }
        let out = logits(&q, &[BlockMode::Attached; 3]);
        assert!(out.is_finite());
    }
}
