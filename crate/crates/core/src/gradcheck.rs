//! Finite-difference gradient checks.
//!
//! Analytic gradients come from an f32 tape. The oracle is a central
//! difference evaluated in f64: for single primitives through an f64 tape,
//! for the model through [`ReferenceModel`], a plain-loop f64 transformer
//! that shares no code with the graph.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{finite_difference_grad, max_relative_error, Attrs, Element, Graph, PrimitiveKind, Tensor, Var};
use crate::error::Result;
use crate::model::{BlockMode, LoraMatrix, LoraTarget, Model, ModelConfig, ParamRef};

/// Central-difference step of the f64 oracle.
pub const FD_EPS: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub seeds: usize,
    /// Worst `max|analytic - fd| / max|fd|` over seeds and inputs.
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// A randomized instance of one primitive: float inputs plus attributes.
struct Case {
    inputs: Vec<Tensor<f64>>,
    attrs: Attrs,
}

fn uniform(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    // Drawn in f32 so the f32 and f64 tapes see identical inputs.
    let data = (0..n).map(|_| rng.random_range(-1.0f32..1.0) as f64).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn make_case(kind: PrimitiveKind, rng: &mut impl Rng) -> Case {
    let mut dim = || rng.random_range(1..=8usize);
    let (r, c) = (dim(), dim());
    let mut attrs = Attrs::default();
    let inputs = match kind {
        PrimitiveKind::MatMul => {
            let k = rng.random_range(1..=8);
            attrs.trans_a = rng.random();
            attrs.trans_b = rng.random();
            let a = if attrs.trans_a { [k, r] } else { [r, k] };
            let b = if attrs.trans_b { [c, k] } else { [k, c] };
            vec![uniform(&a, rng), uniform(&b, rng)]
        }
        PrimitiveKind::Add | PrimitiveKind::Mul => vec![uniform(&[r, c], rng), uniform(&[r, c], rng)],
        PrimitiveKind::Scale => {
            attrs.factor = Some(rng.random_range(-2.0f32..2.0) as f64);
            vec![uniform(&[r, c], rng)]
        }
        PrimitiveKind::EmbeddingLookup => {
            let n = rng.random_range(1..=8);
            attrs.indices = (0..n).map(|_| rng.random_range(0..r)).collect();
            vec![uniform(&[r, c], rng)]
        }
        PrimitiveKind::RmsNorm => {
            // A single column normalizes to sign(x), whose gradient is ~0.
            let c = c.max(2);
            attrs.eps = Some(1e-6);
            vec![uniform(&[r, c], rng), uniform(&[c], rng)]
        }
        PrimitiveKind::Softmax => {
            attrs.causal = rng.random();
            let c = if attrs.causal { r } else { c };
            vec![uniform(&[r, c], rng)]
        }
        PrimitiveKind::Silu | PrimitiveKind::Transpose | PrimitiveKind::Sum | PrimitiveKind::Mean => {
            vec![uniform(&[r, c], rng)]
        }
        PrimitiveKind::Reshape => {
            attrs.shape = if rng.random() { vec![c, r] } else { vec![r * c] };
            vec![uniform(&[r, c], rng)]
        }
        PrimitiveKind::Slice => {
            attrs.axis = rng.random_range(0..2);
            let len = if attrs.axis == 0 { r } else { c };
            attrs.start = rng.random_range(0..len);
            attrs.end = rng.random_range(attrs.start + 1..=len);
            vec![uniform(&[r, c], rng)]
        }
        PrimitiveKind::Concat => {
            attrs.axis = rng.random_range(0..2);
            let parts = rng.random_range(2..=3);
            (0..parts)
                .map(|_| {
                    let n = rng.random_range(1..=4);
                    let shape = if attrs.axis == 0 { [n, c] } else { [r, n] };
                    uniform(&shape, rng)
                })
                .collect()
        }
        PrimitiveKind::CrossEntropyLogits => {
            attrs.indices = (0..r).map(|_| rng.random_range(0..c)).collect();
            vec![uniform(&[r, c], rng)]
        }
    };
    Case { inputs, attrs }
}

/// `sum(weights * kind(inputs))`, so every output element carries a distinct
/// random weight into the scalar.
fn weighted_output<T: Element>(
    g: &mut Graph<'_, T>,
    kind: PrimitiveKind,
    vars: &[Var],
    attrs: &Attrs,
    weights: &Tensor<f64>,
) -> Result<Var> {
    let out = g.apply(kind, vars, attrs)?;
    let w = g.leaf(weights.cast(), false);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn primitive_error(kind: PrimitiveKind, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let case = make_case(kind, &mut rng);

    let mut probe = Graph::<f64>::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| probe.leaf(t.clone(), false)).collect();
    let out = probe.apply(kind, &vars, &case.attrs)?;
    let out_shape = probe.value(out).shape().to_vec();
    let weights = uniform(&out_shape, &mut rng);

    let mut g = Graph::<f32>::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.leaf(t.cast(), true)).collect();
    let loss = weighted_output(&mut g, kind, &vars, &case.attrs, &weights)?;
    let grads = g.backward(loss)?;

    let mut worst = 0.0f64;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v).expect("leaf requires grad");
        let fd = finite_difference_grad(
            |theta: &Tensor<f64>| {
                let mut g = Graph::<f64>::new();
                let vars: Vec<Var> = case
                    .inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| g.leaf(if i == j { theta.clone() } else { t.clone() }, false))
                    .collect();
                let loss = weighted_output(&mut g, kind, &vars, &case.attrs, &weights).expect("valid case");
                g.value(loss).data()[0]
            },
            &case.inputs[i],
            FD_EPS,
        );
        worst = worst.max(max_relative_error(analytic, &fd));
    }
    Ok(worst)
}

/// Every primitive over seeds `0..seeds`.
pub fn primitive_suite(seeds: usize) -> Result<Vec<CheckOutcome>> {
    PrimitiveKind::ALL
        .into_iter()
        .map(|kind| {
            let mut worst = 0.0f64;
            for seed in 0..seeds as u64 {
                worst = worst.max(primitive_error(kind, seed)?);
            }
            Ok(CheckOutcome {
                name: kind.name().to_string(),
                seeds,
                max_rel_error: worst,
                tolerance: TOLERANCE,
            })
        })
        .collect()
}

/// Two layers, width 16.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 32,
        seq_len: 8,
        lora_rank: 4,
        lora_alpha: 8.0,
        ..ModelConfig::default()
    }
}

/// Micro model with random nonzero B factors so every adapter has a gradient.
pub fn micro_model(seed: u64) -> Result<Model> {
    let mut model = Model::init(micro_config(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in model.param_refs() {
        if p.matrix == LoraMatrix::B {
            for v in model.param_mut(&p).expect("listed").data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }
    Ok(model)
}

struct RefLayer {
    attn_norm: Vec<f64>,
    mlp_norm: Vec<f64>,
    /// `[d_out * d_in]` per target, [`LoraTarget::ALL`] order.
    base: Vec<Vec<f64>>,
}

/// Plain f64 re-implementation of the model forward with adapters held by
/// value, so individual entries can be perturbed.
#[derive(Clone)]
pub struct ReferenceModel {
    config: ModelConfig,
    tok_emb: Vec<f64>,
    pos_emb: Vec<f64>,
    final_norm: Vec<f64>,
    layers: std::rc::Rc<Vec<RefLayer>>,
    pub lora: BTreeMap<ParamRef, Tensor<f64>>,
}

fn widen(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

impl ReferenceModel {
    pub fn new(model: &Model) -> Self {
        let layers = model
            .blocks
            .iter()
            .map(|b| RefLayer {
                attn_norm: widen(&b.attn_norm),
                mlp_norm: widen(&b.mlp_norm),
                base: b.projections.iter().map(|p| widen(&p.base.materialize())).collect(),
            })
            .collect();
        let lora = model
            .param_refs()
            .into_iter()
            .map(|p| (p, model.param(&p).expect("listed").cast()))
            .collect();
        Self {
            config: model.config().clone(),
            tok_emb: widen(&model.tok_emb),
            pos_emb: widen(&model.pos_emb),
            final_norm: widen(&model.final_norm),
            layers: std::rc::Rc::new(layers),
            lora,
        }
    }

    fn rms_norm(&self, x: &[f64], gain: &[f64]) -> Vec<f64> {
        let d = gain.len();
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(d) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + self.config.norm_eps as f64).sqrt();
            out.extend(row.iter().zip(gain).map(|(v, g)| v * inv * g));
        }
        out
    }

    /// `x [rows, d_in]` times `w^T` for row-major `w [d_out, d_in]`.
    fn times_t(x: &[f64], d_in: usize, w: &[f64], d_out: usize) -> Vec<f64> {
        let mut out = vec![0.0; x.len() / d_in * d_out];
        for (xr, or) in x.chunks(d_in).zip(out.chunks_mut(d_out)) {
            for (o, wr) in or.iter_mut().zip(w.chunks(d_in)) {
                *o = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            }
        }
        out
    }

    fn project(&self, layer: usize, t: LoraTarget, x: &[f64]) -> Vec<f64> {
        let (d_in, d_out) = self.config.projection_dims(t);
        let mut y = Self::times_t(x, d_in, &self.layers[layer].base[t as usize], d_out);
        let a = self.lora.get(&ParamRef { layer, target: t, matrix: LoraMatrix::A });
        let b = self.lora.get(&ParamRef { layer, target: t, matrix: LoraMatrix::B });
        if let (Some(a), Some(b)) = (a, b) {
            let r = self.config.lora_rank;
            let s = self.config.lora_alpha as f64 / r as f64;
            let xa = Self::times_t(x, d_in, a.data(), r);
            let xab = Self::times_t(&xa, r, b.data(), d_out);
            for (yv, d) in y.iter_mut().zip(xab) {
                *yv += s * d;
            }
        }
        y
    }

    fn attention(&self, q: &[f64], k: &[f64], v: &[f64], rows: usize) -> Vec<f64> {
        let d = self.config.d_model;
        let hd = self.config.head_dim();
        let inv_sqrt = 1.0 / (hd as f64).sqrt();
        let mut out = vec![0.0; rows * d];
        for head in 0..self.config.n_heads {
            let off = head * hd;
            for i in 0..rows {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| (0..hd).map(|e| q[i * d + off + e] * k[j * d + off + e]).sum::<f64>() * inv_sqrt)
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for (j, e) in exps.iter().enumerate() {
                    for c in 0..hd {
                        out[i * d + off + c] += e / z * v[j * d + off + c];
                    }
                }
            }
        }
        out
    }

    /// Mean next-token cross-entropy with every block attached.
    pub fn loss(&self, inputs: &[u32], targets: &[u32]) -> f64 {
        let d = self.config.d_model;
        let rows = inputs.len();
        let mut h: Vec<f64> = Vec::with_capacity(rows * d);
        for (pos, &tok) in inputs.iter().enumerate() {
            let te = &self.tok_emb[tok as usize * d..][..d];
            let pe = &self.pos_emb[pos * d..][..d];
            h.extend(te.iter().zip(pe).map(|(a, b)| a + b));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let x = self.rms_norm(&h, &layer.attn_norm);
            let q = self.project(l, LoraTarget::Q, &x);
            let k = self.project(l, LoraTarget::K, &x);
            let v = self.project(l, LoraTarget::V, &x);
            let attn = self.attention(&q, &k, &v, rows);
            let o = self.project(l, LoraTarget::O, &attn);
            let h1: Vec<f64> = h.iter().zip(&o).map(|(a, b)| a + b).collect();
            let x2 = self.rms_norm(&h1, &layer.mlp_norm);
            let gate = self.project(l, LoraTarget::Gate, &x2);
            let up = self.project(l, LoraTarget::Up, &x2);
            let act: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect();
            let down = self.project(l, LoraTarget::Down, &act);
            h = h1.iter().zip(&down).map(|(a, b)| a + b).collect();
        }
        let x = self.rms_norm(&h, &self.final_norm);
        let vocab = self.config.vocab_size;
        let logits = Self::times_t(&x, d, &self.tok_emb, vocab);
        let mut total = 0.0;
        for (row, &y) in logits.chunks(vocab).zip(targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y as usize];
        }
        total / rows as f64
    }
}

/// Worst relative error over the adapters of one micro model.
pub fn model_error(seed: u64) -> Result<f64> {
    let model = micro_model(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
    let cfg = model.config();
    let vocab = cfg.vocab_size as u32;
    let inputs: Vec<u32> = (0..cfg.seq_len).map(|_| rng.random_range(0..vocab)).collect();
    let targets: Vec<u32> = (0..cfg.seq_len).map(|_| rng.random_range(0..vocab)).collect();

    let mut g = Graph::new();
    let fwd = model.forward(&mut g, &inputs, &vec![BlockMode::Attached; model.n_layers()])?;
    let t: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    let loss = g.cross_entropy(fwd.logits, &t)?;
    let grads = g.backward(loss)?;

    let reference = ReferenceModel::new(&model);
    let mut worst = 0.0f64;
    for (p, var) in fwd.bindings {
        let analytic = grads.get(var).expect("bound parameter");
        let mut probe = reference.clone();
        let theta = reference.lora[&p].clone();
        let fd = finite_difference_grad(
            |th: &Tensor<f64>| {
                probe.lora.insert(p, th.clone());
                probe.loss(&inputs, &targets)
            },
            &theta,
            FD_EPS,
        );
        worst = worst.max(max_relative_error(analytic, &fd));
    }
    Ok(worst)
}

pub fn model_suite(seeds: usize) -> Result<CheckOutcome> {
    let mut worst = 0.0f64;
    for seed in 0..seeds as u64 {
        worst = worst.max(model_error(seed)?);
    }
    Ok(CheckOutcome {
        name: "micro_model".into(),
        seeds,
        max_rel_error: worst,
        tolerance: TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_agrees_with_graph_forward() {
        let model = micro_model(4).unwrap();
        let inputs = [3, 1, 4, 1, 5, 9, 2, 6];
        let targets = [1, 4, 1, 5, 9, 2, 6, 5];
        let got = model.loss_no_grad(&inputs, &targets).unwrap() as f64;
        let want = ReferenceModel::new(&model).loss(&inputs, &targets);
        assert!((got - want).abs() < 1e-5, "{got} vs {want}");
    }

    #[test]
    fn every_primitive_passes_one_seed() {
        for kind in PrimitiveKind::ALL {
            let err = primitive_error(kind, 1).unwrap();
            assert!(err < TOLERANCE, "{kind}: {err}");
        }
    }
}
