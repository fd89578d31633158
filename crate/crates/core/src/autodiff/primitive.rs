//! Name-based dispatch onto the [`Graph`] primitives.

use std::fmt;
use std::str::FromStr;

use super::graph::{Graph, Var};
use super::tensor::Element;
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PrimitiveKind {
    MatMul,
    Add,
    Mul,
    Scale,
    EmbeddingLookup,
    RmsNorm,
    Softmax,
    Silu,
    Transpose,
    Reshape,
    Slice,
    Concat,
    CrossEntropyLogits,
    Sum,
    Mean,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 15] = [
        PrimitiveKind::MatMul,
        PrimitiveKind::Add,
        PrimitiveKind::Mul,
        PrimitiveKind::Scale,
        PrimitiveKind::EmbeddingLookup,
        PrimitiveKind::RmsNorm,
        PrimitiveKind::Softmax,
        PrimitiveKind::Silu,
        PrimitiveKind::Transpose,
        PrimitiveKind::Reshape,
        PrimitiveKind::Slice,
        PrimitiveKind::Concat,
        PrimitiveKind::CrossEntropyLogits,
        PrimitiveKind::Sum,
        PrimitiveKind::Mean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PrimitiveKind::MatMul => "matmul",
            PrimitiveKind::Add => "add",
            PrimitiveKind::Mul => "mul",
            PrimitiveKind::Scale => "scale",
            PrimitiveKind::EmbeddingLookup => "embedding_lookup",
            PrimitiveKind::RmsNorm => "rms_norm",
            PrimitiveKind::Softmax => "softmax",
            PrimitiveKind::Silu => "silu",
            PrimitiveKind::Transpose => "transpose",
            PrimitiveKind::Reshape => "reshape",
            PrimitiveKind::Slice => "slice",
            PrimitiveKind::Concat => "concat",
            PrimitiveKind::CrossEntropyLogits => "cross_entropy_logits",
            PrimitiveKind::Sum => "sum",
            PrimitiveKind::Mean => "mean",
        }
    }
}

impl fmt::Display for PrimitiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PrimitiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnsupportedPrimitive(s.to_string()))
    }
}

/// Attributes consumed by individual primitives; unused fields are ignored.
#[derive(Clone, Debug, Default)]
pub struct Attrs {
    pub trans_a: bool,
    pub trans_b: bool,
    /// `scale` factor.
    pub factor: Option<f64>,
    /// `rms_norm` epsilon (default 1e-6).
    pub eps: Option<f64>,
    /// `softmax` causal mask.
    pub causal: bool,
    /// `embedding_lookup` ids or `cross_entropy_logits` targets.
    pub indices: Vec<usize>,
    /// `reshape` target shape.
    pub shape: Vec<usize>,
    /// `slice` / `concat` axis.
    pub axis: usize,
    /// `slice` range.
    pub start: usize,
    pub end: usize,
}

impl<T: Element> Graph<'_, T> {
    /// Applies `kind` to `inputs`. Arity and attribute problems surface as
    /// dimension errors naming the primitive.
    pub fn apply(&mut self, kind: PrimitiveKind, inputs: &[Var], attrs: &Attrs) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(shape_err(
                    "apply",
                    format!("{kind} takes {n} input(s), got {}", inputs.len()),
                ))
            }
        };
        match kind {
            PrimitiveKind::MatMul => {
                arity(2)?;
                self.matmul_t(inputs[0], inputs[1], attrs.trans_a, attrs.trans_b)
            }
            PrimitiveKind::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            PrimitiveKind::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            PrimitiveKind::Scale => {
                arity(1)?;
                let f = attrs
                    .factor
                    .ok_or_else(|| shape_err("scale", "missing `factor` attribute"))?;
                Ok(self.scale(inputs[0], T::from_f64(f)))
            }
            PrimitiveKind::EmbeddingLookup => {
                arity(1)?;
                self.embedding(inputs[0], &attrs.indices)
            }
            PrimitiveKind::RmsNorm => {
                arity(2)?;
                self.rms_norm(inputs[0], inputs[1], T::from_f64(attrs.eps.unwrap_or(1e-6)))
            }
            PrimitiveKind::Softmax => {
                arity(1)?;
                self.softmax(inputs[0], attrs.causal)
            }
            PrimitiveKind::Silu => {
                arity(1)?;
                Ok(self.silu(inputs[0]))
            }
            PrimitiveKind::Transpose => {
                arity(1)?;
                self.transpose(inputs[0])
            }
            PrimitiveKind::Reshape => {
                arity(1)?;
                self.reshape(inputs[0], &attrs.shape)
            }
            PrimitiveKind::Slice => {
                arity(1)?;
                self.slice(inputs[0], attrs.axis, attrs.start, attrs.end)
            }
            PrimitiveKind::Concat => self.concat(inputs, attrs.axis),
            PrimitiveKind::CrossEntropyLogits => {
                arity(1)?;
                self.cross_entropy(inputs[0], &attrs.indices)
            }
            PrimitiveKind::Sum => {
                arity(1)?;
                Ok(self.sum(inputs[0]))
            }
            PrimitiveKind::Mean => {
                arity(1)?;
                Ok(self.mean(inputs[0]))
            }
        }
    }
}
