//! Tape of recorded primitives and the reverse sweep over it.
//!
//! Every value produced during a forward pass lives on the [`Graph`]. A node
//! keeps its inputs only when gradient tracking is enabled and at least one
//! input requires a gradient; otherwise it is stored as a constant. The
//! backward sweep walks the tape once in reverse and skips every node that no
//! gradient reached, so subgraphs cut off by [`Graph::detach`] cost nothing.

use std::borrow::Cow;

use super::tensor::{Element, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        trans_a: bool,
        trans_b: bool,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    RmsNorm {
        x: usize,
        gain: usize,
        inv_rms: Vec<T>,
    },
    Softmax(usize),
    Silu(usize),
    Transpose(usize),
    Reshape(usize),
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(usize),
    Mean(usize),
    DetachResidual(usize),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Softmax(x)
            | Op::Silu(x)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::DetachResidual(x) => vec![*x],
            Op::Embedding { table, .. } => vec![*table],
            Op::RmsNorm { x, gain, .. } => vec![*x, *gain],
            Op::Slice { x, .. } => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<'a, T: Element> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], one per leaf that requires a
/// gradient. Leaves the loss does not depend on get an explicit zero tensor.
#[derive(Debug)]
pub struct Gradients<T: Element = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Reverse-mode tape. One graph per training step; it borrows frozen and
/// trainable tensors for `'a` instead of copying them.
pub struct Graph<'a, T: Element = f32> {
    nodes: Vec<Node<'a, T>>,
    grad_enabled: bool,
}

impl<T: Element> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Element> Graph<'a, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes that kept their inputs (i.e. take part in backward).
    pub fn tracked_nodes(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf) && n.requires_grad)
            .count()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Runs `f` with recording disabled: nodes created inside keep no inputs.
    pub fn no_grad<R>(&mut self, f: impl FnOnce(&mut Self) -> R) -> R {
        let prev = std::mem::replace(&mut self.grad_enabled, false);
        let out = f(self);
        self.grad_enabled = prev;
        out
    }

    /// Owned leaf.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Owned(value), requires_grad)
    }

    /// Borrowed trainable leaf. Honors [`Graph::no_grad`].
    pub fn param(&mut self, value: &'a Tensor<T>) -> Var {
        let rg = self.grad_enabled;
        self.push_leaf(Cow::Borrowed(value), rg)
    }

    /// Borrowed frozen leaf.
    pub fn constant(&mut self, value: &'a Tensor<T>) -> Var {
        self.push_leaf(Cow::Borrowed(value), false)
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let track = self.grad_enabled && op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: if track { op } else { Op::Leaf },
            requires_grad: track,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v`'s values with no recorded inputs: a gradient sink.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.leaf(value, false)
    }

    /// `h + detach(o - h)` evaluated exactly: the value is `o` bit for bit and
    /// the only gradient path is the identity into `h`.
    pub fn detach_residual(&mut self, h: Var, o: Var) -> Result<Var> {
        let (vh, vo) = (self.value(h), self.value(o));
        if vh.shape() != vo.shape() {
            return Err(shape_err(
                "detach_residual",
                format!("{:?} vs {:?}", vh.shape(), vo.shape()),
            ));
        }
        let value = vo.clone();
        Ok(self.record(value, Op::DetachResidual(h.0)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes its (stored) matrix.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (ar, ac) = va.dims2("matmul")?;
        let (br, bc) = vb.dims2("matmul")?;
        let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!(
                    "{:?}{} x {:?}{}: inner dims {k} != {k2}",
                    va.shape(),
                    if trans_a { "^T" } else { "" },
                    vb.shape(),
                    if trans_b { "^T" } else { "" }
                ),
            ));
        }
        let out = gemm(va.data(), (ar, ac), trans_a, vb.data(), (br, bc), trans_b);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.record(
            value,
            Op::MatMul {
                a: a.0,
                b: b.0,
                trans_a,
                trans_b,
            },
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.record(v, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        Ok(self.record(v, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.record(v, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let v = self.value(x).map(|e| e * factor);
        self.record(v, Op::Scale(x.0, factor))
    }

    /// Rows of `table` (`[vocab, dim]`) picked by `ids`, giving `[ids.len(), dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        let (vocab, dim) = vt.dims2("embedding_lookup")?;
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(shape_err(
                    "embedding_lookup",
                    format!("id {id} out of range for table {:?}", vt.shape()),
                ));
            }
            out.extend_from_slice(&vt.data()[id * dim..(id + 1) * dim]);
        }
        let value = Tensor::new(vec![ids.len(), dim], out)?;
        Ok(self.record(
            value,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Row-wise `x / sqrt(mean(x^2) + eps) * gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: T) -> Result<Var> {
        let (vx, vg) = (self.value(x), self.value(gain));
        let (rows, dim) = vx.dims2("rms_norm")?;
        if vg.shape() != [dim] {
            return Err(shape_err(
                "rms_norm",
                format!("gain {:?} does not match input {:?}", vg.shape(), vx.shape()),
            ));
        }
        let mut out = Vec::with_capacity(rows * dim);
        let mut inv_rms = Vec::with_capacity(rows);
        for row in vx.data().chunks_exact(dim) {
            let ms = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / dim as f64;
            let inv = T::from_f64(1.0 / (ms + eps.as_f64()).sqrt());
            inv_rms.push(inv);
            out.extend(row.iter().zip(vg.data()).map(|(&v, &g)| v * inv * g));
        }
        let value = Tensor::new(vec![rows, dim], out)?;
        Ok(self.record(
            value,
            Op::RmsNorm {
                x: x.0,
                gain: gain.0,
                inv_rms,
            },
        ))
    }

    /// Softmax over the last axis. With `causal`, entry `(i, j)` with `j > i`
    /// is masked to probability zero.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Result<Var> {
        let vx = self.value(x);
        let cols = match vx.shape() {
            [c] | [_, c] => *c,
            s => return Err(shape_err("softmax", format!("expected rank 1 or 2, got {s:?}"))),
        };
        let mut out = vec![T::zero(); vx.numel()];
        for (i, (row, dst)) in vx.data().chunks_exact(cols).zip(out.chunks_exact_mut(cols)).enumerate() {
            let live = if causal { (i + 1).min(cols) } else { cols };
            softmax_row(&row[..live], &mut dst[..live]);
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.record(value, Op::Softmax(x.0)))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e * sigmoid(e));
        self.record(v, Op::Silu(x.0))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (r, c) = vx.dims2("transpose")?;
        let src = vx.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.record(value, Op::Transpose(x.0)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        if shape.iter().product::<usize>() != vx.numel() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", vx.shape())));
        }
        let value = vx.clone().reshaped(shape.to_vec());
        Ok(self.record(value, Op::Reshape(x.0)))
    }

    /// `x[start..end]` along `axis` (0 = rows, 1 = columns) of a matrix.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let vx = self.value(x);
        let (r, c) = vx.dims2("slice")?;
        let extent = match axis {
            0 => r,
            1 => c,
            _ => return Err(shape_err("slice", format!("axis {axis} on a matrix"))),
        };
        if start >= end || end > extent {
            return Err(shape_err(
                "slice",
                format!("range {start}..{end} on axis {axis} of {:?}", vx.shape()),
            ));
        }
        let (value, shape) = if axis == 0 {
            (vx.data()[start * c..end * c].to_vec(), vec![end - start, c])
        } else {
            let w = end - start;
            let mut out = Vec::with_capacity(r * w);
            for row in vx.data().chunks_exact(c) {
                out.extend_from_slice(&row[start..end]);
            }
            (out, vec![r, w])
        };
        let value = Tensor::new(shape, value)?;
        Ok(self.record(value, Op::Slice { x: x.0, axis, start }))
    }

    /// Concatenates matrices along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs"))?;
        let (r0, c0) = self.value(*first).dims2("concat")?;
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat")?;
            let ok = match axis {
                0 => c == c0,
                1 => r == r0,
                _ => false,
            };
            if !ok {
                return Err(shape_err(
                    "concat",
                    format!("{:?} does not fit {:?} on axis {axis}", [r, c], [r0, c0]),
                ));
            }
            dims.push((r, c));
        }
        let value = if axis == 0 {
            let rows = dims.iter().map(|d| d.0).sum();
            let mut out = Vec::with_capacity(rows * c0);
            for &p in parts {
                out.extend_from_slice(self.value(p).data());
            }
            Tensor::new(vec![rows, c0], out)?
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut out = Vec::with_capacity(r0 * cols);
            for i in 0..r0 {
                for (&p, &(_, c)) in parts.iter().zip(&dims) {
                    out.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
                }
            }
            Tensor::new(vec![r0, cols], out)?
        };
        Ok(self.record(
            value,
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
                axis,
            },
        ))
    }

    /// Mean token cross-entropy of `logits` (`[tokens, classes]`) against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        let (rows, classes) = vl.dims2("cross_entropy_logits")?;
        if targets.len() != rows {
            return Err(shape_err(
                "cross_entropy_logits",
                format!("{} targets for logits {:?}", targets.len(), vl.shape()),
            ));
        }
        let mut probs = vec![T::zero(); rows * classes];
        let mut total = 0.0f64;
        for ((row, dst), &y) in vl.data().chunks_exact(classes).zip(probs.chunks_exact_mut(classes)).zip(targets) {
            if y >= classes {
                return Err(shape_err(
                    "cross_entropy_logits",
                    format!("target {y} out of range for {classes} classes"),
                ));
            }
            let lse = softmax_row(row, dst);
            total += lse - row[y].as_f64();
        }
        let value = Tensor::scalar(T::from_f64(total / rows as f64));
        Ok(self.record(
            value,
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v.as_f64()).sum::<f64>();
        self.record(Tensor::scalar(T::from_f64(s)), Op::Sum(x.0))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.data().iter().map(|v| v.as_f64()).sum::<f64>() / vx.numel() as f64;
        self.record(Tensor::scalar(T::from_f64(s)), Op::Mean(x.0))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        let l = lv.item()?;
        if !l.is_finite() {
            return Err(Error::NonFinite(l.as_f64()));
        }

        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, g, &mut grads);
        }

        let out = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if !(node.requires_grad && matches!(node.op, Op::Leaf)) {
                    return None;
                }
                let shape = node.value.shape().to_vec();
                Some(match g {
                    Some(g) => Tensor::new(shape, g).expect("gradient shape"),
                    None => Tensor::zeros(&shape),
                })
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn backward_node(&self, node: &Node<'a, T>, g: Vec<T>, grads: &mut [Option<Vec<T>>]) {
        let rg = |i: usize| self.nodes[i].requires_grad;
        let val = |i: usize| -> &Tensor<T> { &self.nodes[i].value };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            } => {
                let (va, vb) = (val(*a), val(*b));
                let da = va.dims2("matmul").expect("matrix");
                let db = vb.dims2("matmul").expect("matrix");
                let (m, n) = node.value.dims2("matmul").expect("matrix");
                if rg(*a) {
                    let ga = if !trans_a {
                        gemm(&g, (m, n), false, vb.data(), db, !trans_b)
                    } else {
                        gemm(vb.data(), db, *trans_b, &g, (m, n), true)
                    };
                    accumulate(&mut grads[*a], ga);
                }
                if rg(*b) {
                    let gb = if !trans_b {
                        gemm(va.data(), da, !trans_a, &g, (m, n), false)
                    } else {
                        gemm(&g, (m, n), true, va.data(), da, *trans_a)
                    };
                    accumulate(&mut grads[*b], gb);
                }
            }
            Op::Add(a, b) => {
                if rg(*a) && rg(*b) {
                    accumulate(&mut grads[*a], g.clone());
                    accumulate(&mut grads[*b], g);
                } else if rg(*a) {
                    accumulate(&mut grads[*a], g);
                } else if rg(*b) {
                    accumulate(&mut grads[*b], g);
                }
            }
            Op::Sub(a, b) => {
                if rg(*b) {
                    accumulate(&mut grads[*b], g.iter().map(|&x| -x).collect());
                }
                if rg(*a) {
                    accumulate(&mut grads[*a], g);
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let ga = g.iter().zip(val(*b).data()).map(|(&x, &y)| x * y).collect();
                    accumulate(&mut grads[*a], ga);
                }
                if rg(*b) {
                    let gb = g.iter().zip(val(*a).data()).map(|(&x, &y)| x * y).collect();
                    accumulate(&mut grads[*b], gb);
                }
            }
            Op::Scale(x, f) => {
                if rg(*x) {
                    accumulate(&mut grads[*x], g.iter().map(|&v| v * *f).collect());
                }
            }
            Op::Embedding { table, ids } => {
                if rg(*table) {
                    let vt = val(*table);
                    let dim = vt.shape()[1];
                    let mut gt = vec![T::zero(); vt.numel()];
                    for (row, &id) in g.chunks_exact(dim).zip(ids) {
                        for (dst, &v) in gt[id * dim..(id + 1) * dim].iter_mut().zip(row) {
                            *dst = *dst + v;
                        }
                    }
                    accumulate(&mut grads[*table], gt);
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (vx, vg) = (val(*x), val(*gain));
                let dim = vg.numel();
                if rg(*x) {
                    let mut gx = Vec::with_capacity(vx.numel());
                    for ((row, grow), &inv) in vx.data().chunks_exact(dim).zip(g.chunks_exact(dim)).zip(inv_rms) {
                        let dot = row
                            .iter()
                            .zip(grow)
                            .zip(vg.data())
                            .map(|((&xv, &gv), &w)| (gv * w * xv).as_f64())
                            .sum::<f64>();
                        let coef = T::from_f64(dot / dim as f64) * inv * inv * inv;
                        gx.extend(
                            row.iter()
                                .zip(grow)
                                .zip(vg.data())
                                .map(|((&xv, &gv), &w)| gv * w * inv - xv * coef),
                        );
                    }
                    accumulate(&mut grads[*x], gx);
                }
                if rg(*gain) {
                    let mut gg = vec![T::zero(); dim];
                    for ((row, grow), &inv) in vx.data().chunks_exact(dim).zip(g.chunks_exact(dim)).zip(inv_rms) {
                        for ((dst, &xv), &gv) in gg.iter_mut().zip(row).zip(grow) {
                            *dst = *dst + gv * xv * inv;
                        }
                    }
                    accumulate(&mut grads[*gain], gg);
                }
            }
            Op::Softmax(x) => {
                if rg(*x) {
                    let y = node.value.data();
                    let cols = *node.value.shape().last().expect("rank >= 1");
                    let mut gx = Vec::with_capacity(y.len());
                    for (yr, gr) in y.chunks_exact(cols).zip(g.chunks_exact(cols)) {
                        let dot = yr.iter().zip(gr).map(|(&a, &b)| (a * b).as_f64()).sum::<f64>();
                        let dot = T::from_f64(dot);
                        gx.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
                    }
                    accumulate(&mut grads[*x], gx);
                }
            }
            Op::Silu(x) => {
                if rg(*x) {
                    let gx = val(*x)
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&v, &gv)| {
                            let s = sigmoid(v);
                            gv * s * (T::one() + v * (T::one() - s))
                        })
                        .collect();
                    accumulate(&mut grads[*x], gx);
                }
            }
            Op::Transpose(x) => {
                if rg(*x) {
                    let (r, c) = val(*x).dims2("transpose").expect("matrix");
                    let mut gx = vec![T::zero(); r * c];
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] = g[j * r + i];
                        }
                    }
                    accumulate(&mut grads[*x], gx);
                }
            }
            Op::Reshape(x) => {
                if rg(*x) {
                    accumulate(&mut grads[*x], g);
                }
            }
            Op::Slice { x, axis, start } => {
                if rg(*x) {
                    let (r, c) = val(*x).dims2("slice").expect("matrix");
                    let mut gx = vec![T::zero(); r * c];
                    if *axis == 0 {
                        gx[start * c..start * c + g.len()].copy_from_slice(&g);
                    } else {
                        let w = g.len() / r;
                        for (i, grow) in g.chunks_exact(w).enumerate() {
                            gx[i * c + start..i * c + start + w].copy_from_slice(grow);
                        }
                    }
                    accumulate(&mut grads[*x], gx);
                }
            }
            Op::Concat { parts, axis } => {
                let (_, total_c) = node.value.dims2("concat").expect("matrix");
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = val(p).dims2("concat").expect("matrix");
                    if rg(p) {
                        let gp = if *axis == 0 {
                            g[offset * total_c..(offset + r) * total_c].to_vec()
                        } else {
                            let mut out = Vec::with_capacity(r * c);
                            for i in 0..r {
                                out.extend_from_slice(&g[i * total_c + offset..i * total_c + offset + c]);
                            }
                            out
                        };
                        accumulate(&mut grads[p], gp);
                    }
                    offset += if *axis == 0 { r } else { c };
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if rg(*logits) {
                    let classes = probs.len() / targets.len();
                    let scale = g[0] / T::from_f64(targets.len() as f64);
                    let mut gl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (i, &y) in targets.iter().enumerate() {
                        let e = &mut gl[i * classes + y];
                        *e = *e - scale;
                    }
                    accumulate(&mut grads[*logits], gl);
                }
            }
            Op::Sum(x) => {
                if rg(*x) {
                    accumulate(&mut grads[*x], vec![g[0]; val(*x).numel()]);
                }
            }
            Op::Mean(x) => {
                if rg(*x) {
                    let n = val(*x).numel();
                    accumulate(&mut grads[*x], vec![g[0] / T::from_f64(n as f64); n]);
                }
            }
            Op::DetachResidual(h) => {
                if rg(*h) {
                    accumulate(&mut grads[*h], g);
                }
            }
        }
    }
}

fn accumulate<T: Element>(slot: &mut Option<Vec<T>>, contrib: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contrib) {
                *a = *a + c;
            }
        }
        None => *slot = Some(contrib),
    }
}

fn sigmoid<T: Element>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Writes `softmax(row)` into `dst` and returns the row's log-sum-exp.
fn softmax_row<T: Element>(row: &[T], dst: &mut [T]) -> f64 {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut denom = 0.0f64;
    for (d, &v) in dst.iter_mut().zip(row) {
        let e = (v - max).exp();
        *d = e;
        denom += e.as_f64();
    }
    let inv = T::from_f64(1.0 / denom);
    for d in dst.iter_mut() {
        *d = *d * inv;
    }
    max.as_f64() + denom.ln()
}

/// `op(a) · op(b)` for row-major stored matrices, with a fixed reduction order.
fn gemm<T: Element>(
    a: &[T],
    (ar, ac): (usize, usize),
    trans_a: bool,
    b: &[T],
    (br, bc): (usize, usize),
    trans_b: bool,
) -> Vec<T> {
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let n = if trans_b { br } else { bc };
    let (rsa, csa) = if trans_a { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if trans_b { (1, bc as isize) } else { (bc as isize, 1) };
    let mut c = vec![T::zero(); m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: the strides above describe exactly the stored `ar x ac` and
    // `br x bc` buffers, and `c` holds `m x n` contiguous row-major values.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}
