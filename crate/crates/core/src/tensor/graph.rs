//! Define-by-run differentiation tape.
//!
//! A [`Graph`] owns an ordered list of nodes; every primitive appends one
//! node whose inputs all precede it, so reverse construction order is a
//! valid topological order for the backward sweep. Graphs are confined to
//! a single thread from forward through backward.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on one particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId {
    graph: u64,
    index: usize,
}

#[derive(Debug)]
enum Op<S: Scalar> {
    Leaf,
    Add,
    /// rhs shape is a suffix of lhs shape; rhs is tiled over the leading dims.
    AddSuffix,
    Mul,
    AddScalar(S),
    MulScalar(S),
    MatMul(MatMulDims),
    Transpose {
        axes: Vec<usize>,
    },
    Reshape,
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
    },
    /// Row gather from a `[vocab, dim]` table; ids are not differentiable.
    Embedding {
        ids: Vec<usize>,
    },
    Relu,
    Tanh,
    Sigmoid,
    /// Softmax over the last axis.
    Softmax,
    LayerNorm {
        mean: Vec<S>,
        inv_std: Vec<S>,
    },
    SumAll,
    MeanAll,
    SumAxis {
        axis: usize,
    },
    /// Fused log-softmax + negative log likelihood over the last axis.
    /// Output is one loss per row (zero on masked-out rows). The softmax
    /// probabilities are saved for the backward pass; no explicit `log`
    /// of a probability is ever taken.
    SoftmaxXent {
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<S>,
    },
    /// `-log(max(p[target], clamp))` per row of an explicit probability
    /// tensor. Below the clamp the output is constant, so the gradient
    /// there is zero.
    NllFromProbs {
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
}

#[derive(Debug, Clone, Copy)]
struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    /// rhs is 2-D and shared across the batch.
    rhs_shared: bool,
}

struct Node<S: Scalar> {
    op: Op<S>,
    inputs: Vec<usize>,
    value: Tensor<S>,
    needs_grad: bool,
}

/// Gradients keyed by the node they belong to.
pub struct Gradients<S: Scalar> {
    graph: u64,
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: VarId) -> Option<&Tensor<S>> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }
}

pub struct Graph<S: Scalar> {
    id: u64,
    nodes: Vec<Node<S>>,
    /// Smallest |x| seen at any relu input on this graph; used by the
    /// gradient checker to flag kink proximity.
    min_abs_relu_input: Option<S>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            min_abs_relu_input: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: VarId) -> &Tensor<S> {
        assert_eq!(v.graph, self.id, "var from another graph");
        &self.nodes[v.index].value
    }

    /// Smallest |x| that reached a relu input, if any relu ran.
    pub fn relu_kink_proximity(&self) -> Option<S> {
        self.min_abs_relu_input
    }

    fn check(&self, v: VarId, primitive: &'static str) -> Result<()> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::Graph(format!(
                "{primitive}: var does not belong to this graph"
            )));
        }
        Ok(())
    }

    fn push(&mut self, op: Op<S>, inputs: Vec<usize>, value: Tensor<S>, needs_grad: bool) -> VarId {
        let index = self.nodes.len();
        self.nodes.push(Node {
            op,
            inputs,
            value,
            needs_grad,
        });
        VarId {
            graph: self.id,
            index,
        }
    }

    fn inherits_grad(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].needs_grad)
    }

    // ── Leaves ──────────────────────────────────────────────────────

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> VarId {
        self.push(Op::Leaf, vec![], value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> VarId {
        self.leaf(value, false)
    }

    pub fn constant_scalar(&mut self, v: S) -> VarId {
        self.constant(Tensor::scalar(v))
    }

    // ── Elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check(a, "add")?;
        self.check(b, "add")?;
        let (ta, tb) = (&self.nodes[a.index].value, &self.nodes[b.index].value);
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                primitive: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.inherits_grad(&[a.index, b.index]);
        Ok(self.push(Op::Add, vec![a.index, b.index], value, needs))
    }

    /// `lhs + rhs` where `rhs.shape` is a suffix of `lhs.shape`; rhs is
    /// tiled over the leading dims (bias add, positional table add).
    pub fn add_suffix(&mut self, lhs: VarId, rhs: VarId) -> Result<VarId> {
        self.check(lhs, "add_suffix")?;
        self.check(rhs, "add_suffix")?;
        let (ta, tb) = (&self.nodes[lhs.index].value, &self.nodes[rhs.index].value);
        let (ls, rs) = (ta.shape(), tb.shape());
        if rs.len() > ls.len() || &ls[ls.len() - rs.len()..] != rs {
            return Err(Error::ShapeMismatch {
                primitive: "add_suffix",
                lhs: ls.to_vec(),
                rhs: rs.to_vec(),
            });
        }
        let chunk = tb.numel();
        let mut data = ta.data().to_vec();
        for block in data.chunks_mut(chunk) {
            for (x, &y) in block.iter_mut().zip(tb.data()) {
                *x += y;
            }
        }
        let value = Tensor::new(ls.to_vec(), data)?;
        let needs = self.inherits_grad(&[lhs.index, rhs.index]);
        Ok(self.push(Op::AddSuffix, vec![lhs.index, rhs.index], value, needs))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check(a, "mul")?;
        self.check(b, "mul")?;
        let (ta, tb) = (&self.nodes[a.index].value, &self.nodes[b.index].value);
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                primitive: "mul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.inherits_grad(&[a.index, b.index]);
        Ok(self.push(Op::Mul, vec![a.index, b.index], value, needs))
    }

    pub fn add_scalar(&mut self, a: VarId, c: S) -> Result<VarId> {
        self.check(a, "add_scalar")?;
        let ta = &self.nodes[a.index].value;
        let data = ta.data().iter().map(|&x| x + c).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.inherits_grad(&[a.index]);
        Ok(self.push(Op::AddScalar(c), vec![a.index], value, needs))
    }

    pub fn mul_scalar(&mut self, a: VarId, c: S) -> Result<VarId> {
        self.check(a, "mul_scalar")?;
        let ta = &self.nodes[a.index].value;
        let data = ta.data().iter().map(|&x| x * c).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.inherits_grad(&[a.index]);
        Ok(self.push(Op::MulScalar(c), vec![a.index], value, needs))
    }

    pub fn neg(&mut self, a: VarId) -> Result<VarId> {
        self.mul_scalar(a, -S::one())
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let nb = self.neg(b)?;
        self.add(a, nb)
    }

    // ── Matmul ──────────────────────────────────────────────────────

    /// `[m,k] @ [k,n]`, `[b,m,k] @ [k,n]` (shared rhs) or `[b,m,k] @ [b,k,n]`.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check(a, "matmul")?;
        self.check(b, "matmul")?;
        let (ta, tb) = (&self.nodes[a.index].value, &self.nodes[b.index].value);
        let (ls, rs) = (ta.shape(), tb.shape());
        let mismatch = || Error::ShapeMismatch {
            primitive: "matmul",
            lhs: ls.to_vec(),
            rhs: rs.to_vec(),
        };
        let dims = match (ls.len(), rs.len()) {
            (2, 2) if ls[1] == rs[0] => MatMulDims {
                batch: 1,
                m: ls[0],
                k: ls[1],
                n: rs[1],
                rhs_shared: true,
            },
            (3, 2) if ls[2] == rs[0] => MatMulDims {
                batch: ls[0],
                m: ls[1],
                k: ls[2],
                n: rs[1],
                rhs_shared: true,
            },
            (3, 3) if ls[0] == rs[0] && ls[2] == rs[1] => MatMulDims {
                batch: ls[0],
                m: ls[1],
                k: ls[2],
                n: rs[2],
                rhs_shared: false,
            },
            _ => return Err(mismatch()),
        };
        let mut out = vec![S::zero(); dims.batch * dims.m * dims.n];
        for bi in 0..dims.batch {
            let a_off = bi * dims.m * dims.k;
            let b_off = if dims.rhs_shared { 0 } else { bi * dims.k * dims.n };
            let o_off = bi * dims.m * dims.n;
            matmul_kernel(
                &ta.data()[a_off..a_off + dims.m * dims.k],
                &tb.data()[b_off..b_off + dims.k * dims.n],
                &mut out[o_off..o_off + dims.m * dims.n],
                dims.m,
                dims.k,
                dims.n,
            );
        }
        let out_shape = if ls.len() == 2 {
            vec![dims.m, dims.n]
        } else {
            vec![dims.batch, dims.m, dims.n]
        };
        let value = Tensor::new(out_shape, out)?;
        let needs = self.inherits_grad(&[a.index, b.index]);
        Ok(self.push(Op::MatMul(dims), vec![a.index, b.index], value, needs))
    }

    // ── Shape ops ───────────────────────────────────────────────────

    /// Permute axes; `axes` must be a permutation of `0..rank`.
    pub fn transpose(&mut self, a: VarId, axes: &[usize]) -> Result<VarId> {
        self.check(a, "transpose")?;
        let ta = &self.nodes[a.index].value;
        let shape = ta.shape().to_vec();
        if !is_permutation(axes, shape.len()) {
            return Err(Error::InvalidShape {
                primitive: "transpose",
                shape,
                reason: format!("axes {axes:?} is not a permutation"),
            });
        }
        let value = permute(ta, axes)?;
        let needs = self.inherits_grad(&[a.index]);
        Ok(self.push(
            Op::Transpose {
                axes: axes.to_vec(),
            },
            vec![a.index],
            value,
            needs,
        ))
    }

    pub fn reshape(&mut self, a: VarId, shape: &[usize]) -> Result<VarId> {
        self.check(a, "reshape")?;
        let ta = &self.nodes[a.index].value;
        let value = Tensor::new(shape.to_vec(), ta.data().to_vec())?;
        let needs = self.inherits_grad(&[a.index]);
        Ok(self.push(Op::Reshape, vec![a.index], value, needs))
    }

    pub fn concat(&mut self, axis: usize, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::Graph("concat: no inputs".into()));
        }
        for &p in parts {
            self.check(p, "concat")?;
        }
        let first = self.nodes[parts[0].index].value.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidShape {
                primitive: "concat",
                shape: first,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.nodes[p.index].value.shape();
            if s.len() != first.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Error::ShapeMismatch {
                    primitive: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            out_shape[axis] += s[axis];
        }
        // Copy in blocks: outer = product of dims before axis,
        // inner = product of dims after axis.
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total_axis = out_shape[axis];
        let mut data = vec![S::zero(); outer * total_axis * inner];
        let mut axis_off = 0;
        for &p in parts {
            let t = &self.nodes[p.index].value;
            let part_axis = t.shape()[axis];
            for o in 0..outer {
                let src = &t.data()[o * part_axis * inner..(o + 1) * part_axis * inner];
                let dst_start = (o * total_axis + axis_off) * inner;
                data[dst_start..dst_start + part_axis * inner].copy_from_slice(src);
            }
            axis_off += part_axis;
        }
        let value = Tensor::new(out_shape, data)?;
        let idxs: Vec<usize> = parts.iter().map(|p| p.index).collect();
        let needs = self.inherits_grad(&idxs);
        Ok(self.push(Op::Concat { axis }, idxs, value, needs))
    }

    pub fn slice(&mut self, a: VarId, axis: usize, start: usize, len: usize) -> Result<VarId> {
        self.check(a, "slice")?;
        let ta = &self.nodes[a.index].value;
        let shape = ta.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::InvalidShape {
                primitive: "slice",
                shape,
                reason: format!("axis {axis}, start {start}, len {len}"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&ta.data()[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        let needs = self.inherits_grad(&[a.index]);
        Ok(self.push(Op::Slice { axis, start }, vec![a.index], value, needs))
    }

    /// Gather rows of a `[vocab, dim]` table. Output shape is
    /// `id_shape ++ [dim]`.
    pub fn embedding(&mut self, table: VarId, ids: &[usize], id_shape: &[usize]) -> Result<VarId> {
        self.check(table, "embedding")?;
        let tt = &self.nodes[table.index].value;
        if tt.shape().len() != 2 {
            return Err(Error::InvalidShape {
                primitive: "embedding",
                shape: tt.shape().to_vec(),
                reason: "table must be rank 2".into(),
            });
        }
        let expected: usize = id_shape.iter().product();
        if expected != ids.len() {
            return Err(Error::InvalidShape {
                primitive: "embedding",
                shape: id_shape.to_vec(),
                reason: format!("{} ids for {} slots", ids.len(), expected),
            });
        }
        let (vocab, dim) = (tt.shape()[0], tt.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Graph(format!(
                "embedding: id {bad} out of range for vocab {vocab}"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            data.extend_from_slice(&tt.data()[id * dim..(id + 1) * dim]);
        }
        let mut out_shape = id_shape.to_vec();
        out_shape.push(dim);
        let value = Tensor::new(out_shape, data)?;
        let needs = self.inherits_grad(&[table.index]);
        Ok(self.push(
            Op::Embedding { ids: ids.to_vec() },
            vec![table.index],
            value,
            needs,
        ))
    }

    // ── Nonlinearities ──────────────────────────────────────────────

    pub fn relu(&mut self, a: VarId) -> Result<VarId> {
        self.check(a, "relu")?;
        let ta = &self.nodes[a.index].value;
        let mut min_abs = self.min_abs_relu_input.unwrap_or_else(S::infinity);
        let data = ta
            .data()
            .iter()
            .map(|&x| {
                min_abs = min_abs.min(x.abs());
                x.max(S::zero())
            })
            .collect();
        self.min_abs_relu_input = Some(min_abs);
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.inherits_grad(&[a.index]);
        Ok(self.push(Op::Relu, vec![a.index], value, needs))
    }

    pub fn tanh(&mut self, a: VarId) -> Result<VarId> {
        self.check(a, "tanh")?;
        let ta = &self.nodes[a.index].value;
        let data = ta.data().iter().map(|&x| x.tanh()).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.inherits_grad(&[a.index]);
        Ok(self.push(Op::Tanh, vec![a.index], value, needs))
    }

    pub fn sigmoid(&mut self, a: VarId) -> Result<VarId> {
        self.check(a, "sigmoid")?;
        let ta = &self.nodes[a.index].value;
        let data = ta.data().iter().map(|&x| sigmoid(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.inherits_grad(&[a.index]);
        Ok(self.push(Op::Sigmoid, vec![a.index], value, needs))
    }

    /// Softmax over the last axis, computed with a max shift.
    pub fn softmax(&mut self, a: VarId) -> Result<VarId> {
        self.check(a, "softmax")?;
        let ta = &self.nodes[a.index].value;
        if ta.shape().is_empty() {
            return Err(Error::InvalidShape {
                primitive: "softmax",
                shape: vec![],
                reason: "needs at least one axis".into(),
            });
        }
        let cols = *ta.shape().last().unwrap();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(cols) {
            softmax_row(row);
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.inherits_grad(&[a.index]);
        Ok(self.push(Op::Softmax, vec![a.index], value, needs))
    }

    /// Layer normalization over the last axis with learnable scale and
    /// shift (`gamma`, `beta` of shape `[last]`).
    pub fn layer_norm(&mut self, a: VarId, gamma: VarId, beta: VarId, eps: S) -> Result<VarId> {
        self.check(a, "layer_norm")?;
        self.check(gamma, "layer_norm")?;
        self.check(beta, "layer_norm")?;
        let ta = &self.nodes[a.index].value;
        let cols = *ta.shape().last().ok_or_else(|| Error::InvalidShape {
            primitive: "layer_norm",
            shape: vec![],
            reason: "needs at least one axis".into(),
        })?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let s = self.nodes[v.index].value.shape();
            if s != [cols] {
                return Err(Error::ShapeMismatch {
                    primitive: if name == "gamma" {
                        "layer_norm gamma"
                    } else {
                        "layer_norm beta"
                    },
                    lhs: ta.shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
        }
        let ta = &self.nodes[a.index].value;
        let tg = self.nodes[gamma.index].value.data().to_vec();
        let tb = self.nodes[beta.index].value.data().to_vec();
        let rows = ta.numel() / cols;
        let mut mean = Vec::with_capacity(rows);
        let mut inv_std = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(ta.numel());
        let denom = S::from_usize(cols);
        for row in ta.data().chunks(cols) {
            let mu = row.iter().copied().fold(S::zero(), |a, b| a + b) / denom;
            let var = row
                .iter()
                .map(|&x| (x - mu) * (x - mu))
                .fold(S::zero(), |a, b| a + b)
                / denom;
            let is = (var + eps).sqrt().recip();
            mean.push(mu);
            inv_std.push(is);
            for (j, &x) in row.iter().enumerate() {
                data.push((x - mu) * is * tg[j] + tb[j]);
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.inherits_grad(&[a.index, gamma.index, beta.index]);
        Ok(self.push(
            Op::LayerNorm { mean, inv_std },
            vec![a.index, gamma.index, beta.index],
            value,
            needs,
        ))
    }

    // ── Reductions ──────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: VarId) -> Result<VarId> {
        self.check(a, "sum")?;
        let ta = &self.nodes[a.index].value;
        let s = ta.data().iter().copied().fold(S::zero(), |x, y| x + y);
        let needs = self.inherits_grad(&[a.index]);
        Ok(self.push(Op::SumAll, vec![a.index], Tensor::scalar(s), needs))
    }

    pub fn mean_all(&mut self, a: VarId) -> Result<VarId> {
        self.check(a, "mean")?;
        let ta = &self.nodes[a.index].value;
        let n = S::from_usize(ta.numel());
        let s = ta.data().iter().copied().fold(S::zero(), |x, y| x + y) / n;
        let needs = self.inherits_grad(&[a.index]);
        Ok(self.push(Op::MeanAll, vec![a.index], Tensor::scalar(s), needs))
    }

    /// Sum along one axis, removing it from the shape.
    pub fn sum_axis(&mut self, a: VarId, axis: usize) -> Result<VarId> {
        self.check(a, "sum_axis")?;
        let ta = &self.nodes[a.index].value;
        let shape = ta.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidShape {
                primitive: "sum_axis",
                shape,
                reason: format!("axis {axis} out of range"),
            });
        }
        if shape.len() == 1 {
            return self.sum_all(a);
        }
        let outer: usize = shape[..axis].iter().product();
        let extent = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let base = (o * extent + e) * inner;
                for i in 0..inner {
                    data[o * inner + i] += ta.data()[base + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, data)?;
        let needs = self.inherits_grad(&[a.index]);
        Ok(self.push(Op::SumAxis { axis }, vec![a.index], value, needs))
    }

    // ── Losses ──────────────────────────────────────────────────────

    /// Fused log-softmax + NLL over the last axis of `[rows, vocab]`
    /// logits. Returns one loss per row; masked-out rows contribute 0.
    pub fn softmax_xent(
        &mut self,
        logits: VarId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<VarId> {
        self.check(logits, "softmax_xent")?;
        let ta = &self.nodes[logits.index].value;
        if ta.shape().len() != 2 {
            return Err(Error::InvalidShape {
                primitive: "softmax_xent",
                shape: ta.shape().to_vec(),
                reason: "logits must be rank 2".into(),
            });
        }
        let (rows, vocab) = (ta.shape()[0], ta.shape()[1]);
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::Graph(format!(
                "softmax_xent: {rows} rows but {} targets / {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Graph(format!(
                "softmax_xent: target {bad} out of range for vocab {vocab}"
            )));
        }
        let mut probs = vec![S::zero(); rows * vocab];
        let mut losses = vec![S::zero(); rows];
        for r in 0..rows {
            let row = &ta.data()[r * vocab..(r + 1) * vocab];
            let prow = &mut probs[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut denom = S::zero();
            for (p, &x) in prow.iter_mut().zip(row) {
                *p = (x - max).exp();
                denom += *p;
            }
            for p in prow.iter_mut() {
                *p = *p / denom;
            }
            if mask[r] {
                // log p_t = (x_t - max) - ln denom, no explicit log of p.
                losses[r] = denom.ln() - (row[targets[r]] - max);
            }
        }
        let value = Tensor::new(vec![rows], losses)?;
        let needs = self.inherits_grad(&[logits.index]);
        Ok(self.push(
            Op::SoftmaxXent {
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
            vec![logits.index],
            value,
            needs,
        ))
    }

    /// Per-row `-log(max(p[target], 1e-12))` on an explicit probability
    /// tensor of shape `[rows, vocab]`. Masked-out rows contribute 0.
    pub fn nll_from_probs(
        &mut self,
        probs: VarId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<VarId> {
        self.check(probs, "nll_from_probs")?;
        let ta = &self.nodes[probs.index].value;
        if ta.shape().len() != 2 {
            return Err(Error::InvalidShape {
                primitive: "nll_from_probs",
                shape: ta.shape().to_vec(),
                reason: "probabilities must be rank 2".into(),
            });
        }
        let (rows, vocab) = (ta.shape()[0], ta.shape()[1]);
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::Graph(format!(
                "nll_from_probs: {rows} rows but {} targets / {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Graph(format!(
                "nll_from_probs: target {bad} out of range for vocab {vocab}"
            )));
        }
        let clamp = S::from_f64(super::LOG_CLAMP);
        let mut losses = vec![S::zero(); rows];
        for r in 0..rows {
            if mask[r] {
                let p = ta.data()[r * vocab + targets[r]];
                losses[r] = -p.max(clamp).ln();
            }
        }
        let value = Tensor::new(vec![rows], losses)?;
        let needs = self.inherits_grad(&[probs.index]);
        Ok(self.push(
            Op::NllFromProbs {
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            vec![probs.index],
            value,
            needs,
        ))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Returns a gradient for every
    /// `requires_grad` leaf; leaves the root does not depend on get zero
    /// tensors. Deterministic: same graph, same gradients, bitwise.
    pub fn backward(&self, root: VarId) -> Result<Gradients<S>> {
        self.check(root, "backward")?;
        let root_node = &self.nodes[root.index];
        if !root_node.value.is_scalar() {
            return Err(Error::Graph(format!(
                "backward root must be a scalar, got shape {:?}",
                root_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if root_node.needs_grad {
            grads[root.index] = Some(Tensor::scalar(S::one()));
        }
        for i in (0..=root.index).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let upstream = grads[i].take().unwrap();
            for (input, contribution) in self.backward_op(i, &upstream) {
                if !self.nodes[input].needs_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_in_place(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[i] = Some(upstream);
        }
        // Unused requires_grad leaves get explicit zeros.
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients {
            graph: self.id,
            grads,
        })
    }

    fn backward_op(&self, i: usize, upstream: &Tensor<S>) -> Vec<(usize, Tensor<S>)> {
        let node = &self.nodes[i];
        let ins = &node.inputs;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add => vec![(ins[0], upstream.clone()), (ins[1], upstream.clone())],
            Op::AddSuffix => {
                let rhs_shape = self.nodes[ins[1]].value.shape().to_vec();
                let chunk: usize = rhs_shape.iter().product();
                let mut acc = vec![S::zero(); chunk];
                for block in upstream.data().chunks(chunk) {
                    for (a, &g) in acc.iter_mut().zip(block) {
                        *a += g;
                    }
                }
                vec![
                    (ins[0], upstream.clone()),
                    (ins[1], Tensor::new(rhs_shape, acc).unwrap()),
                ]
            }
            Op::Mul => {
                let (ta, tb) = (&self.nodes[ins[0]].value, &self.nodes[ins[1]].value);
                let da: Vec<S> = upstream
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(&g, &y)| g * y)
                    .collect();
                let db: Vec<S> = upstream
                    .data()
                    .iter()
                    .zip(ta.data())
                    .map(|(&g, &x)| g * x)
                    .collect();
                vec![
                    (ins[0], Tensor::new(ta.shape().to_vec(), da).unwrap()),
                    (ins[1], Tensor::new(tb.shape().to_vec(), db).unwrap()),
                ]
            }
            Op::AddScalar(_) => vec![(ins[0], upstream.clone())],
            Op::MulScalar(c) => {
                let data = upstream.data().iter().map(|&g| g * *c).collect();
                vec![(
                    ins[0],
                    Tensor::new(upstream.shape().to_vec(), data).unwrap(),
                )]
            }
            Op::MatMul(d) => {
                let (ta, tb) = (&self.nodes[ins[0]].value, &self.nodes[ins[1]].value);
                let mut da = vec![S::zero(); ta.numel()];
                let mut db = vec![S::zero(); tb.numel()];
                for bi in 0..d.batch {
                    let a_off = bi * d.m * d.k;
                    let b_off = if d.rhs_shared { 0 } else { bi * d.k * d.n };
                    let o_off = bi * d.m * d.n;
                    let g = &upstream.data()[o_off..o_off + d.m * d.n];
                    let a = &ta.data()[a_off..a_off + d.m * d.k];
                    let b = &tb.data()[b_off..b_off + d.k * d.n];
                    // dA = G @ B^T
                    matmul_kernel_nt(g, b, &mut da[a_off..a_off + d.m * d.k], d.m, d.n, d.k);
                    // dB += A^T @ G (accumulates when rhs is shared)
                    matmul_kernel_tn(a, g, &mut db[b_off..b_off + d.k * d.n], d.m, d.k, d.n);
                }
                vec![
                    (ins[0], Tensor::new(ta.shape().to_vec(), da).unwrap()),
                    (ins[1], Tensor::new(tb.shape().to_vec(), db).unwrap()),
                ]
            }
            Op::Transpose { axes } => {
                let inverse = invert_permutation(axes);
                vec![(ins[0], permute(upstream, &inverse).unwrap())]
            }
            Op::Reshape => {
                let in_shape = self.nodes[ins[0]].value.shape().to_vec();
                vec![(
                    ins[0],
                    Tensor::new(in_shape, upstream.data().to_vec()).unwrap(),
                )]
            }
            Op::Concat { axis } => {
                let axis = *axis;
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total_axis = out_shape[axis];
                let mut out = Vec::with_capacity(ins.len());
                let mut axis_off = 0;
                for &input in ins {
                    let shape = self.nodes[input].value.shape().to_vec();
                    let part_axis = shape[axis];
                    let mut data = Vec::with_capacity(outer * part_axis * inner);
                    for o in 0..outer {
                        let base = (o * total_axis + axis_off) * inner;
                        data.extend_from_slice(&upstream.data()[base..base + part_axis * inner]);
                    }
                    out.push((input, Tensor::new(shape, data).unwrap()));
                    axis_off += part_axis;
                }
                out
            }
            Op::Slice { axis, start } => {
                let in_shape = self.nodes[ins[0]].value.shape().to_vec();
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[*axis + 1..].iter().product();
                let len = node.value.shape()[*axis];
                let mut data = vec![S::zero(); self.nodes[ins[0]].value.numel()];
                for o in 0..outer {
                    let dst = (o * in_shape[*axis] + start) * inner;
                    let src = o * len * inner;
                    data[dst..dst + len * inner]
                        .copy_from_slice(&upstream.data()[src..src + len * inner]);
                }
                vec![(ins[0], Tensor::new(in_shape, data).unwrap())]
            }
            Op::Embedding { ids } => {
                let table = &self.nodes[ins[0]].value;
                let dim = table.shape()[1];
                let mut data = vec![S::zero(); table.numel()];
                for (row, &id) in ids.iter().enumerate() {
                    let g = &upstream.data()[row * dim..(row + 1) * dim];
                    let dst = &mut data[id * dim..(id + 1) * dim];
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                vec![(ins[0], Tensor::new(table.shape().to_vec(), data).unwrap())]
            }
            Op::Relu => {
                let input = &self.nodes[ins[0]].value;
                let data = upstream
                    .data()
                    .iter()
                    .zip(input.data())
                    .map(|(&g, &x)| if x > S::zero() { g } else { S::zero() })
                    .collect();
                vec![(ins[0], Tensor::new(input.shape().to_vec(), data).unwrap())]
            }
            Op::Tanh => {
                let out = &node.value;
                let data = upstream
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&g, &y)| g * (S::one() - y * y))
                    .collect();
                vec![(ins[0], Tensor::new(out.shape().to_vec(), data).unwrap())]
            }
            Op::Sigmoid => {
                let out = &node.value;
                let data = upstream
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&g, &y)| g * y * (S::one() - y))
                    .collect();
                vec![(ins[0], Tensor::new(out.shape().to_vec(), data).unwrap())]
            }
            Op::Softmax => {
                let out = &node.value;
                let cols = *out.shape().last().unwrap();
                let mut data = vec![S::zero(); out.numel()];
                for (r, (orow, grow)) in out
                    .data()
                    .chunks(cols)
                    .zip(upstream.data().chunks(cols))
                    .enumerate()
                {
                    let dot = orow
                        .iter()
                        .zip(grow)
                        .map(|(&y, &g)| y * g)
                        .fold(S::zero(), |a, b| a + b);
                    for j in 0..cols {
                        data[r * cols + j] = orow[j] * (grow[j] - dot);
                    }
                }
                vec![(ins[0], Tensor::new(out.shape().to_vec(), data).unwrap())]
            }
            Op::LayerNorm { mean, inv_std } => {
                let input = &self.nodes[ins[0]].value;
                let gamma = self.nodes[ins[1]].value.data();
                let cols = *input.shape().last().unwrap();
                let rows = input.numel() / cols;
                let denom = S::from_usize(cols);
                let mut dx = vec![S::zero(); input.numel()];
                let mut dgamma = vec![S::zero(); cols];
                let mut dbeta = vec![S::zero(); cols];
                for r in 0..rows {
                    let xrow = &input.data()[r * cols..(r + 1) * cols];
                    let grow = &upstream.data()[r * cols..(r + 1) * cols];
                    let (mu, is) = (mean[r], inv_std[r]);
                    let mut sum_dxhat = S::zero();
                    let mut sum_dxhat_xhat = S::zero();
                    for j in 0..cols {
                        let xhat = (xrow[j] - mu) * is;
                        let dxhat = grow[j] * gamma[j];
                        dgamma[j] += grow[j] * xhat;
                        dbeta[j] += grow[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    let m1 = sum_dxhat / denom;
                    let m2 = sum_dxhat_xhat / denom;
                    for j in 0..cols {
                        let xhat = (xrow[j] - mu) * is;
                        let dxhat = grow[j] * gamma[j];
                        dx[r * cols + j] = is * (dxhat - m1 - xhat * m2);
                    }
                }
                vec![
                    (ins[0], Tensor::new(input.shape().to_vec(), dx).unwrap()),
                    (ins[1], Tensor::new(vec![cols], dgamma).unwrap()),
                    (ins[2], Tensor::new(vec![cols], dbeta).unwrap()),
                ]
            }
            Op::SumAll => {
                let input = &self.nodes[ins[0]].value;
                let g = upstream.data()[0];
                vec![(ins[0], Tensor::full(input.shape(), g))]
            }
            Op::MeanAll => {
                let input = &self.nodes[ins[0]].value;
                let g = upstream.data()[0] / S::from_usize(input.numel());
                vec![(ins[0], Tensor::full(input.shape(), g))]
            }
            Op::SumAxis { axis } => {
                let in_shape = self.nodes[ins[0]].value.shape().to_vec();
                let outer: usize = in_shape[..*axis].iter().product();
                let extent = in_shape[*axis];
                let inner: usize = in_shape[*axis + 1..].iter().product();
                let mut data = vec![S::zero(); outer * extent * inner];
                for o in 0..outer {
                    for e in 0..extent {
                        let base = (o * extent + e) * inner;
                        for i in 0..inner {
                            data[base + i] = upstream.data()[o * inner + i];
                        }
                    }
                }
                vec![(ins[0], Tensor::new(in_shape, data).unwrap())]
            }
            Op::SoftmaxXent {
                targets,
                mask,
                probs,
            } => {
                let logits = &self.nodes[ins[0]].value;
                let vocab = logits.shape()[1];
                let rows = logits.shape()[0];
                let mut data = vec![S::zero(); logits.numel()];
                for r in 0..rows {
                    if !mask[r] {
                        continue;
                    }
                    let g = upstream.data()[r];
                    let prow = &probs[r * vocab..(r + 1) * vocab];
                    let drow = &mut data[r * vocab..(r + 1) * vocab];
                    for (d, &p) in drow.iter_mut().zip(prow) {
                        *d = g * p;
                    }
                    drow[targets[r]] -= g;
                }
                vec![(ins[0], Tensor::new(logits.shape().to_vec(), data).unwrap())]
            }
            Op::NllFromProbs { targets, mask } => {
                let input = &self.nodes[ins[0]].value;
                let vocab = input.shape()[1];
                let clamp = S::from_f64(super::LOG_CLAMP);
                let mut data = vec![S::zero(); input.numel()];
                for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                    if !m {
                        continue;
                    }
                    let p = input.data()[r * vocab + t];
                    if p > clamp {
                        data[r * vocab + t] = -upstream.data()[r] / p;
                    }
                }
                vec![(ins[0], Tensor::new(input.shape().to_vec(), data).unwrap())]
            }
        }
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn softmax_row<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut denom = S::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        denom += *x;
    }
    for x in row.iter_mut() {
        *x = *x / denom;
    }
}

/// C[m,n] = A[m,k] @ B[k,n]
fn matmul_kernel<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// C[m,k] += A[m,n] @ B[k,n]^T  (B transposed)
fn matmul_kernel_nt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = S::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            c[i * k + p] += s;
        }
    }
}

/// C[k,n] += A[m,k]^T @ B[m,n]  (A transposed)
fn matmul_kernel_tn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn is_permutation(axes: &[usize], rank: usize) -> bool {
    if axes.len() != rank {
        return false;
    }
    let mut seen = vec![false; rank];
    for &a in axes {
        if a >= rank || seen[a] {
            return false;
        }
        seen[a] = true;
    }
    true
}

fn invert_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

fn permute<S: Scalar>(t: &Tensor<S>, axes: &[usize]) -> Result<Tensor<S>> {
    let in_shape = t.shape();
    let rank = in_shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let in_strides = strides(in_shape);
    let out_strides = strides(&out_shape);
    let mut data = vec![S::zero(); t.numel()];
    for (flat_in, &v) in t.data().iter().enumerate() {
        let mut rem = flat_in;
        let mut flat_out = 0;
        for d in 0..rank {
            let coord = rem / in_strides[d];
            rem %= in_strides[d];
            // coordinate `coord` along input axis d appears at output
            // position axes.position(d)
            let out_axis = axes.iter().position(|&a| a == d).unwrap();
            flat_out += coord * out_strides[out_axis];
        }
        data[flat_out] = v;
    }
    Tensor::new(out_shape, data)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
