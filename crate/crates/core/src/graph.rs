//! Tape-style computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so insertion order is a valid
//! topological order and the backward sweep is a single reverse pass. Every
//! operation is evaluated eagerly when it is recorded; [`Graph::recompute`]
//! replays the tape after leaf values change (used by gradient checking).

use std::collections::BTreeMap;

use crate::kernels::{col2im_add, gemm, im2col, same_pad_left, MatRef};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) fn node_id(index: usize) -> NodeId {
    NodeId(index)
}

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "node#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output length equals input length; zero padding split left/right.
    Same,
    /// No padding; output length is `len - k + 1`.
    Valid,
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddBias(NodeId, NodeId),
    AddChannelBias(NodeId, NodeId),
    MulChannels(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Conv1d {
        input: NodeId,
        kernel: NodeId,
        padding: Padding,
    },
    Concat {
        a: NodeId,
        b: NodeId,
        axis: usize,
    },
    SumAxis {
        x: NodeId,
        axis: usize,
    },
    MeanAxis {
        x: NodeId,
        axis: usize,
    },
    Reshape {
        x: NodeId,
        shape: Vec<usize>,
    },
    NormalizeRows(NodeId),
    PairwiseDistance(NodeId, NodeId),
    PairSum(NodeId, NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
    },
    #[cfg(test)]
    BrokenSquare(NodeId),
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddBias(a, b)
            | AddChannelBias(a, b) | MulChannels(a, b) | PairwiseDistance(a, b)
            | PairSum(a, b) => vec![*a, *b],
            Transpose(x) | Scale(x, _) | Relu(x) | Sigmoid(x) | NormalizeRows(x) => vec![*x],
            Conv1d { input, kernel, .. } => vec![*input, *kernel],
            Concat { a, b, .. } => vec![*a, *b],
            SumAxis { x, .. } | MeanAxis { x, .. } | Reshape { x, .. } => vec![*x],
            SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            #[cfg(test)]
            BrokenSquare(x) => vec![*x],
        }
    }

    pub(crate) fn is_relu(&self) -> bool {
        matches!(self, Op::Relu(_))
    }
}

/// Gradients of a scalar loss with respect to every trainable parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn get_mut(&mut self, id: NodeId) -> Option<&mut Tensor> {
        self.grads.get_mut(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    ops: Vec<Op>,
    values: Vec<Tensor>,
    trainable: Vec<bool>,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn is_bare_scalar(t: &Tensor) -> bool {
    t.ndim() == 0
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Interprets a conv-style tensor as `(batch, channels, len)`.
fn ncl(t: &Tensor) -> Option<(usize, usize, usize)> {
    match *t.shape() {
        [c, l] => Some((1, c, l)),
        [n, c, l] => Some((n, c, l)),
        _ => None,
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Records a constant leaf.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, false)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor, trainable: bool) -> NodeId {
        self.ops.push(Op::Leaf);
        self.values.push(value);
        self.trainable.push(trainable);
        NodeId(self.ops.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn is_param(&self, id: NodeId) -> bool {
        self.trainable[id.0]
    }

    /// Trainable leaves in insertion order.
    pub fn params(&self) -> Vec<NodeId> {
        (0..self.ops.len())
            .filter(|&i| self.trainable[i])
            .map(NodeId)
            .collect()
    }

    /// Replaces the value of a leaf; the shape must not change.
    pub fn set_value(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        if !matches!(self.ops[id.0], Op::Leaf) {
            return Err(TensorError::Contract(format!("{id} is not a leaf")));
        }
        if value.shape() != self.values[id.0].shape() {
            return Err(dim_err("set_value", &self.values[id.0], &value));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub(crate) fn value_mut_unchecked(&mut self, id: NodeId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub(crate) fn op(&self, id: NodeId) -> &Op {
        &self.ops[id.0]
    }

    fn record(&mut self, op: Op) -> Result<NodeId> {
        let value = self.eval(&op)?;
        self.ops.push(op);
        self.values.push(value);
        self.trainable.push(false);
        Ok(NodeId(self.ops.len() - 1))
    }

    /// Re-evaluates every non-leaf node in insertion order.
    pub fn recompute(&mut self) -> Result<()> {
        for i in 0..self.ops.len() {
            if !matches!(self.ops[i], Op::Leaf) {
                self.values[i] = self.eval(&self.ops[i])?;
            }
        }
        Ok(())
    }

    /// Re-evaluates only the nodes downstream of `changed`.
    pub fn recompute_from(&mut self, changed: NodeId) -> Result<()> {
        let mut dirty = vec![false; self.ops.len()];
        dirty[changed.0] = true;
        for i in changed.0 + 1..self.ops.len() {
            if self.ops[i].inputs().iter().any(|p| dirty[p.0]) {
                dirty[i] = true;
                self.values[i] = self.eval(&self.ops[i])?;
            }
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Transpose(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Sub(a, b))
    }

    pub fn mul_elementwise(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        self.record(Op::Scale(x, factor))
    }

    /// Adds a `[n]` bias along the last axis of `x`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.record(Op::AddBias(x, bias))
    }

    /// Adds a `[c]` bias to each channel of a `[c × l]` or `[n × c × l]` tensor.
    pub fn add_channel_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.record(Op::AddChannelBias(x, bias))
    }

    /// Multiplies every channel of `x` (`[n × c × l]`) by the single-channel
    /// weights `w` (`[n × 1 × l]`).
    pub fn mul_channels(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        self.record(Op::MulChannels(x, w))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Sigmoid(x))
    }

    /// Cross-correlation of `[c_in × len]` (or batched `[n × c_in × len]`)
    /// input with `[c_out × c_in × k]` kernels.
    pub fn conv1d(&mut self, input: NodeId, kernel: NodeId, padding: Padding) -> Result<NodeId> {
        self.record(Op::Conv1d {
            input,
            kernel,
            padding,
        })
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId, axis: usize) -> Result<NodeId> {
        self.record(Op::Concat { a, b, axis })
    }

    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.record(Op::SumAxis { x, axis })
    }

    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.record(Op::MeanAxis { x, axis })
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.record(Op::Reshape {
            x,
            shape: shape.to_vec(),
        })
    }

    /// Mean of every element, as a scalar.
    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let len = self.value(x).len();
        let flat = self.reshape(x, &[len])?;
        self.mean_axis(flat, 0)
    }

    /// Scales each row of a `[n × d]` matrix to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::NormalizeRows(x))
    }

    /// `[n × d]`, `[c × d]` → `[n × c]` Euclidean distances.
    pub fn pairwise_distance(&mut self, q: NodeId, p: NodeId) -> Result<NodeId> {
        self.record(Op::PairwiseDistance(q, p))
    }

    /// `[n × d]`, `[c × d]` → `[n·c × d]` with row `i·c + j` equal to `q_i + s_j`.
    pub fn pair_sum(&mut self, q: NodeId, s: NodeId) -> Result<NodeId> {
        self.record(Op::PairSum(q, s))
    }

    /// Mean negative log-softmax of each row's target entry.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        self.record(Op::SoftmaxCrossEntropy {
            logits,
            targets: targets.to_vec(),
        })
    }

    #[cfg(test)]
    pub(crate) fn broken_square(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::BrokenSquare(x))
    }

    fn eval(&self, op: &Op) -> Result<Tensor> {
        let v = |id: &NodeId| &self.values[id.0];
        match op {
            Op::Leaf => unreachable!("leaves are not evaluated"),
            Op::MatMul(a, b) => {
                let (a, b) = (v(a), v(b));
                match (a.shape(), b.shape()) {
                    (&[m, k], &[k2, n]) if k == k2 => {
                        let mut out = vec![0.0; m * n];
                        gemm(MatRef::new(a.data(), m, k), MatRef::new(b.data(), k, n), &mut out, false);
                        Tensor::new(vec![m, n], out)
                    }
                    _ => Err(dim_err("matmul", a, b)),
                }
            }
            Op::Transpose(x) => {
                let x = v(x);
                let &[r, c] = x.shape() else {
                    return Err(TensorError::Contract(format!(
                        "transpose needs a matrix, got {:?}",
                        x.shape()
                    )));
                };
                let d = x.data();
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = d[i * c + j];
                    }
                }
                Tensor::new(vec![c, r], out)
            }
            Op::Add(a, b) => binary(v(a), v(b), "add", |x, y| x + y),
            Op::Sub(a, b) => binary(v(a), v(b), "sub", |x, y| x - y),
            Op::Mul(a, b) => binary(v(a), v(b), "mul_elementwise", |x, y| x * y),
            Op::Scale(x, f) => Ok(v(x).map(|e| e * f)),
            Op::AddBias(x, b) => {
                let (x, b) = (v(x), v(b));
                let last = *x.shape().last().unwrap_or(&1);
                if b.ndim() != 1 || b.len() != last || x.ndim() == 0 {
                    return Err(dim_err("add_bias", x, b));
                }
                let mut out = x.clone();
                for row in out.data_mut().chunks_mut(last) {
                    for (o, bb) in row.iter_mut().zip(b.data()) {
                        *o += bb;
                    }
                }
                Ok(out)
            }
            Op::AddChannelBias(x, b) => {
                let (x, b) = (v(x), v(b));
                let Some((_, c, l)) = ncl(x) else {
                    return Err(dim_err("add_channel_bias", x, b));
                };
                if b.ndim() != 1 || b.len() != c {
                    return Err(dim_err("add_channel_bias", x, b));
                }
                let mut out = x.clone();
                for (idx, chunk) in out.data_mut().chunks_mut(l).enumerate() {
                    let bias = b.data()[idx % c];
                    chunk.iter_mut().for_each(|e| *e += bias);
                }
                Ok(out)
            }
            Op::MulChannels(x, w) => {
                let (x, w) = (v(x), v(w));
                let (Some((n, c, l)), Some((n2, 1, l2))) = (ncl(x), ncl(w)) else {
                    return Err(dim_err("mul_channels", x, w));
                };
                if n != n2 || l != l2 || x.ndim() != w.ndim() {
                    return Err(dim_err("mul_channels", x, w));
                }
                let mut out = x.clone();
                for s in 0..n {
                    let wrow = &w.data()[s * l..(s + 1) * l];
                    for ch in 0..c {
                        let base = (s * c + ch) * l;
                        for (o, ww) in out.data_mut()[base..base + l].iter_mut().zip(wrow) {
                            *o *= ww;
                        }
                    }
                }
                Ok(out)
            }
            Op::Relu(x) => Ok(v(x).map(|e| e.max(0.0))),
            Op::Sigmoid(x) => Ok(v(x).map(sigmoid)),
            Op::Conv1d {
                input,
                kernel,
                padding,
            } => conv1d_forward(v(input), v(kernel), *padding),
            Op::Concat { a, b, axis } => {
                let (a, b) = (v(a), v(b));
                let ok = a.ndim() == b.ndim()
                    && *axis < a.ndim()
                    && a.shape()
                        .iter()
                        .zip(b.shape())
                        .enumerate()
                        .all(|(i, (x, y))| i == *axis || x == y);
                if !ok {
                    return Err(dim_err("concat", a, b));
                }
                let (outer, ea, inner) = axis_split(a.shape(), *axis);
                let eb = b.shape()[*axis];
                let mut out = Vec::with_capacity(a.len() + b.len());
                for o in 0..outer {
                    out.extend_from_slice(&a.data()[o * ea * inner..(o + 1) * ea * inner]);
                    out.extend_from_slice(&b.data()[o * eb * inner..(o + 1) * eb * inner]);
                }
                let mut shape = a.shape().to_vec();
                shape[*axis] = ea + eb;
                Tensor::new(shape, out)
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let x = v(x);
                if *axis >= x.ndim() {
                    return Err(TensorError::Contract(format!(
                        "axis {axis} out of range for shape {:?}",
                        x.shape()
                    )));
                }
                let (outer, ext, inner) = axis_split(x.shape(), *axis);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for e in 0..ext {
                        let src = &x.data()[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                        for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                if matches!(op, Op::MeanAxis { .. }) {
                    let inv = 1.0 / ext as f64;
                    out.iter_mut().for_each(|e| *e *= inv);
                }
                let mut shape = x.shape().to_vec();
                shape.remove(*axis);
                Tensor::new(shape, out)
            }
            Op::Reshape { x, shape } => {
                let x = v(x);
                if shape.iter().product::<usize>() != x.len() {
                    return Err(TensorError::Dimension {
                        op: "reshape",
                        lhs: x.shape().to_vec(),
                        rhs: shape.clone(),
                    });
                }
                x.reshaped(shape)
            }
            Op::NormalizeRows(x) => {
                let x = v(x);
                let &[n, d] = x.shape() else {
                    return Err(TensorError::Contract(format!(
                        "normalize_rows needs a matrix, got {:?}",
                        x.shape()
                    )));
                };
                let mut out = x.clone();
                for i in 0..n {
                    let row = &mut out.data_mut()[i * d..(i + 1) * d];
                    let norm = row.iter().map(|e| e * e).sum::<f64>().sqrt();
                    if norm == 0.0 || !norm.is_finite() {
                        return Err(TensorError::NonFinite {
                            stage: format!("normalize_rows: row {i} has zero norm"),
                        });
                    }
                    row.iter_mut().for_each(|e| *e /= norm);
                }
                Ok(out)
            }
            Op::PairwiseDistance(q, p) => {
                let (q, p) = (v(q), v(p));
                let (&[n, d], &[c, d2]) = (q.shape(), p.shape()) else {
                    return Err(dim_err("pairwise_distance", q, p));
                };
                if d != d2 {
                    return Err(dim_err("pairwise_distance", q, p));
                }
                let mut out = vec![0.0; n * c];
                for i in 0..n {
                    for j in 0..c {
                        out[i * c + j] = q
                            .row(i)
                            .iter()
                            .zip(p.row(j))
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            .sqrt();
                    }
                }
                Tensor::new(vec![n, c], out)
            }
            Op::PairSum(q, s) => {
                let (q, s) = (v(q), v(s));
                let (&[n, d], &[c, d2]) = (q.shape(), s.shape()) else {
                    return Err(dim_err("pair_sum", q, s));
                };
                if d != d2 {
                    return Err(dim_err("pair_sum", q, s));
                }
                let mut out = Vec::with_capacity(n * c * d);
                for i in 0..n {
                    for j in 0..c {
                        out.extend(q.row(i).iter().zip(s.row(j)).map(|(a, b)| a + b));
                    }
                }
                Tensor::new(vec![n * c, d], out)
            }
            Op::SoftmaxCrossEntropy { logits, targets } => {
                let l = v(logits);
                let &[n, c] = l.shape() else {
                    return Err(TensorError::Contract(format!(
                        "softmax_cross_entropy needs [n × c] logits, got {:?}",
                        l.shape()
                    )));
                };
                if targets.len() != n || targets.iter().any(|&t| t >= c) {
                    return Err(TensorError::Contract(format!(
                        "softmax_cross_entropy: {} targets for {n} rows of {c} classes",
                        targets.len()
                    )));
                }
                let mut total = 0.0;
                for (i, &t) in targets.iter().enumerate() {
                    let row = l.row(i);
                    total += log_sum_exp(row) - row[t];
                }
                Ok(Tensor::scalar(total / n as f64))
            }
            #[cfg(test)]
            Op::BrokenSquare(x) => Ok(v(x).map(|e| e * e)),
        }
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Returns one gradient per trainable parameter; parameters the loss does
    /// not depend on receive zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.values[loss.0].is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, {loss} has shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.values[loss.0].shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.ops[i], Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_op(i, &g, &mut grads);
        }
        let mut out = BTreeMap::new();
        for id in self.params() {
            let g = grads
                .get_mut(id.0)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor::zeros(self.values[id.0].shape()));
            out.insert(id, g);
        }
        Ok(Gradients { grads: out })
    }

    fn backward_op(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let v = |id: &NodeId| &self.values[id.0];
        let out = &self.values[i];
        match &self.ops[i] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (v(a), v(b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let gm = MatRef::new(g.data(), m, n);
                let mut da = vec![0.0; m * k];
                gemm(gm, MatRef::new(bv.data(), k, n).t(), &mut da, false);
                let mut db = vec![0.0; k * n];
                gemm(MatRef::new(av.data(), m, k).t(), gm, &mut db, false);
                accumulate(grads, *a, Tensor::new(vec![m, k], da).expect("shape"));
                accumulate(grads, *b, Tensor::new(vec![k, n], db).expect("shape"));
            }
            Op::Transpose(x) => {
                let (r, c) = (v(x).shape()[0], v(x).shape()[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g.data()[j * r + i];
                    }
                }
                accumulate(grads, *x, Tensor::new(vec![r, c], dx).expect("shape"));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, reduce_to(g, v(a)));
                accumulate(grads, *b, reduce_to(g, v(b)));
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, reduce_to(g, v(a)));
                accumulate(grads, *b, reduce_to(&g.map(|e| -e), v(b)));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (v(a), v(b));
                let da = binary(g, bv, "mul", |x, y| x * y).expect("shape");
                let db = binary(g, av, "mul", |x, y| x * y).expect("shape");
                accumulate(grads, *a, reduce_to(&da, av));
                accumulate(grads, *b, reduce_to(&db, bv));
            }
            Op::Scale(x, f) => accumulate(grads, *x, g.map(|e| e * f)),
            Op::AddBias(x, b) => {
                let n = v(b).len();
                let mut db = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (d, e) in db.iter_mut().zip(row) {
                        *d += e;
                    }
                }
                accumulate(grads, *x, g.clone());
                accumulate(grads, *b, Tensor::vector(db));
            }
            Op::AddChannelBias(x, b) => {
                let (_, c, l) = ncl(v(x)).expect("shape");
                let mut db = vec![0.0; c];
                for (idx, chunk) in g.data().chunks(l).enumerate() {
                    db[idx % c] += chunk.iter().sum::<f64>();
                }
                accumulate(grads, *x, g.clone());
                accumulate(grads, *b, Tensor::vector(db));
            }
            Op::MulChannels(x, w) => {
                let (xv, wv) = (v(x), v(w));
                let (n, c, l) = ncl(xv).expect("shape");
                let mut dx = g.clone();
                let mut dw = vec![0.0; n * l];
                for s in 0..n {
                    let wrow = &wv.data()[s * l..(s + 1) * l];
                    for ch in 0..c {
                        let base = (s * c + ch) * l;
                        for t in 0..l {
                            dx.data_mut()[base + t] *= wrow[t];
                            dw[s * l + t] += g.data()[base + t] * xv.data()[base + t];
                        }
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *w, Tensor::new(wv.shape().to_vec(), dw).expect("shape"));
            }
            Op::Relu(x) => {
                let xv = v(x);
                let mut dx = g.clone();
                for (d, &e) in dx.data_mut().iter_mut().zip(xv.data()) {
                    if e <= 0.0 {
                        *d = 0.0;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let mut dx = g.clone();
                for (d, &s) in dx.data_mut().iter_mut().zip(out.data()) {
                    *d *= s * (1.0 - s);
                }
                accumulate(grads, *x, dx);
            }
            Op::Conv1d {
                input,
                kernel,
                padding,
            } => {
                let (dx, dk) = conv1d_backward(v(input), v(kernel), *padding, g);
                accumulate(grads, *input, dx);
                accumulate(grads, *kernel, dk);
            }
            Op::Concat { a, b, axis } => {
                let (av, bv) = (v(a), v(b));
                let (outer, ea, inner) = axis_split(av.shape(), *axis);
                let eb = bv.shape()[*axis];
                let mut da = Vec::with_capacity(av.len());
                let mut db = Vec::with_capacity(bv.len());
                let stride = (ea + eb) * inner;
                for o in 0..outer {
                    let chunk = &g.data()[o * stride..(o + 1) * stride];
                    da.extend_from_slice(&chunk[..ea * inner]);
                    db.extend_from_slice(&chunk[ea * inner..]);
                }
                accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da).expect("shape"));
                accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db).expect("shape"));
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let xv = v(x);
                let (outer, ext, inner) = axis_split(xv.shape(), *axis);
                let factor = if matches!(self.ops[i], Op::MeanAxis { .. }) {
                    1.0 / ext as f64
                } else {
                    1.0
                };
                let mut dx = vec![0.0; xv.len()];
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for e in 0..ext {
                        let dst = &mut dx[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = s * factor;
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx).expect("shape"));
            }
            Op::Reshape { x, .. } => {
                accumulate(grads, *x, g.reshaped(v(x).shape()).expect("shape"));
            }
            Op::NormalizeRows(x) => {
                let xv = v(x);
                let (n, d) = (xv.shape()[0], xv.shape()[1]);
                let mut dx = vec![0.0; n * d];
                for r in 0..n {
                    let norm = xv.row(r).iter().map(|e| e * e).sum::<f64>().sqrt();
                    let y = out.row(r);
                    let gy = g.row(r);
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for c in 0..d {
                        dx[r * d + c] = (gy[c] - y[c] * dot) / norm;
                    }
                }
                accumulate(grads, *x, Tensor::new(vec![n, d], dx).expect("shape"));
            }
            Op::PairwiseDistance(q, p) => {
                let (qv, pv) = (v(q), v(p));
                let (n, d, c) = (qv.shape()[0], qv.shape()[1], pv.shape()[0]);
                let mut dq = vec![0.0; n * d];
                let mut dp = vec![0.0; c * d];
                for i in 0..n {
                    for j in 0..c {
                        let dist = out.data()[i * c + j];
                        if dist == 0.0 {
                            continue;
                        }
                        let coef = g.data()[i * c + j] / dist;
                        for t in 0..d {
                            let diff = qv.data()[i * d + t] - pv.data()[j * d + t];
                            dq[i * d + t] += coef * diff;
                            dp[j * d + t] -= coef * diff;
                        }
                    }
                }
                accumulate(grads, *q, Tensor::new(vec![n, d], dq).expect("shape"));
                accumulate(grads, *p, Tensor::new(vec![c, d], dp).expect("shape"));
            }
            Op::PairSum(q, s) => {
                let (n, d, c) = (v(q).shape()[0], v(q).shape()[1], v(s).shape()[0]);
                let mut dq = vec![0.0; n * d];
                let mut ds = vec![0.0; c * d];
                for i in 0..n {
                    for j in 0..c {
                        let row = g.row(i * c + j);
                        for t in 0..d {
                            dq[i * d + t] += row[t];
                            ds[j * d + t] += row[t];
                        }
                    }
                }
                accumulate(grads, *q, Tensor::new(vec![n, d], dq).expect("shape"));
                accumulate(grads, *s, Tensor::new(vec![c, d], ds).expect("shape"));
            }
            Op::SoftmaxCrossEntropy { logits, targets } => {
                let l = v(logits);
                let (n, c) = (l.shape()[0], l.shape()[1]);
                let scale = g.data()[0] / n as f64;
                let mut dl = vec![0.0; n * c];
                for (i, &t) in targets.iter().enumerate() {
                    let row = l.row(i);
                    let lse = log_sum_exp(row);
                    for j in 0..c {
                        let p = (row[j] - lse).exp();
                        dl[i * c + j] = scale * (p - if j == t { 1.0 } else { 0.0 });
                    }
                }
                accumulate(grads, *logits, Tensor::new(vec![n, c], dl).expect("shape"));
            }
            #[cfg(test)]
            Op::BrokenSquare(x) => {
                // Wrong on purpose: d(x²)/dx is 2x, not 3x.
                let dx = binary(g, v(x), "broken", |gg, e| gg * 3.0 * e).expect("shape");
                accumulate(grads, *x, dx);
            }
        }
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|e| (e - max).exp()).sum::<f64>().ln()
}

/// Elementwise binary op with scalar broadcasting on either side.
fn binary(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    } else if is_bare_scalar(b) {
        let y = b.data()[0];
        Ok(a.map(|x| f(x, y)))
    } else if is_bare_scalar(a) {
        let x = a.data()[0];
        Ok(b.map(|y| f(x, y)))
    } else {
        Err(dim_err(op, a, b))
    }
}

/// Sums a gradient down to the shape of a (possibly scalar-broadcast) operand.
fn reduce_to(g: &Tensor, target: &Tensor) -> Tensor {
    if g.shape() == target.shape() {
        g.clone()
    } else {
        Tensor::scalar(g.data().iter().sum())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn conv_geometry(x: &Tensor, k: &Tensor, padding: Padding) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    let Some((n, c_in, len)) = ncl(x) else {
        return Err(dim_err("conv1d", x, k));
    };
    let &[c_out, kc_in, width] = k.shape() else {
        return Err(dim_err("conv1d", x, k));
    };
    if kc_in != c_in {
        return Err(dim_err("conv1d", x, k));
    }
    let (pad_left, out_len) = match padding {
        Padding::Same => (same_pad_left(width), len),
        Padding::Valid => {
            if width > len {
                return Err(dim_err("conv1d", x, k));
            }
            (0, len - width + 1)
        }
    };
    Ok((n, c_in, len, c_out, width, pad_left, out_len))
}

fn conv1d_forward(x: &Tensor, k: &Tensor, padding: Padding) -> Result<Tensor> {
    let (n, c_in, len, c_out, width, pad_left, out_len) = conv_geometry(x, k, padding)?;
    let mut out = vec![0.0; n * c_out * out_len];
    let mut cols = vec![0.0; c_in * width * out_len];
    let w = MatRef::new(k.data(), c_out, c_in * width);
    for s in 0..n {
        let xs = &x.data()[s * c_in * len..(s + 1) * c_in * len];
        im2col(xs, c_in, len, width, pad_left, out_len, &mut cols);
        gemm(
            w,
            MatRef::new(&cols, c_in * width, out_len),
            &mut out[s * c_out * out_len..(s + 1) * c_out * out_len],
            false,
        );
    }
    let shape = if x.ndim() == 2 {
        vec![c_out, out_len]
    } else {
        vec![n, c_out, out_len]
    };
    Tensor::new(shape, out)
}

fn conv1d_backward(x: &Tensor, k: &Tensor, padding: Padding, g: &Tensor) -> (Tensor, Tensor) {
    let (n, c_in, len, c_out, width, pad_left, out_len) =
        conv_geometry(x, k, padding).expect("validated in forward");
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; k.len()];
    let mut cols = vec![0.0; c_in * width * out_len];
    let mut dcols = vec![0.0; c_in * width * out_len];
    let w = MatRef::new(k.data(), c_out, c_in * width);
    for s in 0..n {
        let xs = &x.data()[s * c_in * len..(s + 1) * c_in * len];
        let gs = MatRef::new(&g.data()[s * c_out * out_len..(s + 1) * c_out * out_len], c_out, out_len);
        im2col(xs, c_in, len, width, pad_left, out_len, &mut cols);
        gemm(gs, MatRef::new(&cols, c_in * width, out_len).t(), &mut dk, true);
        gemm(w.t(), gs, &mut dcols, false);
        col2im_add(
            &dcols,
            c_in,
            len,
            width,
            pad_left,
            out_len,
            &mut dx[s * c_in * len..(s + 1) * c_in * len],
        );
    }
    (
        Tensor::new(x.shape().to_vec(), dx).expect("shape"),
        Tensor::new(k.shape().to_vec(), dk).expect("shape"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let id = g.input(m(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let col = g.input(m(&[&[3.0], &[4.0]]));
        let r = g.matmul(id, col).unwrap();
        assert_eq!(g.value(r).data(), &[3.0, 4.0]);

        let row = g.input(m(&[&[1.0, 2.0]]));
        let r = g.matmul(row, col).unwrap();
        assert_eq!(g.value(r).data(), &[11.0]);

        let zero = g.input(m(&[&[0.0, 0.0]]));
        let r = g.matmul(zero, col).unwrap();
        assert_eq!(g.value(r).data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::Dimension {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3] vs [2, 3]"));
    }

    #[test]
    fn conv1d_valid_example() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let k = g.input(Tensor::new(vec![1, 1, 3], vec![1.0, 0.0, -1.0]).unwrap());
        let y = g.conv1d(x, k, Padding::Valid).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 2]);
        assert_eq!(g.value(y).data(), &[-2.0, -2.0]);
    }

    #[test]
    fn conv1d_identity_and_zero_kernels() {
        let data = vec![0.3, -1.2, 4.5, 2.25, -0.125, 7.0];
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 6], data.clone()).unwrap());
        let ident = g.input(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
        for pad in [Padding::Same, Padding::Valid] {
            let y = g.conv1d(x, ident, pad).unwrap();
            assert_eq!(g.value(y).data(), &data[..]);
        }
        let zero = g.input(Tensor::zeros(&[2, 1, 3]));
        let y = g.conv1d(x, zero, Padding::Same).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 6]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv1d_kernel_longer_than_valid_input_fails() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 2]));
        let k = g.input(Tensor::zeros(&[1, 1, 3]));
        assert!(matches!(
            g.conv1d(x, k, Padding::Valid),
            Err(TensorError::Dimension { op: "conv1d", .. })
        ));
        // same padding has no such restriction
        assert!(g.conv1d(x, k, Padding::Same).is_ok());
    }

    #[test]
    fn conv1d_same_matches_sliding_window() {
        // 2 input channels, length 5, kernel width 3: hand-rolled reference.
        let x: Vec<f64> = (0..10).map(|v| v as f64 * 0.5 - 1.0).collect();
        let w: Vec<f64> = (0..12).map(|v| ((v * 7) % 5) as f64 - 2.0).collect(); // 2x2x3
        let mut g = Graph::new();
        let xi = g.input(Tensor::new(vec![2, 5], x.clone()).unwrap());
        let wi = g.input(Tensor::new(vec![2, 2, 3], w.clone()).unwrap());
        let y = g.conv1d(xi, wi, Padding::Same).unwrap();
        for o in 0..2 {
            for t in 0..5 {
                let mut acc = 0.0;
                for i in 0..2 {
                    for j in 0..3 {
                        let pos = t as isize + j as isize - 1;
                        if (0..5).contains(&pos) {
                            acc += w[o * 6 + i * 3 + j] * x[i * 5 + pos as usize];
                        }
                    }
                }
                assert!((g.value(y).data()[o * 5 + t] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let z = g.input(Tensor::scalar(0.0));
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.value(s).item().unwrap(), 0.5);

        let x = g.input(Tensor::vector(vec![-2.0, 3.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 3.0]);

        let a = g.input(Tensor::vector(vec![1.0, 2.0]));
        let b = g.input(Tensor::vector(vec![0.5, 0.5]));
        let p = g.mul_elementwise(a, b).unwrap();
        assert_eq!(g.value(p).data(), &[0.5, 1.0]);

        let c = g.input(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(matches!(g.add(a, c), Err(TensorError::Dimension { op: "add", .. })));
        // scalar broadcasting is the one permitted exception
        let two = g.input(Tensor::scalar(2.0));
        let q = g.mul_elementwise(c, two).unwrap();
        assert_eq!(g.value(q).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn sigmoid_stays_in_open_interval() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![-30.0, -5.0, 0.0, 5.0, 30.0]));
        let s = g.sigmoid(x).unwrap();
        assert!(g.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn concat_and_axis_reductions() {
        let mut g = Graph::new();
        let a = g.input(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = g.input(m(&[&[5.0], &[6.0]]));
        let c = g.concat(a, b, 1).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 3]);
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s0 = g.sum_axis(a, 0).unwrap();
        assert_eq!(g.value(s0).data(), &[4.0, 6.0]);
        let m1 = g.mean_axis(a, 1).unwrap();
        assert_eq!(g.value(m1).data(), &[1.5, 3.5]);
        assert!(g.concat(a, b, 0).is_err());
    }

    #[test]
    fn backward_of_square_and_sigmoid() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let sq = g.mul_elementwise(x, x).unwrap();
        let grads = g.backward(sq).unwrap();
        assert_eq!(grads.get(x).unwrap().item().unwrap(), 6.0);

        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.0));
        let s = g.sigmoid(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().item().unwrap(), 0.25);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert!(matches!(g.backward(y), Err(TensorError::Contract(_))));
    }

    #[test]
    fn unreachable_params_get_zero_gradients() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let unused = g.param(Tensor::vector(vec![1.0, 1.0, 1.0]));
        let y = g.scale(x, 4.0).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item().unwrap(), 4.0);
        assert_eq!(grads.get(unused).unwrap(), &Tensor::zeros(&[3]));
    }

    #[test]
    fn softmax_cross_entropy_values() {
        let mut g = Graph::new();
        let l = g.input(Tensor::new(vec![1, 5], vec![0.0; 5]).unwrap());
        let loss = g.softmax_cross_entropy(l, &[2]).unwrap();
        assert!((g.value(loss).item().unwrap() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn normalize_rows_rejects_zero_rows() {
        let mut g = Graph::new();
        let x = g.input(m(&[&[3.0, 4.0], &[0.0, 0.0]]));
        let err = g.normalize_rows(x).unwrap_err();
        assert!(err.to_string().contains("row 1"));
    }

    #[test]
    fn recompute_follows_leaf_updates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1.0));
        let y = g.scale(x, 2.0).unwrap();
        let z = g.sigmoid(y).unwrap();
        g.set_value(x, Tensor::scalar(0.0)).unwrap();
        g.recompute_from(x).unwrap();
        assert_eq!(g.value(z).item().unwrap(), 0.5);
        assert!(g.set_value(y, Tensor::scalar(1.0)).is_err());
    }
}
