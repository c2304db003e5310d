//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends one node to a [`Tape`]. Node ids grow
//! monotonically, so the record is already in topological order and the
//! backward pass is a single reverse sweep.

use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::geometry;
use crate::spatial::IndexTable;
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, sum_to_shape, Real, Tensor};

mod edge;
pub use edge::{EdgeInput, EdgeReduceSpec, EdgeReduction};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EwiseKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    fn negative_slope(self) -> f64 {
        match self {
            Activation::Relu => 0.0,
            Activation::LeakyRelu(s) => s,
        }
    }
}

/// Per-channel batch-normalisation running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Folds one training batch's statistics into the running estimates.
    pub fn update(&mut self, stats: &BatchStats<T>) {
        let m = T::from_f64(self.momentum);
        let keep = T::one() - m;
        for c in 0..self.channels() {
            self.running_mean[c] = keep * self.running_mean[c] + m * stats.mean[c];
            self.running_var[c] = keep * self.running_var[c] + m * stats.unbiased_var[c];
        }
    }
}

/// Statistics of one training-mode normalisation, to be folded into the
/// running estimates by the owner of the [`BatchNormState`].
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub unbiased_var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Ewise(EwiseKind, Var, Var),
    Matmul(Var, Var),
    Sum {
        x: Var,
        axis: usize,
    },
    Max {
        x: Var,
        // flat input offset chosen for each output element
        argmax: Vec<usize>,
    },
    SumAll(Var),
    Gather {
        x: Var,
        idx: Arc<IndexTable>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Activation {
        x: Var,
        slope: T,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Cos(Var),
    Norm(Var),
    Elevation {
        rel: Var,
        dist: Var,
    },
    Azimuth(Var),
    DistanceAttention(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    EdgeReduce(Box<edge::EdgeRecord<T>>),
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Ordered record of executed operations.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a node that requires grad. Nodes the loss does not depend
    /// on get zeros; nodes that never required grad yield `None`.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node so the tape can host a new forward pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    // ---- elementwise -----------------------------------------------------

    pub fn ewise(&mut self, kind: EwiseKind, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = match kind {
            EwiseKind::Add => broadcast_apply(va, vb, |x, y| x + y)?,
            EwiseKind::Sub => broadcast_apply(va, vb, |x, y| x - y)?,
            EwiseKind::Mul => broadcast_apply(va, vb, |x, y| x * y)?,
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Ewise(kind, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ewise(EwiseKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ewise(EwiseKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ewise(EwiseKind::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let factor = T::from_f64(factor);
        let out = self.value(x).map(|v| v * factor);
        let rg = self.any_grad(&[x]);
        self.push(out, rg, Op::Scale { x, factor })
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let slope = T::from_f64(kind.negative_slope());
        let out = self
            .value(x)
            .map(|v| if v >= T::zero() { v } else { slope * v });
        let rg = self.any_grad(&[x]);
        self.push(out, rg, Op::Activation { x, slope })
    }

    pub fn cos(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.cos());
        let rg = self.any_grad(&[x]);
        self.push(out, rg, Op::Cos(x))
    }

    // ---- linear algebra --------------------------------------------------

    /// Batched matrix product `[.., M, K] x [.., K, N] -> [.., M, N]` with
    /// broadcasting over the leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_forward(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Matmul(a, b)))
    }

    // ---- reductions ------------------------------------------------------

    pub fn reduce(&mut self, kind: ReduceKind, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                op: "reduce",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let data = self.value(x).data();
        let rg = self.any_grad(&[x]);
        match kind {
            ReduceKind::Sum => {
                let mut out = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let src = &data[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d += *s;
                        }
                    }
                }
                let t = Tensor::new(&out_shape, out)?;
                Ok(self.push(t, rg, Op::Sum { x, axis }))
            }
            ReduceKind::Max => {
                let mut out = vec![T::zero(); outer * inner];
                let mut argmax = vec![0usize; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut best = base;
                        for l in 1..len {
                            let at = base + l * inner;
                            // strict comparison keeps the lowest index on ties
                            if data[at] > data[best] {
                                best = at;
                            }
                        }
                        out[o * inner + i] = data[best];
                        argmax[o * inner + i] = best;
                    }
                }
                let t = Tensor::new(&out_shape, out)?;
                Ok(self.push(t, rg, Op::Max { x, argmax }))
            }
        }
    }

    /// Max over the neighbour axis of `x: [.., K, C]`, skipping slots whose
    /// `valid[.., k]` flag is false. A row with no valid slot falls back to
    /// the unmasked maximum.
    pub fn masked_max_neighbors(&mut self, x: Var, valid: &[bool]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::Axis {
                op: "masked_max",
                axis: 1,
                rank: shape.len(),
            });
        }
        let rank = shape.len();
        let (k, c) = (shape[rank - 2], shape[rank - 1]);
        let rows: usize = shape[..rank - 2].iter().product();
        if valid.len() != rows * k {
            return shape_err("masked_max", &shape, &[valid.len()]);
        }
        let data = self.value(x).data();
        let mut out = vec![T::zero(); rows * c];
        let mut argmax = vec![0usize; rows * c];
        for r in 0..rows {
            let flags = &valid[r * k..(r + 1) * k];
            let any = flags.iter().any(|&f| f);
            let first = if any { flags.iter().position(|&f| f).unwrap() } else { 0 };
            for ch in 0..c {
                let mut best = (r * k + first) * c + ch;
                for j in first + 1..k {
                    if any && !flags[j] {
                        continue;
                    }
                    let at = (r * k + j) * c + ch;
                    if data[at] > data[best] {
                        best = at;
                    }
                }
                out[r * c + ch] = data[best];
                argmax[r * c + ch] = best;
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(rank - 2);
        let t = Tensor::new(&out_shape, out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, rg, Op::Max { x, argmax }))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), rg, Op::SumAll(x))
    }

    // ---- indexing and layout ---------------------------------------------

    /// `out[.., i, j, :] = x[.., idx[i, j], :]` for `x: [N, C]` or `[B, N, C]`.
    pub fn gather_rows(&mut self, x: Var, idx: &Arc<IndexTable>) -> Result<Var> {
        let out = gather_forward(self.value(x), idx)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            out,
            rg,
            Op::Gather {
                x,
                idx: Arc::clone(idx),
            },
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Axis {
                op: "concat",
                axis,
                rank: first.len(),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return shape_err("concat", &first, s);
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(&shape, out)?;
        let rg = self.any_grad(parts);
        Ok(self.push(
            t,
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, rg, Op::Reshape(x)))
    }

    // ---- geometric primitives ----------------------------------------------

    /// Euclidean norm over the last axis.
    pub fn norm(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some((&d, lead)) = shape.split_last() else {
            return Err(Error::Axis {
                op: "norm",
                axis: 0,
                rank: 0,
            });
        };
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(d)
            .map(|row| row.iter().map(|v| *v * *v).sum::<T>().sqrt())
            .collect();
        let t = Tensor::new(lead, out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, rg, Op::Norm(x)))
    }

    /// Elevation ratio `z / dist` for `rel: [.., 3]`, `dist: [..]`.
    pub fn elevation(&mut self, rel: Var, dist: Var) -> Result<Var> {
        let (r, d) = (self.value(rel), self.value(dist));
        check_rel_dist(r.shape(), d.shape())?;
        let out: Vec<T> = r
            .data()
            .chunks(3)
            .zip(d.data())
            .map(|(v, &dd)| geometry::elevation_ratio(v[2], dd))
            .collect();
        let t = Tensor::new(d.shape(), out)?;
        let rg = self.any_grad(&[rel, dist]);
        Ok(self.push(t, rg, Op::Elevation { rel, dist }))
    }

    /// Azimuth ratio `x / sqrt(x^2 + y^2)` for `rel: [.., 3]`.
    pub fn azimuth(&mut self, rel: Var) -> Result<Var> {
        let r = self.value(rel);
        let Some((&3, lead)) = r.shape().split_last() else {
            return shape_err("azimuth", r.shape(), &[3]);
        };
        let out: Vec<T> = r
            .data()
            .chunks(3)
            .map(|v| geometry::azimuth_ratio(v[0], v[1]))
            .collect();
        let t = Tensor::new(lead, out)?;
        let rg = self.any_grad(&[rel]);
        Ok(self.push(t, rg, Op::Azimuth(rel)))
    }

    /// Row-wise distance attention over the last axis of `dist`.
    pub fn distance_attention(&mut self, dist: Var) -> Result<Var> {
        let d = self.value(dist);
        let Some(&k) = d.shape().last() else {
            return shape_err("distance_attention", d.shape(), &[1]);
        };
        let mut out = vec![T::zero(); d.numel()];
        for (row, o) in d.data().chunks(k).zip(out.chunks_mut(k)) {
            geometry::distance_attention_row(row, o);
        }
        let t = Tensor::new(d.shape(), out)?;
        let rg = self.any_grad(&[dist]);
        Ok(self.push(t, rg, Op::DistanceAttention(dist)))
    }

    // ---- normalisation and loss --------------------------------------------

    /// Batch normalisation over every axis but the last. In training mode the
    /// batch statistics are returned so the caller can update `state`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &BatchNormState<T>,
        training: bool,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap_or(&0);
        if c != state.channels() || self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err("batch_norm", &shape, &[state.channels()]);
        }
        let xs = self.value(x).data();
        let rows = xs.len() / c.max(1);
        let eps = T::from_f64(state.eps);
        let (mean, var) = if training {
            channel_moments(xs, c)
        } else {
            (state.running_mean.clone(), state.running_var.clone())
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for r in 0..rows {
            let src = &xs[r * c..(r + 1) * c];
            let xh = &mut xhat[r * c..(r + 1) * c];
            let o = &mut out[r * c..(r + 1) * c];
            for ch in 0..c {
                xh[ch] = (src[ch] - mean[ch]) * inv_std[ch];
                o[ch] = g[ch] * xh[ch] + b[ch];
            }
        }
        let stats = training.then(|| {
            let corr = if rows > 1 {
                T::from_f64(rows as f64 / (rows as f64 - 1.0))
            } else {
                T::one()
            };
            BatchStats {
                unbiased_var: var.iter().map(|v| *v * corr).collect(),
                mean,
            }
        });
        let t = Tensor::new(&shape, out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        let v = self.push(
            t,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
        );
        Ok((v, stats))
    }

    /// Mean cross-entropy of `logits: [.., C]` against one label per row.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let c = *shape.last().unwrap_or(&0);
        let rows = if c == 0 { 0 } else { self.value(logits).numel() / c };
        if rows != labels.len() || rows == 0 {
            return shape_err("cross_entropy", &shape, &[labels.len()]);
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(Error::LabelRange {
                sample: i,
                label: l,
                classes: c,
            });
        }
        let data = self.value(logits).data();
        let mut probs = vec![T::zero(); data.len()];
        let mut total = 0.0f64;
        for r in 0..rows {
            let row = &data[r * c..(r + 1) * c];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &v) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = (v - m).exp();
                z += *p;
            }
            for p in &mut probs[r * c..(r + 1) * c] {
                *p = *p / z;
            }
            total += (m + z.ln() - row[labels[r]]).as_f64();
        }
        let t = Tensor::scalar(T::from_f64(total / rows as f64));
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            t,
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar loss. Consumes the tape: a second call
    /// without a fresh forward pass is an error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::StaleTape);
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::UnknownNode(loss.0));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            for (input, contrib) in self.vjp(id, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += *c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        // leaves that require grad but were not reached get zeros
        for (id, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
            if !matches!(node.op, Op::Leaf) {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }

    /// Vector-Jacobian product of node `id` against its output gradient.
    fn vjp(&self, id: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[id];
        let out = &node.value;
        let gd = g.data();
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;

        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Ewise(kind, a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let mut res = Vec::new();
                match kind {
                    EwiseKind::Add | EwiseKind::Sub => {
                        if wants(*a) {
                            let d = sum_to_shape(gd, out.shape(), va.shape());
                            res.push((*a, Tensor::new(va.shape(), d)?));
                        }
                        if wants(*b) {
                            let mut d = sum_to_shape(gd, out.shape(), vb.shape());
                            if *kind == EwiseKind::Sub {
                                d.iter_mut().for_each(|v| *v = -*v);
                            }
                            res.push((*b, Tensor::new(vb.shape(), d)?));
                        }
                    }
                    EwiseKind::Mul => {
                        if wants(*a) {
                            let full = broadcast_apply(g, vb, |x, y| x * y)?;
                            let d = sum_to_shape(full.data(), out.shape(), va.shape());
                            res.push((*a, Tensor::new(va.shape(), d)?));
                        }
                        if wants(*b) {
                            let full = broadcast_apply(g, va, |x, y| x * y)?;
                            let d = sum_to_shape(full.data(), out.shape(), vb.shape());
                            res.push((*b, Tensor::new(vb.shape(), d)?));
                        }
                    }
                }
                res
            }
            Op::Matmul(a, b) => {
                let (da, db) = matmul_backward(val(*a), val(*b), g, wants(*a), wants(*b));
                let mut res = Vec::new();
                if let Some(d) = da {
                    res.push((*a, d));
                }
                if let Some(d) = db {
                    res.push((*b, d));
                }
                res
            }
            Op::Sum { x, axis } => {
                let xs = val(*x).shape();
                let (outer, len, inner) = split_axis(xs, *axis);
                let mut d = vec![T::zero(); val(*x).numel()];
                for o in 0..outer {
                    let src = &gd[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        d[(o * len + l) * inner..(o * len + l + 1) * inner].copy_from_slice(src);
                    }
                }
                vec![(*x, Tensor::new(xs, d)?)]
            }
            Op::Max { x, argmax } => {
                let mut d = vec![T::zero(); val(*x).numel()];
                for (o, &at) in argmax.iter().enumerate() {
                    d[at] += gd[o];
                }
                vec![(*x, Tensor::new(val(*x).shape(), d)?)]
            }
            Op::SumAll(x) => vec![(*x, Tensor::full(val(*x).shape(), gd[0]))],
            Op::Gather { x, idx } => {
                let xs = val(*x).shape();
                let c = *xs.last().unwrap();
                let n = xs[xs.len() - 2];
                let mut d = vec![T::zero(); val(*x).numel()];
                let k = idx.k();
                for b in 0..idx.batch() {
                    for i in 0..idx.rows() {
                        for j in 0..k {
                            let src = idx.get(b, i, j);
                            let dst = &mut d[(b * n + src) * c..(b * n + src + 1) * c];
                            let off = ((b * idx.rows() + i) * k + j) * c;
                            for (dv, gv) in dst.iter_mut().zip(&gd[off..off + c]) {
                                *dv += *gv;
                            }
                        }
                    }
                }
                vec![(*x, Tensor::new(xs, d)?)]
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut res = Vec::new();
                let mut start = 0;
                for &p in parts {
                    let ps = val(p).shape();
                    let len = ps[*axis];
                    if wants(p) {
                        let mut d = Vec::with_capacity(val(p).numel());
                        for o in 0..outer {
                            let base = (o * total + start) * inner;
                            d.extend_from_slice(&gd[base..base + len * inner]);
                        }
                        res.push((p, Tensor::new(ps, d)?));
                    }
                    start += len;
                }
                res
            }
            Op::Reshape(x) => vec![(*x, g.clone().reshape(val(*x).shape())?)],
            Op::Activation { x, slope } => {
                let xv = val(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| if v >= T::zero() { gv } else { *slope * gv })
                    .collect();
                vec![(*x, Tensor::new(xv.shape(), d)?)]
            }
            Op::Scale { x, factor } => vec![(*x, g.map(|v| v * *factor))],
            Op::Cos(x) => {
                let xv = val(*x);
                let d = xv.data().iter().zip(gd).map(|(&v, &gv)| -v.sin() * gv).collect();
                vec![(*x, Tensor::new(xv.shape(), d)?)]
            }
            Op::Norm(x) => {
                let xv = val(*x);
                let dim = *xv.shape().last().unwrap();
                let tiny = T::from_f64(geometry::DEGENERATE_EPS);
                let mut d = vec![T::zero(); xv.numel()];
                for (r, (row, n)) in xv.data().chunks(dim).zip(out.data()).enumerate() {
                    if *n < tiny {
                        continue;
                    }
                    for (j, v) in row.iter().enumerate() {
                        d[r * dim + j] = gd[r] * *v / *n;
                    }
                }
                vec![(*x, Tensor::new(xv.shape(), d)?)]
            }
            Op::Elevation { rel, dist } => {
                let (rv, dv) = (val(*rel), val(*dist));
                let tiny = T::from_f64(geometry::DEGENERATE_EPS);
                let mut drel = vec![T::zero(); rv.numel()];
                let mut ddist = vec![T::zero(); dv.numel()];
                for (e, &dd) in dv.data().iter().enumerate() {
                    if dd < tiny {
                        continue;
                    }
                    let z = rv.data()[e * 3 + 2];
                    drel[e * 3 + 2] = gd[e] / dd;
                    ddist[e] = -gd[e] * z / (dd * dd);
                }
                let mut res = Vec::new();
                if wants(*rel) {
                    res.push((*rel, Tensor::new(rv.shape(), drel)?));
                }
                if wants(*dist) {
                    res.push((*dist, Tensor::new(dv.shape(), ddist)?));
                }
                res
            }
            Op::Azimuth(rel) => {
                let rv = val(*rel);
                let tiny = T::from_f64(geometry::DEGENERATE_EPS);
                let mut d = vec![T::zero(); rv.numel()];
                for (e, v) in rv.data().chunks(3).enumerate() {
                    let (x, y) = (v[0], v[1]);
                    let h = (x * x + y * y).sqrt();
                    if h < tiny {
                        continue;
                    }
                    let h3 = h * h * h;
                    d[e * 3] = gd[e] * y * y / h3;
                    d[e * 3 + 1] = -gd[e] * x * y / h3;
                }
                vec![(*rel, Tensor::new(rv.shape(), d)?)]
            }
            Op::DistanceAttention(dist) => {
                let dv = val(*dist);
                let k = *dv.shape().last().unwrap();
                let mut d = vec![T::zero(); dv.numel()];
                for ((row, grow), drow) in dv
                    .data()
                    .chunks(k)
                    .zip(gd.chunks(k))
                    .zip(d.chunks_mut(k))
                {
                    geometry::distance_attention_row_vjp(row, grow, drow);
                }
                vec![(*dist, Tensor::new(dv.shape(), d)?)]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let c = inv_std.len();
                let rows = xhat.len() / c.max(1);
                let gam = val(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for r in 0..rows {
                    for ch in 0..c {
                        let gv = gd[r * c + ch];
                        dgamma[ch] += gv * xhat[r * c + ch];
                        dbeta[ch] += gv;
                    }
                }
                let mut res = Vec::new();
                if wants(*x) {
                    let mut dx = vec![T::zero(); xhat.len()];
                    if *training {
                        let n = T::from_f64(rows as f64);
                        for r in 0..rows {
                            for ch in 0..c {
                                let at = r * c + ch;
                                dx[at] = gam[ch] * inv_std[ch] / n
                                    * (n * gd[at] - dbeta[ch] - xhat[at] * dgamma[ch]);
                            }
                        }
                    } else {
                        for r in 0..rows {
                            for ch in 0..c {
                                dx[r * c + ch] = gd[r * c + ch] * gam[ch] * inv_std[ch];
                            }
                        }
                    }
                    res.push((*x, Tensor::new(val(*x).shape(), dx)?));
                }
                if wants(*gamma) {
                    res.push((*gamma, Tensor::new(&[c], dgamma)?));
                }
                if wants(*beta) {
                    res.push((*beta, Tensor::new(&[c], dbeta)?));
                }
                res
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let lv = val(*logits);
                let c = *lv.shape().last().unwrap();
                let scale = gd[0] / T::from_f64(labels.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|p| *p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * c + l] -= scale;
                }
                vec![(*logits, Tensor::new(lv.shape(), d)?)]
            }
            Op::EdgeReduce(rec) => self.edge_reduce_vjp(rec, gd)?,
        })
    }
}

// ---- kernels ----------------------------------------------------------------

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_rel_dist(rel: &[usize], dist: &[usize]) -> Result<()> {
    match rel.split_last() {
        Some((&3, lead)) if lead == dist => Ok(()),
        _ => shape_err("elevation", rel, dist),
    }
}

fn channel_moments<T: Real>(xs: &[T], c: usize) -> (Vec<T>, Vec<T>) {
    let rows = xs.len() / c.max(1);
    let n = T::from_f64(rows.max(1) as f64);
    let mut mean = vec![T::zero(); c];
    for row in xs.chunks(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += *v;
        }
    }
    mean.iter_mut().for_each(|m| *m = *m / n);
    let mut var = vec![T::zero(); c];
    for row in xs.chunks(c) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            let d = *v - *m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s = *s / n);
    (mean, var)
}

/// Elementwise binary map with trailing-aligned broadcasting.
pub(crate) fn broadcast_apply<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let d = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        return Tensor::new(a.shape(), d);
    }
    let Some(out_shape) = broadcast_shape(a.shape(), b.shape()) else {
        return shape_err("ewise", a.shape(), b.shape());
    };
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); out_shape.iter().product()];
    for_each_broadcast(&out_shape, &sa, &sb, |o, oa, ia, ob, ib, len| {
        let dst = &mut out[o..o + len];
        match (ia, ib) {
            (1, 1) => {
                for (d, (x, y)) in dst.iter_mut().zip(ad[oa..oa + len].iter().zip(&bd[ob..ob + len])) {
                    *d = f(*x, *y);
                }
            }
            (1, 0) => {
                let y = bd[ob];
                for (d, x) in dst.iter_mut().zip(&ad[oa..oa + len]) {
                    *d = f(*x, y);
                }
            }
            (0, 1) => {
                let x = ad[oa];
                for (d, y) in dst.iter_mut().zip(&bd[ob..ob + len]) {
                    *d = f(x, *y);
                }
            }
            _ => {
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = f(ad[oa + j * ia], bd[ob + j * ib]);
                }
            }
        }
    });
    Tensor::new(&out_shape, out)
}

struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    batch_shape: Vec<usize>,
    // per output batch: matrix index into a and into b
    a_index: Vec<usize>,
    b_index: Vec<usize>,
}

fn plan_matmul(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 || a[a.len() - 1] != b[b.len() - 2] {
        return shape_err("matmul", a, b);
    }
    let (m, k, n) = (a[a.len() - 2], a[a.len() - 1], b[b.len() - 1]);
    let (ba, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    let Some(batch_shape) = broadcast_shape(ba, bb) else {
        return shape_err("matmul", a, b);
    };
    let sa = broadcast_strides(ba, &batch_shape);
    let sb = broadcast_strides(bb, &batch_shape);
    let count: usize = batch_shape.iter().product();
    let mut a_index = Vec::with_capacity(count);
    let mut b_index = Vec::with_capacity(count);
    if batch_shape.is_empty() {
        a_index.push(0);
        b_index.push(0);
    } else {
        for_each_broadcast(&batch_shape, &sa, &sb, |_, oa, ia, ob, ib, len| {
            for j in 0..len {
                a_index.push(oa + j * ia);
                b_index.push(ob + j * ib);
            }
        });
    }
    Ok(MatmulPlan {
        m,
        k,
        n,
        batch_shape,
        a_index,
        b_index,
    })
}

fn matmul_forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let p = plan_matmul(a.shape(), b.shape())?;
    let (m, k, n) = (p.m, p.k, p.n);
    let mut shape = p.batch_shape.clone();
    shape.extend([m, n]);
    let mut out = vec![T::zero(); shape.iter().product()];
    if b.rank() == 2 {
        // one tall product over every leading row of `a`
        let rows = a.numel() / k.max(1);
        gemm(rows, k, n, a.data(), 0, false, b.data(), 0, false, &mut out, 0, false);
    } else {
        for (bi, (&ia, &ib)) in p.a_index.iter().zip(&p.b_index).enumerate() {
            gemm(m, k, n, a.data(), ia * m * k, false, b.data(), ib * k * n, false, &mut out, bi * m * n, false);
        }
    }
    Tensor::new(&shape, out)
}

fn matmul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    want_a: bool,
    want_b: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let p = plan_matmul(a.shape(), b.shape()).expect("validated in forward");
    let (m, k, n) = (p.m, p.k, p.n);
    let mut da = want_a.then(|| vec![T::zero(); a.numel()]);
    let mut db = want_b.then(|| vec![T::zero(); b.numel()]);
    if b.rank() == 2 {
        let rows = a.numel() / k.max(1);
        if let Some(da) = da.as_mut() {
            // dA = G B^T
            gemm_t(rows, n, k, g.data(), 0, false, b.data(), 0, true, da, 0);
        }
        if let Some(db) = db.as_mut() {
            // dB = A^T G
            gemm_t(k, rows, n, a.data(), 0, true, g.data(), 0, false, db, 0);
        }
    } else {
        for (bi, (&ia, &ib)) in p.a_index.iter().zip(&p.b_index).enumerate() {
            if let Some(da) = da.as_mut() {
                gemm_acc(m, n, k, g.data(), bi * m * n, (n, 1), b.data(), ib * k * n, (1, n), da, ia * m * k);
            }
            if let Some(db) = db.as_mut() {
                gemm_acc(k, m, n, a.data(), ia * m * k, (1, k), g.data(), bi * m * n, (n, 1), db, ib * k * n);
            }
        }
    }
    (
        da.map(|d| Tensor::new(a.shape(), d).expect("shape")),
        db.map(|d| Tensor::new(b.shape(), d).expect("shape")),
    )
}

/// `c[co..] = op(a) * op(b)` where `op` optionally transposes a row-major
/// operand stored at the given offset.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ao: usize,
    at: bool,
    b: &[T],
    bo: usize,
    bt: bool,
    c: &mut [T],
    co: usize,
    accumulate: bool,
) {
    let (rsa, csa) = if at { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if bt { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    if m == 0 || n == 0 {
        return;
    }
    assert!(ao + m * k <= a.len() && bo + k * n <= b.len() && co + m * n <= c.len());
    // SAFETY: bounds checked above; strides describe dense row-major blocks.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr().add(ao),
            rsa,
            csa,
            b.as_ptr().add(bo),
            rsb,
            csb,
            beta,
            c.as_mut_ptr().add(co),
            n as isize,
            1,
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm_t<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ao: usize,
    at: bool,
    b: &[T],
    bo: usize,
    bt: bool,
    c: &mut [T],
    co: usize,
) {
    gemm(m, k, n, a, ao, at, b, bo, bt, c, co, true)
}

/// Accumulating product with explicit (row, col) strides for both operands.
#[allow(clippy::too_many_arguments)]
fn gemm_acc<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ao: usize,
    (rsa, csa): (usize, usize),
    b: &[T],
    bo: usize,
    (rsb, csb): (usize, usize),
    c: &mut [T],
    co: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let a_end = ao + (m.max(1) - 1) * rsa + (k.max(1) - 1) * csa;
    let b_end = bo + (k.max(1) - 1) * rsb + (n.max(1) - 1) * csb;
    assert!(k == 0 || (a_end < a.len() && b_end < b.len()));
    assert!(co + m * n <= c.len());
    // SAFETY: bounds checked above.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr().add(ao),
            rsa as isize,
            csa as isize,
            b.as_ptr().add(bo),
            rsb as isize,
            csb as isize,
            T::one(),
            c.as_mut_ptr().add(co),
            n as isize,
            1,
        );
    }
}

fn gather_forward<T: Real>(x: &Tensor<T>, idx: &IndexTable) -> Result<Tensor<T>> {
    let xs = x.shape();
    let (batch, n, c) = match *xs {
        [n, c] => (1, n, c),
        [b, n, c] => (b, n, c),
        _ => return shape_err("gather_rows", xs, &[idx.batch(), idx.rows(), idx.k()]),
    };
    if batch != idx.batch() || n != idx.rows() {
        return shape_err("gather_rows", xs, &[idx.batch(), idx.rows(), idx.k()]);
    }
    let k = idx.k();
    let data = x.data();
    let mut out = Vec::with_capacity(batch * n * k * c);
    for b in 0..batch {
        for i in 0..n {
            for j in 0..k {
                let src = idx.get(b, i, j);
                if src >= n {
                    return Err(Error::IndexOutOfBounds {
                        row: i,
                        slot: j,
                        index: src,
                        len: n,
                    });
                }
                out.extend_from_slice(&data[(b * n + src) * c..(b * n + src + 1) * c]);
            }
        }
    }
    let shape: Vec<usize> = if xs.len() == 2 {
        vec![n, k, c]
    } else {
        vec![batch, n, k, c]
    };
    Tensor::new(&shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::<f64>::new();
        let i = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let b = tape.constant(t(&[2, 2], &[5., 6., 7., 8.]));
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c).data(), &[5., 6., 7., 8.]);

        let a = tape.constant(t(&[1, 2], &[1., 2.]));
        let b = tape.constant(t(&[2, 1], &[3., 4.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::<f64>::new();
        let va = tape.constant(t(&[3, 4], &a));
        let vb = tape.constant(t(&[4, 2], &b));
        let c = tape.matmul(va, vb).unwrap();
        let expect = naive_matmul(&a, &b, 3, 4, 2);
        for (x, y) in tape.value(c).data().iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn batched_matmul_broadcasts_leading_axes() {
        let a: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect();
        let mut tape = Tape::<f64>::new();
        let va = tape.constant(t(&[2, 1, 2, 3], &a));
        let vb = tape.constant(t(&[2, 3, 2], &b));
        let c = tape.matmul(va, vb).unwrap();
        assert_eq!(tape.shape(c), &[2, 2, 2, 2]);
        for ba in 0..2 {
            for bb in 0..2 {
                let expect = naive_matmul(&a[ba * 6..ba * 6 + 6], &b[bb * 6..bb * 6 + 6], 2, 3, 2);
                let off = (ba * 2 + bb) * 4;
                assert_eq!(&tape.value(c).data()[off..off + 4], expect.as_slice());
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn ewise_broadcasting() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[3], &[1., 2., 3.]));
        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.add(a, z).unwrap();
        assert_eq!(tape.value(s).data(), &[1., 2., 3.]);

        let ones = tape.constant(Tensor::ones(&[4, 3, 5]));
        let twos = tape.constant(Tensor::full(&[4, 3, 1], 2.0));
        let m = tape.mul(ones, twos).unwrap();
        assert_eq!(tape.shape(m), &[4, 3, 5]);
        assert!(tape.value(m).data().iter().all(|&v| v == 2.0));

        let bad = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(tape.add(a, bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn sub_self_cancels_with_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[1., -2., 5.]));
        let d = tape.sub(x, x).unwrap();
        assert!(tape.value(d).data().iter().all(|&v| v == 0.0));
        let l = tape.sum_all(d);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0., 0., 0.]);
    }

    #[test]
    fn reduce_max_and_sum() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[1, 3], &[1., 5., 3.]));
        let m = tape.reduce(ReduceKind::Max, x, 1).unwrap();
        assert_eq!(tape.value(m).data(), &[5.]);
        let l = tape.sum_all(m);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0., 1., 0.]);

        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[1, 2], &[2., 2.]));
        let m = tape.reduce(ReduceKind::Max, x, 1).unwrap();
        let l = tape.sum_all(m);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1., 0.]);

        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[3, 2]));
        let s = tape.reduce(ReduceKind::Sum, x, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[3., 3.]);
        assert!(matches!(
            tape.reduce(ReduceKind::Sum, x, 2),
            Err(Error::Axis { .. })
        ));
    }

    #[test]
    fn masked_max_skips_pads_and_falls_back() {
        let mut tape = Tape::<f64>::new();
        // rows: 2, K = 2, C = 1
        let x = tape.param(t(&[2, 2, 1], &[9., 1., 4., 7.]));
        let m = tape
            .masked_max_neighbors(x, &[false, true, false, false])
            .unwrap();
        assert_eq!(tape.value(m).data(), &[1., 7.]);
        let l = tape.sum_all(m);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0., 1., 0., 1.]);
    }

    #[test]
    fn gather_lookup_and_scatter() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[3, 1], &[10., 20., 30.]));
        let idx = Arc::new(IndexTable::new(1, 3, 2, vec![2, 0, 1, 1, 0, 0]).unwrap());
        let y = tape.gather_rows(x, &idx).unwrap();
        assert_eq!(&tape.value(y).data()[..2], &[30., 10.]);
        let l = tape.sum_all(y);
        let g = tape.backward(l).unwrap();
        // multiplicities: 0 appears 3 times, 1 twice, 2 once
        assert_eq!(g.get(x).unwrap().data(), &[3., 2., 1.]);

        let bad = Arc::new(IndexTable::new(1, 3, 1, vec![0, 5, 1]).unwrap());
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[3, 1]));
        match tape.gather_rows(x, &bad) {
            Err(Error::IndexOutOfBounds { row, slot, .. }) => assert_eq!((row, slot), (1, 0)),
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn concat_shapes_and_copy() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3, 3]));
        let b = tape.constant(Tensor::ones(&[2, 3, 1]));
        let c = tape.concat(&[a, b], 2).unwrap();
        assert_eq!(tape.shape(c), &[2, 3, 4]);
        let single = tape.concat(&[b], 0).unwrap();
        assert_eq!(tape.value(single), tape.value(b));
        let bad = tape.constant(Tensor::zeros(&[2, 2, 1]));
        assert!(tape.concat(&[a, bad], 2).is_err());
    }

    #[test]
    fn activations() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[-1., 2., 0.]));
        let r = tape.activation(x, Activation::Relu);
        assert_eq!(tape.value(r).data(), &[0., 2., 0.]);
        let l = tape.activation(x, Activation::LeakyRelu(0.2));
        assert!((tape.value(l).data()[0] + 0.2).abs() < 1e-15);
        let s = tape.sum_all(l);
        let g = tape.backward(s).unwrap();
        // slope of the positive branch at exactly zero
        assert_eq!(g.get(x).unwrap().data(), &[0.2, 1., 1.]);
    }

    #[test]
    fn batch_norm_modes() {
        let st = BatchNormState::<f64>::new(2);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[5, 2], 3.0));
        let gamma = tape.param(Tensor::ones(&[2]));
        let beta = tape.param(t(&[2], &[0.5, -1.0]));
        let (y, stats) = tape.batch_norm(x, gamma, beta, &st, true).unwrap();
        assert!(stats.is_some());
        assert_eq!(tape.value(y).data(), &[0.5, -1.0, 0.5, -1.0, 0.5, -1.0, 0.5, -1.0, 0.5, -1.0]);

        let data: Vec<f64> = vec![1., 2., 3., 4., 5., 6., 7., 8.];
        let x = tape.constant(t(&[4, 2], &data));
        let beta0 = tape.param(Tensor::zeros(&[2]));
        let (y, _) = tape.batch_norm(x, gamma, beta0, &st, true).unwrap();
        for ch in 0..2 {
            let col: Vec<f64> = (0..4).map(|r| tape.value(y).data()[r * 2 + ch]).collect();
            let mean = col.iter().sum::<f64>() / 4.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-5);
        }

        let (e1, s1) = tape.batch_norm(x, gamma, beta, &st, false).unwrap();
        let (e2, _) = tape.batch_norm(x, gamma, beta, &st, false).unwrap();
        assert!(s1.is_none());
        assert_eq!(tape.value(e1), tape.value(e2));

        let wrong = BatchNormState::<f64>::new(3);
        assert!(tape.batch_norm(x, gamma, beta, &wrong, true).is_err());
    }

    #[test]
    fn backward_contract() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[3], &[0.1, 0.2, 0.3]));
        let x = tape.constant(t(&[3], &[4., 5., 6.]));
        let u = tape.param(t(&[2], &[1., 1.]));
        let wx = tape.mul(w, x).unwrap();
        assert!(matches!(tape.backward(wx), Err(Error::NonScalarLoss(_))));
        let loss = tape.sum_all(wx);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[4., 5., 6.]);
        assert_eq!(g.get(u).unwrap().data(), &[0., 0.]);
        assert!(g.get(x).is_none());
        assert!(matches!(tape.backward(loss), Err(Error::StaleTape)));
        tape.reset();
        assert!(tape.is_empty());
    }

    #[test]
    fn cross_entropy_values() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[2, 5]));
        let l = tape.cross_entropy(logits, &[0, 3]).unwrap();
        assert!((tape.value(l).item() - 5f64.ln()).abs() < 1e-12);
        let big = tape.constant(t(&[1, 3], &[100., 0., 0.]));
        let l = tape.cross_entropy(big, &[0]).unwrap();
        assert!(tape.value(l).item() < 1e-30);
        assert!(matches!(
            tape.cross_entropy(big, &[3]),
            Err(Error::LabelRange { .. })
        ));
    }

    #[test]
    fn ones_broadcast_multiply_is_exact() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 3], &[0.1, -3.3, 1e-9, 7.0, 2.5, -0.0]));
        let o = tape.constant(Tensor::ones(&[1, 3]));
        let y = tape.mul(x, o).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }
}
