//! Fused per-edge normalisation, activation and neighbour reduction.
//!
//! Edge tensors (`B x N x K x C`) are the largest values in the network.
//! This op never stores one: pre-activations are regenerated from their
//! source in every pass, forward and backward.

use std::sync::Arc;

use super::{Activation, BatchNormState, BatchStats, Op, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::spatial::IndexTable;
use crate::tensor::{Real, Tensor};

/// Where per-edge pre-activations come from.
#[derive(Clone, Debug)]
pub enum EdgeInput {
    /// `y[b, idx[b, i, j]] - y[b, i]` for `y: [B, N, C]`.
    GatherDiff { y: Var, idx: Arc<IndexTable> },
    /// An explicit `[B, N, K, C]` tensor.
    Dense(Var),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeReduction {
    /// `out[i] = sum_j w_ij h_ij`.
    Sum,
    /// `out[i] = max_j w_ij h_ij` over valid slots, falling back to every
    /// slot when a row has none.
    Max,
}

/// Parameters of [`Tape::edge_reduce`].
pub struct EdgeReduceSpec<'a, T> {
    pub gamma: Var,
    pub beta: Var,
    pub state: &'a BatchNormState<T>,
    pub training: bool,
    pub activation: Activation,
    /// Optional `[B, N, K]` per-edge weight.
    pub weight: Option<Var>,
    pub reduction: EdgeReduction,
    /// `B * N * K` validity flags, consulted by [`EdgeReduction::Max`].
    pub valid: &'a [bool],
}

pub(super) struct EdgeRecord<T> {
    pub input: EdgeInput,
    pub gamma: Var,
    pub beta: Var,
    pub weight: Option<Var>,
    pub reduction: EdgeReduction,
    pub dims: [usize; 4],
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
    pub training: bool,
    pub slope: T,
    /// Winning slot per output element (max only).
    pub argmax: Vec<u32>,
}

/// Borrowed view that materialises one edge row at a time.
enum Rows<'a, T> {
    Gather { y: &'a [T], idx: &'a IndexTable, n: usize, c: usize },
    Dense { x: &'a [T], k: usize, c: usize },
}

impl<'a, T: Real> Rows<'a, T> {
    #[inline]
    fn row<'b>(&'b self, r: usize, j: usize, buf: &'b mut [T]) -> &'b [T] {
        match *self {
            Rows::Gather { y, idx, n, c } => {
                let (b, i) = (r / n, r % n);
                let nb = idx.get(b, i, j);
                let yi = &y[r * c..(r + 1) * c];
                let yj = &y[(b * n + nb) * c..(b * n + nb + 1) * c];
                for ((o, a), z) in buf.iter_mut().zip(yj).zip(yi) {
                    *o = *a - *z;
                }
                buf
            }
            Rows::Dense { x, k, c } => &x[(r * k + j) * c..(r * k + j + 1) * c],
        }
    }

    /// Channel `ch` of edge `(r, j)`.
    #[inline]
    fn at(&self, r: usize, j: usize, ch: usize) -> T {
        match *self {
            Rows::Gather { y, idx, n, c } => {
                let (b, i) = (r / n, r % n);
                y[(b * n + idx.get(b, i, j)) * c + ch] - y[r * c + ch]
            }
            Rows::Dense { x, k, c } => x[(r * k + j) * c + ch],
        }
    }
}

impl<T: Real> Tape<T> {
    fn edge_rows<'a>(&'a self, input: &'a EdgeInput, n: usize, k: usize, c: usize) -> Rows<'a, T> {
        match input {
            EdgeInput::GatherDiff { y, idx } => Rows::Gather {
                y: self.value(*y).data(),
                idx,
                n,
                c,
            },
            EdgeInput::Dense(x) => Rows::Dense {
                x: self.value(*x).data(),
                k,
                c,
            },
        }
    }

    /// `reduce_j(w_ij * act(bn(e_ij)))` over the neighbour axis, where the
    /// edge values `e_ij` come from `input` and batch-norm statistics are
    /// taken over every edge. Returns `[B, N, C]` and, in training mode, the
    /// batch statistics for the caller to fold into `spec.state`.
    pub fn edge_reduce(&mut self, input: EdgeInput, spec: EdgeReduceSpec<'_, T>) -> Result<(Var, Option<BatchStats<T>>)> {
        let dims = match &input {
            EdgeInput::GatherDiff { y, idx } => {
                let s = self.shape(*y);
                if s.len() != 3 || s[0] != idx.batch() || s[1] != idx.rows() {
                    return shape_err("edge_reduce", s, &[idx.batch(), idx.rows(), idx.k()]);
                }
                let (b, n) = (s[0], s[1]);
                for bi in 0..b {
                    for i in 0..n {
                        for j in 0..idx.k() {
                            let v = idx.get(bi, i, j);
                            if v >= n {
                                return Err(Error::IndexOutOfBounds {
                                    row: i,
                                    slot: j,
                                    index: v,
                                    len: n,
                                });
                            }
                        }
                    }
                }
                [b, n, idx.k(), s[2]]
            }
            EdgeInput::Dense(x) => match *self.shape(*x) {
                [b, n, k, c] => [b, n, k, c],
                ref s => return shape_err("edge_reduce", s, &[0, 0, 0, 0]),
            },
        };
        let [b, n, k, c] = dims;
        let rows = b * n;
        let edges = rows * k;
        if self.shape(spec.gamma) != [c] || self.shape(spec.beta) != [c] || spec.state.channels() != c {
            return shape_err("edge_reduce", &dims, &[spec.state.channels()]);
        }
        if let Some(w) = spec.weight {
            if self.shape(w) != [b, n, k] {
                return shape_err("edge_reduce", self.shape(w), &[b, n, k]);
            }
        }
        if spec.valid.len() != edges {
            return shape_err("edge_reduce", &dims, &[spec.valid.len()]);
        }

        let src = self.edge_rows(&input, n, k, c);
        let mut buf = vec![T::zero(); c];
        let (mean, var) = if spec.training {
            let mut sum = vec![0f64; c];
            for r in 0..rows {
                for j in 0..k {
                    for (s, v) in sum.iter_mut().zip(src.row(r, j, &mut buf)) {
                        *s += v.as_f64();
                    }
                }
            }
            let m = edges.max(1) as f64;
            let mean: Vec<f64> = sum.iter().map(|s| s / m).collect();
            let mut sq = vec![0f64; c];
            for r in 0..rows {
                for j in 0..k {
                    for ((s, v), mu) in sq.iter_mut().zip(src.row(r, j, &mut buf)).zip(&mean) {
                        let d = v.as_f64() - mu;
                        *s += d * d;
                    }
                }
            }
            let var: Vec<f64> = sq.iter().map(|s| s / m).collect();
            (mean, var)
        } else {
            (
                spec.state.running_mean.iter().map(|v| v.as_f64()).collect(),
                spec.state.running_var.iter().map(|v| v.as_f64()).collect(),
            )
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::from_f64(1.0 / (v + spec.state.eps).sqrt())).collect();
        let mean_t: Vec<T> = mean.iter().map(|&v| T::from_f64(v)).collect();
        let gam = self.value(spec.gamma).data();
        let bet = self.value(spec.beta).data();
        let scale: Vec<T> = gam.iter().zip(&inv_std).map(|(g, s)| *g * *s).collect();
        let shift: Vec<T> = bet.iter().zip(&scale).zip(&mean_t).map(|((b, s), m)| *b - *s * *m).collect();
        let slope = T::from_f64(match spec.activation {
            Activation::Relu => 0.0,
            Activation::LeakyRelu(s) => s,
        });
        let weights = spec.weight.map(|w| self.value(w).data());

        let mut out = vec![T::zero(); rows * c];
        let mut argmax = Vec::new();
        let mut h = vec![T::zero(); c];
        match spec.reduction {
            EdgeReduction::Sum => {
                for r in 0..rows {
                    let acc = &mut out[r * c..(r + 1) * c];
                    for j in 0..k {
                        let w = weights.map_or(T::one(), |w| w[r * k + j]);
                        let pre = src.row(r, j, &mut buf);
                        for (((a, p), sc), sh) in acc.iter_mut().zip(pre).zip(&scale).zip(&shift) {
                            let z = *p * *sc + *sh;
                            let hv = if z >= T::zero() { z } else { slope * z };
                            *a += w * hv;
                        }
                    }
                }
            }
            EdgeReduction::Max => {
                argmax = vec![0u32; rows * c];
                for r in 0..rows {
                    let flags = &spec.valid[r * k..(r + 1) * k];
                    let any = flags.iter().any(|&f| f);
                    let best = &mut out[r * c..(r + 1) * c];
                    let arg = &mut argmax[r * c..(r + 1) * c];
                    let mut first = true;
                    for j in 0..k {
                        if any && !flags[j] {
                            continue;
                        }
                        let w = weights.map_or(T::one(), |w| w[r * k + j]);
                        let pre = src.row(r, j, &mut buf);
                        for (((hv, p), sc), sh) in h.iter_mut().zip(pre).zip(&scale).zip(&shift) {
                            let z = *p * *sc + *sh;
                            *hv = w * if z >= T::zero() { z } else { slope * z };
                        }
                        if first {
                            best.copy_from_slice(&h);
                            arg.iter_mut().for_each(|a| *a = j as u32);
                            first = false;
                        } else {
                            for ((bv, a), hv) in best.iter_mut().zip(arg.iter_mut()).zip(&h) {
                                if *hv > *bv {
                                    *bv = *hv;
                                    *a = j as u32;
                                }
                            }
                        }
                    }
                }
            }
        }

        let stats = spec.training.then(|| {
            let corr = if edges > 1 { edges as f64 / (edges as f64 - 1.0) } else { 1.0 };
            BatchStats {
                mean: mean_t.clone(),
                unbiased_var: var.iter().map(|v| T::from_f64(v * corr)).collect(),
            }
        });
        let mut deps = match &input {
            EdgeInput::GatherDiff { y, .. } => vec![*y],
            EdgeInput::Dense(x) => vec![*x],
        };
        deps.extend([spec.gamma, spec.beta]);
        deps.extend(spec.weight);
        let rg = self.any_grad(&deps);
        let t = Tensor::new(&[b, n, c], out)?;
        let v = self.push(
            t,
            rg,
            Op::EdgeReduce(Box::new(EdgeRecord {
                input,
                gamma: spec.gamma,
                beta: spec.beta,
                weight: spec.weight,
                reduction: spec.reduction,
                dims,
                mean: mean_t,
                inv_std,
                training: spec.training,
                slope,
                argmax,
            })),
        );
        Ok((v, stats))
    }

    pub(super) fn edge_reduce_vjp(&self, rec: &EdgeRecord<T>, g: &[T]) -> Result<Vec<(Var, Tensor<T>)>> {
        let [b, n, k, c] = rec.dims;
        let rows = b * n;
        let edges = rows * k;
        let src = self.edge_rows(&rec.input, n, k, c);
        let gam = self.value(rec.gamma).data();
        let bet = self.value(rec.beta).data();
        let weights = rec.weight.map(|w| self.value(w).data());
        let input_var = match &rec.input {
            EdgeInput::GatherDiff { y, .. } => *y,
            EdgeInput::Dense(x) => *x,
        };
        let (mean, inv, slope) = (&rec.mean[..], &rec.inv_std[..], rec.slope);
        let act = |z: T| if z >= T::zero() { (z, T::one()) } else { (slope * z, slope) };
        // z is formed exactly as in the forward pass so the branch agrees
        let scale: Vec<T> = (0..c).map(|ch| gam[ch] * inv[ch]).collect();
        let shift: Vec<T> = (0..c).map(|ch| bet[ch] - scale[ch] * mean[ch]).collect();

        // pass A: dL/dz through reduction, weight and activation, plus the
        // per-channel sums the normalisation backward needs
        let mut dgamma = vec![0f64; c];
        let mut dbeta = vec![0f64; c];
        let mut dweight = rec.weight.map(|_| vec![T::zero(); edges]);
        // dz of the winning edge per output (max only; sums recompute it)
        let mut dz = vec![T::zero(); if rec.reduction == EdgeReduction::Max { rows * c } else { 0 }];
        let mut buf = vec![T::zero(); c];
        let mut row_b = vec![T::zero(); c];
        let mut row_g = vec![T::zero(); c];
        for r in 0..rows {
            let grow = &g[r * c..(r + 1) * c];
            row_b.fill(T::zero());
            row_g.fill(T::zero());
            match rec.reduction {
                EdgeReduction::Sum => {
                    for j in 0..k {
                        let e = r * k + j;
                        let w = weights.map_or(T::one(), |w| w[e]);
                        let pre = src.row(r, j, &mut buf);
                        let mut dw = T::zero();
                        for ch in 0..c {
                            let xh = (pre[ch] - mean[ch]) * inv[ch];
                            let z = pre[ch] * scale[ch] + shift[ch];
                            let da = if z >= T::zero() { T::one() } else { slope };
                            dw += z * da * grow[ch];
                            let d = w * grow[ch] * da;
                            row_b[ch] += d;
                            row_g[ch] += d * xh;
                        }
                        if let Some(dwv) = dweight.as_mut() {
                            dwv[e] = dw;
                        }
                    }
                }
                EdgeReduction::Max => {
                    for ch in 0..c {
                        let j = rec.argmax[r * c + ch] as usize;
                        let e = r * k + j;
                        let w = weights.map_or(T::one(), |w| w[e]);
                        let p = src.at(r, j, ch);
                        let xh = (p - mean[ch]) * inv[ch];
                        let (hv, da) = act(p * scale[ch] + shift[ch]);
                        let d = w * grow[ch] * da;
                        dz[r * c + ch] = d;
                        row_b[ch] += d;
                        row_g[ch] += d * xh;
                        if let Some(dwv) = dweight.as_mut() {
                            dwv[e] += hv * grow[ch];
                        }
                    }
                }
            }
            for ch in 0..c {
                dbeta[ch] += row_b[ch].as_f64();
                dgamma[ch] += row_g[ch].as_f64();
            }
        }

        let mut res = Vec::new();
        if self.requires_grad(input_var) {
            // dpre = coef (dz - mean(dz) - xhat mean(dz xhat)), which is
            // coef dz + alpha + beta pre: the coupling term is affine in pre
            let m = edges.max(1) as f64;
            let coef = &scale;
            let (alpha, beta): (Vec<T>, Vec<T>) = (0..c)
                .map(|ch| {
                    if !rec.training {
                        return (T::zero(), T::zero());
                    }
                    let mb = T::from_f64(dbeta[ch] / m);
                    let mg = T::from_f64(dgamma[ch] / m);
                    (coef[ch] * (mean[ch] * inv[ch] * mg - mb), -coef[ch] * inv[ch] * mg)
                })
                .unzip();
            let dense_dz = rec.reduction == EdgeReduction::Sum;
            let grow_of = |r: usize| &g[r * c..(r + 1) * c];
            // coef * dz for one edge channel of a sum, from its pre-activation
            let sum_dz = |p: T, ch: usize, wg: T| {
                let z = p * coef[ch] + shift[ch];
                coef[ch] * wg * if z >= T::zero() { T::one() } else { slope }
            };
            let mut d = vec![T::zero(); self.value(input_var).numel()];
            if rec.training || dense_dz {
                let mut di = vec![T::zero(); c];
                for r in 0..rows {
                    match &rec.input {
                        EdgeInput::GatherDiff { y, idx } => {
                            let y = self.value(*y).data();
                            let (bi, i) = (r / n, r % n);
                            let yi = &y[r * c..(r + 1) * c];
                            di.fill(T::zero());
                            for j in 0..k {
                                let nb = (bi * n + idx.get(bi, i, j)) * c;
                                let yj = &y[nb..nb + c];
                                let dj = &mut d[nb..nb + c];
                                let wg = weights.map_or(T::one(), |w| w[r * k + j]);
                                for ch in 0..c {
                                    let p = yj[ch] - yi[ch];
                                    let mut v = alpha[ch] + beta[ch] * p;
                                    if dense_dz {
                                        v += sum_dz(p, ch, wg * grow_of(r)[ch]);
                                    }
                                    dj[ch] += v;
                                    di[ch] += v;
                                }
                            }
                            for (o, v) in d[r * c..(r + 1) * c].iter_mut().zip(&di) {
                                *o -= *v;
                            }
                        }
                        EdgeInput::Dense(x) => {
                            let x = self.value(*x).data();
                            for e in r * k..(r + 1) * k {
                                let wg = weights.map_or(T::one(), |w| w[e]);
                                for ch in 0..c {
                                    let p = x[e * c + ch];
                                    let mut v = alpha[ch] + beta[ch] * p;
                                    if dense_dz {
                                        v += sum_dz(p, ch, wg * grow_of(r)[ch]);
                                    }
                                    d[e * c + ch] = v;
                                }
                            }
                        }
                    }
                }
            }
            if !dense_dz {
                for r in 0..rows {
                    for ch in 0..c {
                        let j = rec.argmax[r * c + ch] as usize;
                        let v = coef[ch] * dz[r * c + ch];
                        match &rec.input {
                            EdgeInput::GatherDiff { idx, .. } => {
                                let (bi, i) = (r / n, r % n);
                                d[(bi * n + idx.get(bi, i, j)) * c + ch] += v;
                                d[r * c + ch] -= v;
                            }
                            EdgeInput::Dense(_) => d[(r * k + j) * c + ch] += v,
                        }
                    }
                }
            }
            res.push((input_var, Tensor::new(self.value(input_var).shape(), d)?));
        }
        if self.requires_grad(rec.gamma) {
            res.push((rec.gamma, Tensor::new(&[c], dgamma.iter().map(|&v| T::from_f64(v)).collect())?));
        }
        if self.requires_grad(rec.beta) {
            res.push((rec.beta, Tensor::new(&[c], dbeta.iter().map(|&v| T::from_f64(v)).collect())?));
        }
        if let (Some(w), Some(d)) = (rec.weight, dweight) {
            if self.requires_grad(w) {
                res.push((w, Tensor::new(&[b, n, k], d)?));
            }
        }
        Ok(res)
    }
}
