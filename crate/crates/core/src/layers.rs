//! Learned operators: shared MLP, EdgeConv and the dual-channel VAConv.
//!
//! All operators take a leading batch axis (`[B, N, C]`) and one neighbour
//! graph per sample, stacked into a [`GraphBatch`].

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, BatchNormState, BatchStats, EdgeInput, EdgeReduceSpec, EdgeReduction, ReduceKind, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::geometry::AngularMode;
use crate::spatial::{IndexTable, NeighborGraph};
use crate::tensor::{Real, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const DEFAULT_ACT: Activation = Activation::LeakyRelu(LEAKY_SLOPE);

/// How VAConv's local channel aggregates weighted edge responses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    #[default]
    Sum,
    WeightedMax,
}

impl std::str::FromStr for AggregationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Self::Sum),
            "weighted_max" => Ok(Self::WeightedMax),
            other => Err(Error::Config(format!("unknown aggregation_mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sum => "sum",
            Self::WeightedMax => "weighted_max",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BnId(usize);

/// Named trainable tensors plus batch-norm running statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    bn_names: Vec<String>,
    bn: Vec<BatchNormState<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            bn_names: Vec::new(),
            bn: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn add_bn(&mut self, name: impl Into<String>, channels: usize) -> BnId {
        self.bn_names.push(name.into());
        self.bn.push(BatchNormState::new(channels));
        BnId(self.bn.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.values[i])
    }

    pub fn bn_names(&self) -> &[String] {
        &self.bn_names
    }

    pub fn bn_states(&self) -> &[BatchNormState<T>] {
        &self.bn
    }

    pub fn bn_states_mut(&mut self) -> &mut [BatchNormState<T>] {
        &mut self.bn
    }

    pub fn bn(&self, id: BnId) -> &BatchNormState<T> {
        &self.bn[id.0]
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    pub fn apply_bn_updates(&mut self, updates: &[(BnId, BatchStats<T>)]) {
        for (id, stats) in updates {
            self.bn[id.0].update(stats);
        }
    }

    /// Same parameters converted to another element type.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v.cast()).collect(),
            bn_names: self.bn_names.clone(),
            bn: self
                .bn
                .iter()
                .map(|s| BatchNormState {
                    running_mean: s.running_mean.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                    running_var: s.running_var.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                    momentum: s.momentum,
                    eps: s.eps,
                })
                .collect(),
        }
    }
}

/// Per-edge geometry captured by an instrumented forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometryRecord {
    pub layer: String,
    pub rel: Vec<f64>,
    pub dist: Vec<f64>,
    pub elev: Vec<f64>,
    pub azim: Vec<f64>,
    pub m_weight: Vec<f64>,
}

/// State of one forward pass: the tape, bound parameters and side outputs.
pub struct Ctx<'a, T: Real> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a ParamStore<T>,
    pub training: bool,
    vars: Vec<Var>,
    pub bn_updates: Vec<(BnId, BatchStats<T>)>,
    pub probe: Option<Vec<GeometryRecord>>,
}

impl<'a, T: Real> Ctx<'a, T> {
    /// Binds every parameter of `store` onto `tape`, as gradient leaves when
    /// `requires_grad` is set.
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, training: bool, requires_grad: bool) -> Self {
        let vars = store
            .values
            .iter()
            .map(|v| tape.leaf(v.clone(), requires_grad))
            .collect();
        Self {
            tape,
            store,
            training,
            vars,
            bn_updates: Vec::new(),
            probe: None,
        }
    }

    /// Uses already-recorded leaves, one per parameter in storage order.
    pub fn with_vars(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, training: bool, vars: Vec<Var>) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::InvalidArgument(format!("{} leaves for {} parameters", vars.len(), store.len())));
        }
        Ok(Self {
            tape,
            store,
            training,
            vars,
            bn_updates: Vec::new(),
            probe: None,
        })
    }

    pub fn with_probe(mut self) -> Self {
        self.probe = Some(Vec::new());
        self
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Stacked neighbour graphs of a batch plus the flattened validity mask
/// (`true` for real neighbours, `false` for self-pads).
#[derive(Clone, Debug)]
pub struct GraphBatch {
    pub idx: Arc<IndexTable>,
    pub valid: Vec<bool>,
}

impl GraphBatch {
    pub fn new(graphs: &[&NeighborGraph]) -> Result<Self> {
        let idx = Arc::new(IndexTable::stack(graphs)?);
        let valid = graphs.iter().flat_map(|g| g.pad_mask.iter().map(|p| !p)).collect();
        Ok(Self { idx, valid })
    }

    pub fn batch(&self) -> usize {
        self.idx.batch()
    }

    pub fn n(&self) -> usize {
        self.idx.rows()
    }

    pub fn k(&self) -> usize {
        self.idx.k()
    }

    fn valid_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.valid.iter().map(|&v| if v { T::one() } else { T::zero() }).collect();
        Tensor::new(&[self.batch(), self.n(), self.k()], data).expect("mask extent")
    }

    fn check(&self, op: &'static str, shape: &[usize]) -> Result<()> {
        if shape.len() != 3 || shape[0] != self.batch() || shape[1] != self.n() {
            return shape_err(op, shape, &[self.batch(), self.n(), self.k()]);
        }
        Ok(())
    }
}

/// Kaiming-uniform bound for a layer with `fan_in` inputs feeding `act`.
pub fn kaiming_bound(fan_in: usize, act: Option<Activation>) -> f64 {
    let gain = match act {
        Some(Activation::Relu) => 2f64.sqrt(),
        Some(Activation::LeakyRelu(a)) => (2.0 / (1.0 + a * a)).sqrt(),
        None => 1.0,
    };
    gain * (3.0 / fan_in as f64).sqrt()
}

/// One pointwise layer: `act(bn(x W + b))`, each stage optional.
#[derive(Clone, Debug)]
pub struct Dense {
    pub cin: usize,
    pub cout: usize,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub norm: Option<(ParamId, ParamId, BnId)>,
    pub act: Option<Activation>,
}

impl Dense {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        bias: bool,
        norm: bool,
        act: Option<Activation>,
    ) -> Self {
        let bound = kaiming_bound(cin, act);
        let w: Vec<T> = (0..cin * cout)
            .map(|_| T::from_f64(rng.random_range(-bound..bound)))
            .collect();
        let weight = store.add(format!("{name}.weight"), Tensor::new(&[cin, cout], w).expect("extent"));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        let norm = norm.then(|| {
            (
                store.add(format!("{name}.bn.gamma"), Tensor::ones(&[cout])),
                store.add(format!("{name}.bn.beta"), Tensor::zeros(&[cout])),
                store.add_bn(format!("{name}.bn"), cout),
            )
        });
        Self {
            cin,
            cout,
            weight,
            bias,
            norm,
            act,
        }
    }

    /// `x W` over the last axis.
    pub fn linear<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let c = *ctx.tape.shape(x).last().unwrap_or(&0);
        if c != self.cin {
            return shape_err("dense", ctx.tape.shape(x), &[self.cin, self.cout]);
        }
        let w = ctx.var(self.weight);
        ctx.tape.matmul(x, w)
    }

    /// Bias, normalisation and activation applied to a linear response.
    pub fn finish<T: Real>(&self, ctx: &mut Ctx<'_, T>, mut y: Var) -> Result<Var> {
        if let Some(b) = self.bias {
            let b = ctx.var(b);
            y = ctx.tape.add(y, b)?;
        }
        if let Some((g, b, id)) = self.norm {
            let (g, b) = (ctx.var(g), ctx.var(b));
            let (out, stats) = ctx.tape.batch_norm(y, g, b, ctx.store.bn(id), ctx.training)?;
            if let Some(s) = stats {
                ctx.bn_updates.push((id, s));
            }
            y = out;
        }
        if let Some(a) = self.act {
            y = ctx.tape.activation(y, a);
        }
        Ok(y)
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.linear(ctx, x)?;
        self.finish(ctx, y)
    }

    /// `reduce_j(w_ij * finish(pre_ij))` for linear responses `pre` given per
    /// edge. Uses the fused kernel when the layer is bias-free with norm and
    /// activation, which is how every edge layer is built.
    pub fn finish_edges<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        pre: EdgeInput,
        weight: Option<Var>,
        reduction: EdgeReduction,
        graph: &GraphBatch,
    ) -> Result<Var> {
        if let (None, Some((g, b, id)), Some(act)) = (self.bias, self.norm, self.act) {
            let spec = EdgeReduceSpec {
                gamma: ctx.var(g),
                beta: ctx.var(b),
                state: ctx.store.bn(id),
                training: ctx.training,
                activation: act,
                weight,
                reduction,
                valid: &graph.valid,
            };
            let (out, stats) = ctx.tape.edge_reduce(pre, spec)?;
            if let Some(s) = stats {
                ctx.bn_updates.push((id, s));
            }
            return Ok(out);
        }
        let e = match pre {
            EdgeInput::GatherDiff { y, .. } => edge_features(ctx.tape, y, graph)?,
            EdgeInput::Dense(e) => e,
        };
        let mut h = self.finish(ctx, e)?;
        if let Some(w) = weight {
            let s = ctx.tape.shape(w).to_vec();
            let w = ctx.tape.reshape(w, &[s[0], s[1], s[2], 1])?;
            h = ctx.tape.mul(h, w)?;
        }
        match reduction {
            EdgeReduction::Sum => ctx.tape.reduce(ReduceKind::Sum, h, 2),
            EdgeReduction::Max => ctx.tape.masked_max_neighbors(h, &graph.valid),
        }
    }
}

/// Stack of pointwise layers applied independently to every row.
#[derive(Clone, Debug)]
pub struct SharedMlp {
    pub layers: Vec<Dense>,
}

impl SharedMlp {
    /// Hidden layers get `bias = false`, batch norm and the default
    /// activation; `widths` lists every channel extent including the input.
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidArgument(format!("{name}: bad widths {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(store, rng, &format!("{name}.{i}"), w[0], w[1], false, true, Some(DEFAULT_ACT)))
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].cout != pair[1].cin {
                return shape_err("shared_mlp", &[pair[0].cin, pair[0].cout], &[pair[1].cin, pair[1].cout]);
            }
        }
        Ok(Self { layers })
    }

    pub fn cin(&self) -> usize {
        self.layers[0].cin
    }

    pub fn cout(&self) -> usize {
        self.layers.last().map(|l| l.cout).unwrap_or(0)
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, mut x: Var) -> Result<Var> {
        for l in &self.layers {
            x = l.forward(ctx, x)?;
        }
        Ok(x)
    }
}

/// `D[b, i, j] = x[b, idx[b, i, j]] - x[b, i]`; self-pads give zero.
pub fn edge_features<T: Real>(tape: &mut Tape<T>, x: Var, graph: &GraphBatch) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    graph.check("edge_features", &shape)?;
    let (b, n, c) = (shape[0], shape[1], shape[2]);
    let nb = tape.gather_rows(x, &graph.idx)?;
    let centre = tape.reshape(x, &[b, n, 1, c])?;
    tape.sub(nb, centre)
}

/// Per-edge geometric quantities as tape nodes, all `[B, N, K]` except `rel`.
#[derive(Clone, Copy, Debug)]
pub struct EdgeGeometryVars {
    pub rel: Var,
    pub dist: Var,
    pub elev: Var,
    pub azim: Var,
    pub m_weight: Var,
}

impl EdgeGeometryVars {
    pub fn compute<T: Real>(tape: &mut Tape<T>, positions: Var, graph: &GraphBatch) -> Result<Self> {
        let rel = edge_features(tape, positions, graph)?;
        if tape.shape(rel)[3] != 3 {
            return shape_err("edge_geometry", tape.shape(positions), &[3]);
        }
        let dist = tape.norm(rel)?;
        let elev = tape.elevation(rel, dist)?;
        let azim = tape.azimuth(rel)?;
        let m_weight = tape.distance_attention(dist)?;
        Ok(Self {
            rel,
            dist,
            elev,
            azim,
            m_weight,
        })
    }

    /// `angular(E, A) * m * valid`, the scalar weight of every edge.
    pub fn edge_weight<T: Real>(&self, tape: &mut Tape<T>, mode: AngularMode, graph: &GraphBatch) -> Result<Var> {
        let ang = match mode {
            AngularMode::CosOfRatio => {
                let ce = tape.cos(self.elev);
                let ca = tape.cos(self.azim);
                tape.mul(ce, ca)?
            }
            AngularMode::Ratio => tape.mul(self.elev, self.azim)?,
        };
        let w = tape.mul(ang, self.m_weight)?;
        let mask = tape.constant(graph.valid_tensor());
        tape.mul(w, mask)
    }

    fn record<T: Real>(&self, tape: &Tape<T>, layer: &str) -> GeometryRecord {
        let grab = |v: Var| tape.value(v).data().iter().map(|x| x.as_f64()).collect();
        GeometryRecord {
            layer: layer.to_string(),
            rel: grab(self.rel),
            dist: grab(self.dist),
            elev: grab(self.elev),
            azim: grab(self.azim),
            m_weight: grab(self.m_weight),
        }
    }
}

/// EdgeConv: `out[i] = max_j mlp(concat(x_i, x_j - x_i))` over valid slots.
#[derive(Clone, Debug)]
pub struct EdgeConv {
    pub name: String,
    pub mlp: Dense,
}

impl EdgeConv {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Self {
        let mlp = Dense::new(store, rng, &format!("{name}.mlp"), 2 * cin, cout, false, true, Some(DEFAULT_ACT));
        Self {
            name: name.to_string(),
            mlp,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var, graph: &GraphBatch) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        graph.check("edgeconv", &shape)?;
        let (b, n, c) = (shape[0], shape[1], shape[2]);
        if 2 * c != self.mlp.cin {
            return shape_err("edgeconv", &shape, &[self.mlp.cin]);
        }
        let k = graph.k();
        let d = edge_features(ctx.tape, x, graph)?;
        let centre = ctx.tape.reshape(x, &[b, n, 1, c])?;
        let ones = ctx.tape.constant(Tensor::ones(&[1, 1, k, 1]));
        let centre = ctx.tape.mul(centre, ones)?;
        let e = ctx.tape.concat(&[centre, d], 3)?;
        let pre = self.mlp.linear(ctx, e)?;
        self.mlp.finish_edges(ctx, EdgeInput::Dense(pre), None, EdgeReduction::Max, graph)
    }
}

/// VAConv: a geometry-weighted local channel plus a distance-attended
/// global channel, summed.
#[derive(Clone, Debug)]
pub struct VaConv {
    pub name: String,
    pub radius: f64,
    pub aggregation: AggregationMode,
    pub angular: AngularMode,
    /// H, applied to edge features `D_ij`.
    pub edge: Dense,
    /// `concat(rel, dist)` (4 channels) to `C_in`.
    pub attn: Dense,
    /// `C_in` to `C_out`, applied to `x ⊙ a`.
    pub global: Dense,
}

impl VaConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        radius: f64,
        aggregation: AggregationMode,
        angular: AngularMode,
    ) -> Self {
        let edge = Dense::new(store, rng, &format!("{name}.edge"), cin, cout, false, true, Some(DEFAULT_ACT));
        let attn = Dense::new(store, rng, &format!("{name}.attn"), 4, cin, false, true, Some(DEFAULT_ACT));
        let global = Dense::new(store, rng, &format!("{name}.global"), cin, cout, false, true, Some(DEFAULT_ACT));
        Self {
            name: name.to_string(),
            radius,
            aggregation,
            angular,
            edge,
            attn,
            global,
        }
    }

    pub fn cin(&self) -> usize {
        self.edge.cin
    }

    pub fn cout(&self) -> usize {
        self.edge.cout
    }

    /// Local channel. `H(D_ij)` is formed from the gathered difference of
    /// `x W`, which equals `D_ij W` because the layer has no bias.
    pub fn local<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var, geo: &EdgeGeometryVars, graph: &GraphBatch) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        graph.check("vaconv_local", &shape)?;
        let pre = if self.edge.bias.is_none() {
            let y = self.edge.linear(ctx, x)?;
            EdgeInput::GatherDiff {
                y,
                idx: graph.idx.clone(),
            }
        } else {
            let d = edge_features(ctx.tape, x, graph)?;
            EdgeInput::Dense(self.edge.linear(ctx, d)?)
        };
        let lam = geo.edge_weight(ctx.tape, self.angular, graph)?;
        let reduction = match self.aggregation {
            AggregationMode::Sum => EdgeReduction::Sum,
            AggregationMode::WeightedMax => EdgeReduction::Max,
        };
        self.edge.finish_edges(ctx, pre, Some(lam), reduction, graph)
    }

    /// Global channel: `a = max_j attn(concat(rel, dist))`, then
    /// `global(x ⊙ a)`.
    pub fn global<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var, geo: &EdgeGeometryVars, graph: &GraphBatch) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        graph.check("vaconv_global", &shape)?;
        if self.attn.cout != shape[2] {
            return shape_err("vaconv_global", &shape, &[self.attn.cout]);
        }
        let (b, n, k) = (shape[0], shape[1], graph.k());
        let d = ctx.tape.reshape(geo.dist, &[b, n, k, 1])?;
        let feat = ctx.tape.concat(&[geo.rel, d], 3)?;
        let pre = self.attn.linear(ctx, feat)?;
        let a = self.attn.finish_edges(ctx, EdgeInput::Dense(pre), None, EdgeReduction::Max, graph)?;
        let xa = ctx.tape.mul(x, a)?;
        self.global.forward(ctx, xa)
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var, positions: Var, graph: &GraphBatch) -> Result<Var> {
        let geo = EdgeGeometryVars::compute(ctx.tape, positions, graph)?;
        if let Some(p) = ctx.probe.as_mut() {
            p.push(geo.record(ctx.tape, &self.name));
        }
        let g = self.global(ctx, x, &geo, graph)?;
        let l = self.local(ctx, x, &geo, graph)?;
        ctx.tape.add(g, l)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{distance_attention_row, elevation_ratio, azimuth_ratio};
    use crate::gradcheck::{grad_check, weighted_sum, DEFAULT_EPS};
    use crate::spatial::{knn_bruteforce, KnnParams, PointSet};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn cloud(n: usize, seed: u64) -> Vec<[f64; 3]> {
        let mut r = rng(seed);
        (0..n)
            .map(|_| [r.random_range(-0.5..0.5), r.random_range(-0.5..0.5), r.random_range(-0.5..0.5)])
            .collect()
    }

    fn graph(pts: &[[f64; 3]], k: usize, radius: f64) -> NeighborGraph {
        knn_bruteforce(&PointSet::new(pts.to_vec()).unwrap(), KnnParams::new(k, radius)).unwrap()
    }

    fn features(n: usize, c: usize, seed: u64) -> Vec<f64> {
        let mut r = rng(seed);
        (0..n * c).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    /// Eval-mode layer with non-trivial running stats so BN is an affine map.
    fn randomise_bn(store: &mut ParamStore<f64>, seed: u64) {
        let mut r = rng(seed);
        for s in store.bn_states_mut() {
            for c in 0..s.channels() {
                s.running_mean[c] = r.random_range(-0.3..0.3);
                s.running_var[c] = r.random_range(0.5..2.0);
            }
        }
        for (name, v) in store.names.clone().iter().zip(store.values_mut()) {
            if name.ends_with("gamma") || name.ends_with("beta") {
                for x in v.data_mut() {
                    *x = r.random_range(0.5..1.5);
                }
            }
        }
    }

    fn apply_dense(store: &ParamStore<f64>, d: &Dense, x: &[f64]) -> Vec<f64> {
        let w = store.get(d.weight).data();
        let mut y = vec![0.0; d.cout];
        for o in 0..d.cout {
            for i in 0..d.cin {
                y[o] += x[i] * w[i * d.cout + o];
            }
            if let Some(b) = d.bias {
                y[o] += store.get(b).data()[o];
            }
            if let Some((g, b, id)) = d.norm {
                let s = store.bn(id);
                y[o] = (y[o] - s.running_mean[o]) / (s.running_var[o] + s.eps).sqrt() * store.get(g).data()[o]
                    + store.get(b).data()[o];
            }
            if let Some(Activation::LeakyRelu(a)) = d.act {
                if y[o] < 0.0 {
                    y[o] *= a;
                }
            }
        }
        y
    }

    fn run<F>(store: &ParamStore<f64>, f: F) -> Vec<f64>
    where
        F: FnOnce(&mut Ctx<'_, f64>) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, store, false, false);
        let out = f(&mut ctx).unwrap();
        tape.value(out).data().to_vec()
    }

    struct Case {
        n: usize,
        k: usize,
        c: usize,
        pts: Vec<[f64; 3]>,
        g: NeighborGraph,
        x: Vec<f64>,
    }

    fn case(n: usize, k: usize, c: usize, radius: f64, seed: u64) -> Case {
        let pts = cloud(n, seed);
        let g = graph(&pts, k, radius);
        let x = features(n, c, seed + 1);
        Case { n, k, c, pts, g, x }
    }

    fn vars(ctx: &mut Ctx<'_, f64>, cs: &Case) -> (Var, Var, GraphBatch) {
        let x = ctx.tape.constant(Tensor::new(&[1, cs.n, cs.c], cs.x.clone()).unwrap());
        let p: Vec<f64> = cs.pts.iter().flatten().copied().collect();
        let p = ctx.tape.constant(Tensor::new(&[1, cs.n, 3], p).unwrap());
        (x, p, GraphBatch::new(&[&cs.g]).unwrap())
    }

    /// Per-edge loop evaluation of the local channel.
    fn local_oracle(store: &ParamStore<f64>, conv: &VaConv, cs: &Case) -> Vec<f64> {
        let cout = conv.cout();
        let mut out = vec![0.0; cs.n * cout];
        for i in 0..cs.n {
            let (idx, _, pads) = cs.g.row(i);
            let mut dist = vec![0.0; cs.k];
            let mut rels = vec![[0.0; 3]; cs.k];
            for j in 0..cs.k {
                for a in 0..3 {
                    rels[j][a] = cs.pts[idx[j]][a] - cs.pts[i][a];
                }
                dist[j] = (rels[j][0].powi(2) + rels[j][1].powi(2) + rels[j][2].powi(2)).sqrt();
            }
            let mut m = vec![0.0; cs.k];
            distance_attention_row(&dist, &mut m);
            let all_pad = pads.iter().all(|&p| p);
            let mut best = vec![f64::NEG_INFINITY; cout];
            for j in 0..cs.k {
                let e = elevation_ratio(rels[j][2], dist[j]);
                let a = azimuth_ratio(rels[j][0], rels[j][1]);
                let lam = conv.angular.factor(e, a) * m[j] * if pads[j] { 0.0 } else { 1.0 };
                let d: Vec<f64> = (0..cs.c).map(|ch| cs.x[idx[j] * cs.c + ch] - cs.x[i * cs.c + ch]).collect();
                let h = apply_dense(store, &conv.edge, &d);
                for o in 0..cout {
                    match conv.aggregation {
                        AggregationMode::Sum => out[i * cout + o] += h[o] * lam,
                        AggregationMode::WeightedMax => {
                            if !pads[j] || all_pad {
                                best[o] = best[o].max(h[o] * lam);
                            }
                        }
                    }
                }
            }
            if conv.aggregation == AggregationMode::WeightedMax {
                out[i * cout..(i + 1) * cout].copy_from_slice(&best);
            }
        }
        out
    }

    fn global_oracle(store: &ParamStore<f64>, conv: &VaConv, cs: &Case) -> Vec<f64> {
        let cout = conv.cout();
        let mut out = vec![0.0; cs.n * cout];
        for i in 0..cs.n {
            let (idx, _, pads) = cs.g.row(i);
            let mut a = vec![f64::NEG_INFINITY; cs.c];
            for j in 0..cs.k {
                if pads[j] {
                    continue;
                }
                let r: Vec<f64> = (0..3).map(|ax| cs.pts[idx[j]][ax] - cs.pts[i][ax]).collect();
                let d = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
                let h = apply_dense(store, &conv.attn, &[r[0], r[1], r[2], d]);
                for ch in 0..cs.c {
                    a[ch] = a[ch].max(h[ch]);
                }
            }
            let xa: Vec<f64> = (0..cs.c).map(|ch| cs.x[i * cs.c + ch] * a[ch]).collect();
            out[i * cout..(i + 1) * cout].copy_from_slice(&apply_dense(store, &conv.global, &xa));
        }
        out
    }

    fn build(cin: usize, cout: usize, agg: AggregationMode, mode: AngularMode, radius: f64) -> (ParamStore<f64>, VaConv) {
        let mut store = ParamStore::new();
        let conv = VaConv::new(&mut store, &mut rng(3), "v", cin, cout, radius, agg, mode);
        randomise_bn(&mut store, 4);
        (store, conv)
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        assert_eq!(a.len(), b.len());
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn shared_mlp_identity_and_chain_check() {
        let mut store = ParamStore::<f64>::new();
        let mut d = Dense::new(&mut store, &mut rng(0), "id", 3, 3, false, false, None);
        *store.get_mut(d.weight) = Tensor::from_f64(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        d.act = None;
        let mlp = SharedMlp::from_layers(vec![d.clone()]).unwrap();
        let x = features(5, 3, 1);
        let out = run(&store, |ctx| {
            let v = ctx.tape.constant(Tensor::new(&[5, 3], x.clone()).unwrap());
            mlp.forward(ctx, v)
        });
        assert_eq!(out, x);

        let e = Dense::new(&mut store, &mut rng(0), "e", 4, 2, false, false, None);
        assert!(SharedMlp::from_layers(vec![d, e]).is_err());
    }

    #[test]
    fn shared_mlp_is_pointwise() {
        let mut store = ParamStore::<f64>::new();
        let mlp = SharedMlp::new(&mut store, &mut rng(1), "m", &[3, 6, 4]).unwrap();
        randomise_bn(&mut store, 2);
        let x = features(6, 3, 3);
        let perm = [4, 0, 5, 2, 1, 3];
        let xp: Vec<f64> = perm.iter().flat_map(|&p| x[p * 3..p * 3 + 3].to_vec()).collect();
        let fwd = |x: Vec<f64>| {
            run(&store, |ctx| {
                let v = ctx.tape.constant(Tensor::new(&[6, 3], x).unwrap());
                mlp.forward(ctx, v)
            })
        };
        let (a, b) = (fwd(x), fwd(xp));
        for (r, &p) in perm.iter().enumerate() {
            assert_eq!(&b[r * 4..r * 4 + 4], &a[p * 4..p * 4 + 4]);
        }
    }

    #[test]
    fn edge_features_cases() {
        let pts = vec![[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [5.0, 5.0, 5.0]];
        let g = graph(&pts, 2, 1.0);
        let gb = GraphBatch::new(&[&g]).unwrap();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[1, 3, 1], &[2.0, 7.0, 4.0]).unwrap());
        let d = edge_features(&mut tape, x, &gb).unwrap();
        // rows: 0 -> [1, pad], 1 -> [0, pad], 2 -> [pad, pad]
        assert_eq!(tape.value(d).data(), &[5.0, 0.0, -5.0, 0.0, 0.0, 0.0]);

        let c = tape.constant(Tensor::full(&[1, 3, 2], 3.0));
        let d = edge_features(&mut tape, c, &gb).unwrap();
        assert!(tape.value(d).data().iter().all(|&v| v == 0.0));

        let bad = tape.constant(Tensor::zeros(&[1, 4, 2]));
        assert!(edge_features(&mut tape, bad, &gb).is_err());
    }

    #[test]
    fn local_matches_loop_oracle_both_modes() {
        for agg in [AggregationMode::Sum, AggregationMode::WeightedMax] {
            for mode in [AngularMode::CosOfRatio, AngularMode::Ratio] {
                let cs = case(8, 4, 5, 0.45, 10);
                assert!(cs.g.pad_mask.iter().any(|&p| p), "case should exercise pads");
                let (store, conv) = build(5, 6, agg, mode, 0.45);
                let got = run(&store, |ctx| {
                    let (x, p, gb) = vars(ctx, &cs);
                    let geo = EdgeGeometryVars::compute(ctx.tape, p, &gb)?;
                    conv.local(ctx, x, &geo, &gb)
                });
                let want = local_oracle(&store, &conv, &cs);
                assert!(max_diff(&got, &want) < 1e-10, "{agg} {mode}");
            }
        }
    }

    #[test]
    fn local_single_neighbour_by_hand() {
        let pts = vec![[0.0, 0.0, 0.0], [0.3, 0.4, 1.2]];
        let g = graph(&pts, 1, 10.0);
        let cs = Case {
            n: 2,
            k: 1,
            c: 1,
            pts: pts.clone(),
            g,
            x: vec![1.0, 3.0],
        };
        let mut store = ParamStore::new();
        let mut conv = VaConv::new(&mut store, &mut rng(0), "v", 1, 1, 10.0, AggregationMode::Sum, AngularMode::CosOfRatio);
        conv.edge.norm = None;
        conv.edge.act = None;
        *store.get_mut(conv.edge.weight) = Tensor::from_f64(&[1, 1], &[0.5]).unwrap();
        let got = run(&store, |ctx| {
            let (x, p, gb) = vars(ctx, &cs);
            let geo = EdgeGeometryVars::compute(ctx.tape, p, &gb)?;
            conv.local(ctx, x, &geo, &gb)
        });
        // edge 0 -> 1: rel (0.3, 0.4, 1.2), |rel| = 1.3, E = 12/13, A = 0.6, m = 1
        let lam = (12.0f64 / 13.0).cos() * 0.6f64.cos();
        assert!((got[0] - 0.5 * 2.0 * lam).abs() < 1e-14);
        // reverse edge: rel negated, E = -12/13, A = -0.6, cos is even
        assert!((got[1] - 0.5 * -2.0 * lam).abs() < 1e-14);
    }

    #[test]
    fn local_constant_field_is_zero() {
        let mut cs = case(8, 4, 3, 0.6, 11);
        cs.x = vec![0.7; cs.n * cs.c];
        for agg in [AggregationMode::Sum, AggregationMode::WeightedMax] {
            let mut store = ParamStore::new();
            let mut conv = VaConv::new(&mut store, &mut rng(0), "v", 3, 4, 0.6, agg, AngularMode::CosOfRatio);
            conv.edge.norm = None;
            let got = run(&store, |ctx| {
                let (x, p, gb) = vars(ctx, &cs);
                let geo = EdgeGeometryVars::compute(ctx.tape, p, &gb)?;
                conv.local(ctx, x, &geo, &gb)
            });
            assert!(got.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn global_matches_loop_oracle() {
        let cs = case(8, 4, 5, 0.45, 12);
        let (store, conv) = build(5, 6, AggregationMode::Sum, AngularMode::CosOfRatio, 0.45);
        let got = run(&store, |ctx| {
            let (x, p, gb) = vars(ctx, &cs);
            let geo = EdgeGeometryVars::compute(ctx.tape, p, &gb)?;
            conv.global(ctx, x, &geo, &gb)
        });
        assert!(max_diff(&got, &global_oracle(&store, &conv, &cs)) < 1e-10);
    }

    #[test]
    fn global_with_unit_attention_and_zero_input() {
        let cs = case(6, 3, 4, 2.0, 13);
        let (mut store, conv) = build(4, 3, AggregationMode::Sum, AngularMode::CosOfRatio, 2.0);
        // zero weights and beta = 1 make the attention branch emit exactly 1
        *store.get_mut(conv.attn.weight) = Tensor::zeros(&[4, 4]);
        let (_, beta, id) = conv.attn.norm.unwrap();
        *store.get_mut(beta) = Tensor::ones(&[4]);
        store.bn_states_mut()[id.0].running_mean = vec![0.0; 4];
        let got = run(&store, |ctx| {
            let (x, p, gb) = vars(ctx, &cs);
            let geo = EdgeGeometryVars::compute(ctx.tape, p, &gb)?;
            conv.global(ctx, x, &geo, &gb)
        });
        let want = run(&store, |ctx| {
            let (x, _, _) = vars(ctx, &cs);
            conv.global.forward(ctx, x)
        });
        assert!(max_diff(&got, &want) < 1e-15);

        let zero = Case { x: vec![0.0; 24], ..case(6, 3, 4, 2.0, 14) };
        let got = run(&store, |ctx| {
            let (x, p, gb) = vars(ctx, &zero);
            let geo = EdgeGeometryVars::compute(ctx.tape, p, &gb)?;
            conv.global(ctx, x, &geo, &gb)
        });
        let want = apply_dense(&store, &conv.global, &[0.0; 4]);
        for row in got.chunks(3) {
            assert!(max_diff(row, &want) < 1e-15);
        }
    }

    #[test]
    fn forward_is_global_plus_local() {
        let cs = case(8, 4, 5, 0.5, 15);
        let (store, conv) = build(5, 6, AggregationMode::Sum, AngularMode::CosOfRatio, 0.5);
        let parts = |which: u8| {
            run(&store, |ctx| {
                let (x, p, gb) = vars(ctx, &cs);
                let geo = EdgeGeometryVars::compute(ctx.tape, p, &gb)?;
                match which {
                    0 => conv.global(ctx, x, &geo, &gb),
                    1 => conv.local(ctx, x, &geo, &gb),
                    _ => conv.forward(ctx, x, p, &gb),
                }
            })
        };
        let (g, l, f) = (parts(0), parts(1), parts(2));
        let sum: Vec<f64> = g.iter().zip(&l).map(|(a, b)| a + b).collect();
        assert_eq!(f, sum);
    }

    #[test]
    fn neighbour_order_and_translation_invariance() {
        let cs = case(10, 5, 4, 0.5, 16);
        for agg in [AggregationMode::Sum, AggregationMode::WeightedMax] {
            let (store, conv) = build(4, 3, agg, AngularMode::CosOfRatio, 0.5);
            let base = run(&store, |ctx| {
                let (x, p, gb) = vars(ctx, &cs);
                conv.forward(ctx, x, p, &gb)
            });
            let shuffled = Case { g: cs.g.permute_slots(&[3, 0, 4, 1, 2]), ..case(10, 5, 4, 0.5, 16) };
            let s = run(&store, |ctx| {
                let (x, p, gb) = vars(ctx, &shuffled);
                conv.forward(ctx, x, p, &gb)
            });
            assert!(max_diff(&base, &s) < 1e-12);

            let moved: Vec<[f64; 3]> = cs.pts.iter().map(|p| [p[0] + 3.0, p[1] - 1.5, p[2] + 0.25]).collect();
            let t = Case { pts: moved, ..case(10, 5, 4, 0.5, 16) };
            let tl = run(&store, |ctx| {
                let (x, p, gb) = vars(ctx, &t);
                let geo = EdgeGeometryVars::compute(ctx.tape, p, &gb)?;
                conv.local(ctx, x, &geo, &gb)
            });
            let bl = run(&store, |ctx| {
                let (x, p, gb) = vars(ctx, &cs);
                let geo = EdgeGeometryVars::compute(ctx.tape, p, &gb)?;
                conv.local(ctx, x, &geo, &gb)
            });
            assert!(max_diff(&tl, &bl) < 1e-12);
        }
    }

    #[test]
    fn angular_factor_range() {
        let cs = case(20, 6, 1, 0.8, 17);
        let mut tape = Tape::<f64>::new();
        let p: Vec<f64> = cs.pts.iter().flatten().copied().collect();
        let p = tape.constant(Tensor::new(&[1, 20, 3], p).unwrap());
        let gb = GraphBatch::new(&[&cs.g]).unwrap();
        let geo = EdgeGeometryVars::compute(&mut tape, p, &gb).unwrap();
        let ce = tape.cos(geo.elev);
        let ca = tape.cos(geo.azim);
        let ang = tape.mul(ce, ca).unwrap();
        let lo = 1f64.cos().powi(2);
        assert!(tape.value(ang).data().iter().all(|&v| (lo - 1e-15..=1.0).contains(&v)));
    }

    /// Loop oracle for EdgeConv, including pads in the max when all slots are pads.
    fn edgeconv_oracle(store: &ParamStore<f64>, conv: &EdgeConv, cs: &Case) -> Vec<f64> {
        let cout = conv.mlp.cout;
        let mut out = vec![0.0; cs.n * cout];
        for i in 0..cs.n {
            let (idx, _, pads) = cs.g.row(i);
            let all_pad = pads.iter().all(|&p| p);
            let mut best = vec![f64::NEG_INFINITY; cout];
            for j in 0..cs.k {
                if pads[j] && !all_pad {
                    continue;
                }
                let mut f: Vec<f64> = cs.x[i * cs.c..(i + 1) * cs.c].to_vec();
                f.extend((0..cs.c).map(|ch| cs.x[idx[j] * cs.c + ch] - cs.x[i * cs.c + ch]));
                let h = apply_dense(store, &conv.mlp, &f);
                for o in 0..cout {
                    best[o] = best[o].max(h[o]);
                }
            }
            out[i * cout..(i + 1) * cout].copy_from_slice(&best);
        }
        out
    }

    #[test]
    fn edgeconv_matches_oracle_and_is_order_invariant() {
        let cs = case(9, 4, 3, 0.4, 18);
        let mut store = ParamStore::new();
        let conv = EdgeConv::new(&mut store, &mut rng(5), "e", 3, 5);
        randomise_bn(&mut store, 6);
        let fwd = |cs: &Case| {
            run(&store, |ctx| {
                let (x, _, gb) = vars(ctx, cs);
                conv.forward(ctx, x, &gb)
            })
        };
        let got = fwd(&cs);
        assert!(max_diff(&got, &edgeconv_oracle(&store, &conv, &cs)) < 1e-10);
        let sh = Case { g: cs.g.permute_slots(&[2, 3, 1, 0]), ..case(9, 4, 3, 0.4, 18) };
        assert_eq!(fwd(&sh), got);

        let one = case(5, 1, 3, 10.0, 19);
        let got = fwd(&one);
        assert!(max_diff(&got, &edgeconv_oracle(&store, &conv, &one)) < 1e-12);
    }

    #[test]
    fn vaconv_grad_check_all_inputs() {
        let cs = case(7, 3, 3, 0.6, 20);
        for agg in [AggregationMode::Sum, AggregationMode::WeightedMax] {
            let (store, conv) = build(3, 4, agg, AngularMode::CosOfRatio, 0.6);
            let gb = GraphBatch::new(&[&cs.g]).unwrap();
            let p: Vec<f64> = cs.pts.iter().flatten().copied().collect();
            let mut inputs = vec![
                Tensor::new(&[1, 7, 3], cs.x.clone()).unwrap(),
                Tensor::new(&[1, 7, 3], p).unwrap(),
            ];
            inputs.extend(store.values().iter().cloned());
            let err = grad_check(
                |tape, v| {
                    let mut s = store.clone();
                    for (dst, &src) in s.values_mut().iter_mut().zip(&v[2..]) {
                        *dst = tape.value(src).clone();
                    }
                    let mut ctx = Ctx::with_vars(tape, &s, true, v[2..].to_vec())?;
                    let out = conv.forward(&mut ctx, v[0], v[1], &gb)?;
                    weighted_sum(tape, out, 7)
                },
                &inputs,
                DEFAULT_EPS,
            )
            .unwrap();
            assert!(err < 1e-4, "{agg}: {err}");
        }
    }
}
