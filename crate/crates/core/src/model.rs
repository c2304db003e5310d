//! The assembled network: an EdgeConv channel, a multi-scale VAConv channel
//! and a VAConv fusion channel, followed by a classification or per-point
//! part-segmentation head.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ReduceKind, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::AngularMode;
use crate::layers::{AggregationMode, Ctx, Dense, EdgeConv, GeometryRecord, GraphBatch, ParamStore, SharedMlp, VaConv, DEFAULT_ACT};
use crate::spatial::{knn_bruteforce, knn_features, KnnParams, NeighborGraph, PointSet};
use crate::tensor::{Real, Tensor};

macro_rules! config_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl std::str::FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok(Self::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($name), " {:?} (expected one of: {})"),
                        other,
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(match self { $(Self::$variant => $text),+ })
            }
        }
    };
}

config_enum!(Task { Classification => "classification", PartSegmentation => "part_segmentation" });
config_enum!(ParallelVariant { V0 => "v0", V1 => "v1", V2 => "v2", V3 => "v3" });
config_enum!(ChannelVariant { EdgeconvOnly => "edgeconv_only", VaconvOnly => "vaconv_only", Dual => "dual" });
config_enum!(GraphSpace { Coords => "coords", Features => "features" });

impl ParallelVariant {
    /// Parallel VAConv branches in layer 1, layer 2 and the fusion layer.
    pub fn branches(self) -> [usize; 3] {
        match self {
            ParallelVariant::V0 => [1, 1, 1],
            ParallelVariant::V1 => [2, 1, 1],
            ParallelVariant::V2 => [2, 2, 1],
            ParallelVariant::V3 => [2, 2, 2],
        }
    }
}

/// Architecture hyper-parameters. Layer widths are totals over the
/// parallel branches of a layer; each branch gets an equal share.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub task: Task,
    /// Classes, or part labels for segmentation.
    pub num_classes: usize,
    /// One-hot category width of the segmentation head.
    pub num_categories: usize,
    pub points_per_sample: usize,
    pub extra_channels: usize,
    pub k: usize,
    pub radii_layer1: Vec<f64>,
    pub radii_layer2: Vec<f64>,
    pub radii_fusion: Vec<f64>,
    pub edge_widths: Vec<usize>,
    pub stem_width: usize,
    pub layer1_width: usize,
    pub layer2_width: usize,
    pub fusion_width: usize,
    pub head_widths: Vec<usize>,
    pub label_width: usize,
    pub parallel_variant: ParallelVariant,
    pub channel_variant: ChannelVariant,
    pub aggregation_mode: AggregationMode,
    pub angular_mode: AngularMode,
    pub graph_space: GraphSpace,
    pub seed: u64,
}

impl ModelConfig {
    /// CPU-scale widths (a quarter of the full model).
    pub fn desk(num_classes: usize, points_per_sample: usize) -> Self {
        Self {
            task: Task::Classification,
            num_classes,
            num_categories: 16,
            points_per_sample,
            extra_channels: 0,
            k: 8,
            radii_layer1: vec![0.1, 0.2],
            radii_layer2: vec![0.3, 0.4],
            radii_fusion: vec![0.6, 0.8],
            edge_widths: vec![16, 16, 32],
            stem_width: 16,
            layer1_width: 32,
            layer2_width: 64,
            fusion_width: 512,
            head_widths: vec![128, 64],
            label_width: 64,
            parallel_variant: ParallelVariant::V3,
            channel_variant: ChannelVariant::Dual,
            aggregation_mode: AggregationMode::Sum,
            angular_mode: AngularMode::CosOfRatio,
            graph_space: GraphSpace::Coords,
            seed: 0,
        }
    }

    /// Full-size widths.
    pub fn full(num_classes: usize, points_per_sample: usize) -> Self {
        Self {
            k: 20,
            edge_widths: vec![64, 64, 128],
            stem_width: 64,
            layer1_width: 128,
            layer2_width: 256,
            fusion_width: 2048,
            head_widths: vec![512, 256],
            ..Self::desk(num_classes, points_per_sample)
        }
    }

    /// Tiny model for end-to-end gradient checks.
    pub fn micro(num_classes: usize, points_per_sample: usize) -> Self {
        Self {
            k: 4,
            radii_layer1: vec![0.5, 0.8],
            radii_layer2: vec![0.8, 1.2],
            radii_fusion: vec![1.2, 2.5],
            edge_widths: vec![8, 8, 8],
            stem_width: 8,
            layer1_width: 8,
            layer2_width: 8,
            fusion_width: 8,
            head_widths: vec![8],
            label_width: 8,
            ..Self::desk(num_classes, points_per_sample)
        }
    }

    pub fn in_channels(&self) -> usize {
        3 + self.extra_channels
    }

    fn has_edge(&self) -> bool {
        self.channel_variant != ChannelVariant::VaconvOnly
    }

    fn has_vaconv(&self) -> bool {
        self.channel_variant != ChannelVariant::EdgeconvOnly
    }

    /// Radii used by each layer's branches. A single branch uses the
    /// largest radius of its set.
    pub fn layer_radii(&self) -> [Vec<f64>; 3] {
        let sets = [&self.radii_layer1, &self.radii_layer2, &self.radii_fusion];
        let counts = self.parallel_variant.branches();
        [0, 1, 2].map(|i| {
            let set = sets[i];
            if counts[i] >= set.len() {
                set.clone()
            } else {
                let mut s = set.clone();
                s.sort_by(|a, b| b.total_cmp(a));
                s.truncate(counts[i]);
                s.sort_by(f64::total_cmp);
                s
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.k < 1 || self.points_per_sample < 2 {
            return bad(format!("need k >= 1 and at least 2 points, got k={} n={}", self.k, self.points_per_sample));
        }
        if self.edge_widths.len() != 3 {
            return bad(format!("edge_widths needs 3 entries, got {:?}", self.edge_widths));
        }
        if self.head_widths.is_empty() {
            return bad("head_widths is empty".into());
        }
        let widths = [self.stem_width, self.layer1_width, self.layer2_width, self.fusion_width, self.label_width];
        if widths.iter().chain(&self.edge_widths).chain(&self.head_widths).any(|&w| w == 0) {
            return bad("channel widths must be positive".into());
        }
        for (name, set) in [("layer1", &self.radii_layer1), ("layer2", &self.radii_layer2), ("fusion", &self.radii_fusion)] {
            if set.len() != 2 || set.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
                return bad(format!("radii_{name} needs two positive radii, got {set:?}"));
            }
        }
        let counts = self.parallel_variant.branches();
        for (w, c, name) in [
            (self.layer1_width, counts[0], "layer1_width"),
            (self.layer2_width, counts[1], "layer2_width"),
            (self.fusion_width, counts[2], "fusion_width"),
        ] {
            if w % c != 0 {
                return bad(format!("{name} {w} is not divisible by {c} branches"));
            }
        }
        if self.task == Task::PartSegmentation && self.num_categories == 0 {
            return bad("segmentation needs num_categories >= 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct VaconvChannel {
    stem: Dense,
    layer1: Vec<VaConv>,
    layer2: Vec<VaConv>,
    skip: Dense,
}

#[derive(Clone, Debug)]
enum Head {
    Classify { hidden: SharedMlp, out: Dense },
    Segment { label: Dense, hidden: SharedMlp, out: Dense },
}

/// Layer structure; parameter values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Architecture {
    edge: Option<Vec<EdgeConv>>,
    vaconv: Option<VaconvChannel>,
    fusion: Vec<VaConv>,
    head: Head,
}

/// Inputs of one batch, with neighbour graphs prepared for every radius.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub batch: usize,
    pub n: usize,
    /// `[B, N, 3]`.
    pub positions: Tensor<T>,
    /// `[B, N, 3 + E]`: positions followed by extra channels.
    pub features: Tensor<T>,
    /// One-hot categories `[B, num_categories]` for segmentation.
    pub categories: Option<Tensor<T>>,
    /// Unbounded k-NN graph of every sample.
    pub knn: Vec<NeighborGraph>,
    full: GraphBatch,
    by_radius: BTreeMap<u64, GraphBatch>,
}

impl<T> Batch<T> {
    fn graph(&self, radius: f64) -> &GraphBatch {
        &self.by_radius[&radius.to_bits()]
    }
}

/// Outputs of one forward pass.
pub struct Forward<T: Real> {
    pub logits: Var,
    pub params: Vec<Var>,
    pub bn_updates: Vec<(crate::layers::BnId, crate::autodiff::BatchStats<T>)>,
    pub probe: Option<Vec<GeometryRecord>>,
}

/// Network structure together with its parameters.
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub cfg: ModelConfig,
    pub arch: Architecture,
    pub store: ParamStore<T>,
}

fn vaconv_layer<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    cfg: &ModelConfig,
    name: &str,
    cin: usize,
    total: usize,
    radii: &[f64],
) -> Vec<VaConv> {
    let share = total / radii.len();
    radii
        .iter()
        .enumerate()
        .map(|(i, &r)| VaConv::new(store, rng, &format!("{name}.branch{i}"), cin, share, r, cfg.aggregation_mode, cfg.angular_mode))
        .collect()
}

impl<T: Real> Model<T> {
    /// Builds the network with deterministic initialisation from `cfg.seed`.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let radii = cfg.layer_radii();
        let cin = cfg.in_channels();

        let edge = cfg.has_edge().then(|| {
            let mut c = cin;
            cfg.edge_widths
                .iter()
                .enumerate()
                .map(|(i, &w)| {
                    let e = EdgeConv::new(&mut store, &mut rng, &format!("a.edgeconv{i}"), c, w);
                    c = w;
                    e
                })
                .collect::<Vec<_>>()
        });
        let vaconv = cfg.has_vaconv().then(|| {
            let stem = Dense::new(&mut store, &mut rng, "b.stem", cin, cfg.stem_width, false, true, Some(DEFAULT_ACT));
            let layer1 = vaconv_layer(&mut store, &mut rng, &cfg, "b.layer1", cfg.stem_width, cfg.layer1_width, &radii[0]);
            let layer2 = vaconv_layer(&mut store, &mut rng, &cfg, "b.layer2", cfg.layer1_width, cfg.layer2_width, &radii[1]);
            let skip = Dense::new(&mut store, &mut rng, "b.skip", cfg.stem_width, cfg.layer2_width, false, true, Some(DEFAULT_ACT));
            VaconvChannel {
                stem,
                layer1,
                layer2,
                skip,
            }
        });
        let mut fusion_in = 0;
        if cfg.has_edge() {
            fusion_in += cfg.edge_widths.iter().sum::<usize>();
        }
        if cfg.has_vaconv() {
            fusion_in += cfg.layer2_width;
        }
        let fusion = vaconv_layer(&mut store, &mut rng, &cfg, "c.fusion", fusion_in, cfg.fusion_width, &radii[2]);

        let head = match cfg.task {
            Task::Classification => {
                let mut widths = vec![cfg.fusion_width];
                widths.extend(&cfg.head_widths);
                let hidden = SharedMlp::new(&mut store, &mut rng, "head", &widths)?;
                let last = *cfg.head_widths.last().expect("validated");
                let out = Dense::new(&mut store, &mut rng, "head.out", last, cfg.num_classes, true, false, None);
                Head::Classify { hidden, out }
            }
            Task::PartSegmentation => {
                let label = Dense::new(&mut store, &mut rng, "seg.label", cfg.num_categories, cfg.label_width, false, true, Some(DEFAULT_ACT));
                let mut widths = vec![fusion_in + cfg.fusion_width + cfg.label_width];
                widths.extend(&cfg.head_widths);
                let hidden = SharedMlp::new(&mut store, &mut rng, "seg.head", &widths)?;
                let last = *cfg.head_widths.last().expect("validated");
                let out = Dense::new(&mut store, &mut rng, "seg.out", last, cfg.num_classes, true, false, None);
                Head::Segment { label, hidden, out }
            }
        };
        Ok(Self {
            cfg,
            arch: Architecture {
                edge,
                vaconv,
                fusion,
                head,
            },
            store,
        })
    }

    /// Same model with parameters converted to another element type.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            arch: self.arch.clone(),
            store: self.store.cast(),
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        self.store.names().to_vec()
    }

    /// Every radius any VAConv layer uses.
    fn radii(&self) -> Vec<f64> {
        let mut r: Vec<f64> = self.cfg.layer_radii().concat();
        r.sort_by(f64::total_cmp);
        r.dedup();
        r
    }

    /// Packs clouds (and, for segmentation, categories) into a batch and
    /// builds the neighbour graphs.
    pub fn prepare(&self, clouds: &[Vec<[f64; 3]>], extras: Option<&[Vec<f64>]>, categories: Option<&[usize]>) -> Result<Batch<T>> {
        let n = self.cfg.points_per_sample;
        let e = self.cfg.extra_channels;
        let b = clouds.len();
        if b == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut pos = Vec::with_capacity(b * n * 3);
        let mut feats = Vec::with_capacity(b * n * (3 + e));
        let mut knn = Vec::with_capacity(b);
        for (s, cloud) in clouds.iter().enumerate() {
            if cloud.len() != n {
                return Err(Error::Shape {
                    op: "forward",
                    lhs: vec![cloud.len(), 3],
                    rhs: vec![n, 3],
                });
            }
            let ex = match (extras, e) {
                (_, 0) => None,
                (Some(x), _) if x[s].len() == n * e => Some(&x[s]),
                _ => return Err(Error::Shape {
                    op: "forward",
                    lhs: vec![extras.map_or(0, |x| x[s].len() / n.max(1))],
                    rhs: vec![e],
                }),
            };
            for (i, p) in cloud.iter().enumerate() {
                pos.extend(p.iter().map(|&v| T::from_f64(v)));
                feats.extend(p.iter().map(|&v| T::from_f64(v)));
                if let Some(ex) = ex {
                    feats.extend(ex[i * e..(i + 1) * e].iter().map(|&v| T::from_f64(v)));
                }
            }
            let ps = PointSet::new(cloud.clone())?;
            knn.push(knn_bruteforce(&ps, KnnParams::new(self.cfg.k, f64::INFINITY))?);
        }
        let refs: Vec<&NeighborGraph> = knn.iter().collect();
        let full = GraphBatch::new(&refs)?;
        let mut by_radius = BTreeMap::new();
        for r in self.radii() {
            let restricted: Vec<NeighborGraph> = knn.iter().map(|g| g.restrict(r)).collect();
            let refs: Vec<&NeighborGraph> = restricted.iter().collect();
            by_radius.insert(r.to_bits(), GraphBatch::new(&refs)?);
        }
        let categories = match (self.cfg.task, categories) {
            (Task::Classification, _) => None,
            (Task::PartSegmentation, Some(c)) if c.len() == b => {
                let width = self.cfg.num_categories;
                let mut oh = vec![T::zero(); b * width];
                for (s, &cat) in c.iter().enumerate() {
                    if cat >= width {
                        return Err(Error::LabelRange {
                            sample: s,
                            label: cat,
                            classes: width,
                        });
                    }
                    oh[s * width + cat] = T::one();
                }
                Some(Tensor::new(&[b, width], oh)?)
            }
            (Task::PartSegmentation, _) => {
                return Err(Error::InvalidArgument("segmentation batch needs one category per cloud".into()))
            }
        };
        Ok(Batch {
            batch: b,
            n,
            positions: Tensor::new(&[b, n, 3], pos)?,
            features: Tensor::new(&[b, n, 3 + e], feats)?,
            categories,
            knn,
            full,
            by_radius,
        })
    }

    /// Records the forward pass on `tape`. Logits are `[B, classes]` or
    /// `[B, N, parts]`.
    pub fn forward(&self, tape: &mut Tape<T>, batch: &Batch<T>, training: bool, requires_grad: bool) -> Result<Forward<T>> {
        self.forward_inner(tape, batch, training, requires_grad, false, None)
    }

    /// Forward pass that also records per-layer edge geometry.
    pub fn forward_probed(&self, tape: &mut Tape<T>, batch: &Batch<T>, training: bool) -> Result<Forward<T>> {
        self.forward_inner(tape, batch, training, false, true, None)
    }

    /// Forward pass with caller-provided leaves for positions, features and
    /// every parameter (in storage order).
    pub fn forward_with_leaves(&self, tape: &mut Tape<T>, batch: &Batch<T>, training: bool, leaves: &[Var]) -> Result<Forward<T>> {
        self.forward_inner(tape, batch, training, false, false, Some(leaves))
    }

    fn forward_inner(
        &self,
        tape: &mut Tape<T>,
        batch: &Batch<T>,
        training: bool,
        requires_grad: bool,
        probe: bool,
        leaves: Option<&[Var]>,
    ) -> Result<Forward<T>> {
        let (pos, feats, params) = match leaves {
            Some(l) => {
                if l.len() != 2 + self.store.len() {
                    return Err(Error::InvalidArgument("leaf count does not match the model".into()));
                }
                (l[0], l[1], Some(l[2..].to_vec()))
            }
            None => (tape.constant(batch.positions.clone()), tape.constant(batch.features.clone()), None),
        };
        let mut ctx = match params {
            Some(p) => Ctx::with_vars(tape, &self.store, training, p)?,
            None => Ctx::new(tape, &self.store, training, requires_grad),
        };
        if probe {
            ctx = ctx.with_probe();
        }
        let logits = self.run(&mut ctx, pos, feats, batch)?;
        Ok(Forward {
            logits,
            params: ctx.param_vars().to_vec(),
            bn_updates: std::mem::take(&mut ctx.bn_updates),
            probe: ctx.probe.take(),
        })
    }

    fn branches(&self, ctx: &mut Ctx<'_, T>, convs: &[VaConv], x: Var, pos: Var, batch: &Batch<T>) -> Result<Var> {
        let outs = convs
            .iter()
            .map(|c| c.forward(ctx, x, pos, batch.graph(c.radius)))
            .collect::<Result<Vec<_>>>()?;
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            ctx.tape.concat(&outs, 2)
        }
    }

    fn feature_graph(&self, ctx: &Ctx<'_, T>, x: Var, batch: &Batch<T>) -> Result<GraphBatch> {
        let v = ctx.tape.value(x);
        let c = v.shape()[2];
        let per = batch.n * c;
        let graphs = (0..batch.batch)
            .map(|s| {
                let rows: Vec<f64> = v.data()[s * per..(s + 1) * per].iter().map(|t| t.as_f64()).collect();
                knn_features(&rows, batch.n, c, self.cfg.k)
            })
            .collect::<Result<Vec<_>>>()?;
        GraphBatch::new(&graphs.iter().collect::<Vec<_>>())
    }

    fn run(&self, ctx: &mut Ctx<'_, T>, pos: Var, feats: Var, batch: &Batch<T>) -> Result<Var> {
        let (b, n) = (batch.batch, batch.n);
        let mut parts = Vec::new();
        if let Some(convs) = &self.arch.edge {
            let mut x = feats;
            let mut outs = Vec::new();
            for (i, conv) in convs.iter().enumerate() {
                x = if i > 0 && self.cfg.graph_space == GraphSpace::Features {
                    let g = self.feature_graph(ctx, x, batch)?;
                    conv.forward(ctx, x, &g)?
                } else {
                    conv.forward(ctx, x, &batch.full)?
                };
                outs.push(x);
            }
            parts.push(ctx.tape.concat(&outs, 2)?);
        }
        if let Some(ch) = &self.arch.vaconv {
            let s = ch.stem.forward(ctx, feats)?;
            let l1 = self.branches(ctx, &ch.layer1, s, pos, batch)?;
            let l2 = self.branches(ctx, &ch.layer2, l1, pos, batch)?;
            let skip = ch.skip.forward(ctx, s)?;
            parts.push(ctx.tape.add(l2, skip)?);
        }
        let local = if parts.len() == 1 { parts[0] } else { ctx.tape.concat(&parts, 2)? };
        let fused = self.branches(ctx, &self.arch.fusion, local, pos, batch)?;
        let global = ctx.tape.reduce(ReduceKind::Max, fused, 1)?;

        match &self.arch.head {
            Head::Classify { hidden, out } => {
                let h = hidden.forward(ctx, global)?;
                out.forward(ctx, h)
            }
            Head::Segment { label, hidden, out } => {
                let cats = batch
                    .categories
                    .clone()
                    .ok_or_else(|| Error::InvalidArgument("segmentation batch without categories".into()))?;
                let cats = ctx.tape.constant(cats);
                let emb = label.forward(ctx, cats)?;
                let ones = ctx.tape.constant(Tensor::ones(&[1, n, 1]));
                let fw = ctx.tape.shape(global)[1];
                let g = ctx.tape.reshape(global, &[b, 1, fw])?;
                let g = ctx.tape.mul(g, ones)?;
                let lw = ctx.tape.shape(emb)[1];
                let l = ctx.tape.reshape(emb, &[b, 1, lw])?;
                let l = ctx.tape.mul(l, ones)?;
                let x = ctx.tape.concat(&[local, g, l], 2)?;
                let h = hidden.forward(ctx, x)?;
                out.forward(ctx, h)
            }
        }
    }

    /// Eval-mode logits.
    pub fn predict(&self, batch: &Batch<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, batch, false, false)?;
        Ok(tape.value(f.logits).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cloud(n: usize, seed: u64) -> Vec<[f64; 3]> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)])
            .collect()
    }

    fn small(n: usize) -> ModelConfig {
        ModelConfig {
            fusion_width: 32,
            head_widths: vec![16],
            ..ModelConfig::micro(4, n)
        }
    }

    #[test]
    fn variants_change_only_branch_inventory() {
        let names = |v: ParallelVariant| {
            let m = Model::<f32>::new(ModelConfig {
                parallel_variant: v,
                ..ModelConfig::desk(8, 64)
            })
            .unwrap();
            m.param_names()
        };
        let v3 = names(ParallelVariant::V3);
        assert!(v3.iter().any(|n| n.starts_with("b.layer1.branch1")));
        assert!(v3.iter().any(|n| n.starts_with("b.layer2.branch1")));
        let v0 = names(ParallelVariant::V0);
        assert!(!v0.iter().any(|n| n.contains("branch1")));
        let v1 = names(ParallelVariant::V1);
        assert!(v1.iter().any(|n| n.starts_with("b.layer1.branch1")));
        assert!(!v1.iter().any(|n| n.starts_with("b.layer2.branch1")));
    }

    #[test]
    fn single_branch_doubles_width() {
        let m = Model::<f32>::new(ModelConfig {
            parallel_variant: ParallelVariant::V0,
            ..ModelConfig::desk(8, 64)
        })
        .unwrap();
        assert_eq!(m.store.by_name("b.layer1.branch0.edge.weight").unwrap().shape(), &[16, 32]);
        assert_eq!(m.cfg.layer_radii()[0], vec![0.2]);
        let v3 = Model::<f32>::new(ModelConfig::desk(8, 64)).unwrap();
        assert_eq!(v3.store.by_name("b.layer1.branch0.edge.weight").unwrap().shape(), &[16, 16]);
    }

    #[test]
    fn channel_variants() {
        let build = |c: ChannelVariant| {
            Model::<f32>::new(ModelConfig {
                channel_variant: c,
                ..ModelConfig::desk(8, 64)
            })
            .unwrap()
            .param_names()
        };
        let dual = build(ChannelVariant::Dual);
        let edge = build(ChannelVariant::EdgeconvOnly);
        assert!(!edge.iter().any(|n| n.starts_with("b.")));
        // the fusion layer keeps its names; only its input width changes
        let missing: Vec<&String> = dual.iter().filter(|n| !edge.contains(n)).collect();
        assert!(!missing.is_empty() && missing.iter().all(|n| n.starts_with("b.")));
        assert!(edge.iter().all(|n| dual.contains(n)));
        let va = build(ChannelVariant::VaconvOnly);
        assert!(!va.iter().any(|n| n.starts_with("a.")));
    }

    #[test]
    fn build_is_deterministic() {
        let a = Model::<f32>::new(ModelConfig::desk(8, 64)).unwrap();
        let b = Model::<f32>::new(ModelConfig::desk(8, 64)).unwrap();
        assert_eq!(a.store, b.store);
        let c = Model::<f32>::new(ModelConfig {
            seed: 1,
            ..ModelConfig::desk(8, 64)
        })
        .unwrap();
        assert_ne!(a.store, c.store);
    }

    #[test]
    fn classification_is_permutation_invariant() {
        let m = Model::<f64>::new(small(24)).unwrap();
        let pts = cloud(24, 3);
        let mut perm: Vec<usize> = (0..24).collect();
        perm.reverse();
        perm.swap(3, 17);
        let moved: Vec<[f64; 3]> = perm.iter().map(|&i| pts[i]).collect();
        let a = m.predict(&m.prepare(&[pts], None, None).unwrap()).unwrap();
        let b = m.predict(&m.prepare(&[moved], None, None).unwrap()).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-10);
    }

    #[test]
    fn segmentation_is_permutation_equivariant() {
        let cfg = ModelConfig {
            task: Task::PartSegmentation,
            num_categories: 4,
            ..small(20)
        };
        let m = Model::<f64>::new(cfg).unwrap();
        let pts = cloud(20, 4);
        let perm: Vec<usize> = (0..20).map(|i| (i * 7) % 20).collect();
        let moved: Vec<[f64; 3]> = perm.iter().map(|&i| pts[i]).collect();
        let a = m.predict(&m.prepare(&[pts], None, Some(&[2])).unwrap()).unwrap();
        let b = m.predict(&m.prepare(&[moved], None, Some(&[2])).unwrap()).unwrap();
        assert_eq!(a.shape(), &[1, 20, 4]);
        for (r, &p) in perm.iter().enumerate() {
            for c in 0..4 {
                assert!((b.data()[r * 4 + c] - a.data()[p * 4 + c]).abs() < 1e-10);
            }
        }
        assert!(m.prepare(&[cloud(20, 1)], None, None).is_err());
    }

    #[test]
    fn wrong_point_count_and_bad_config() {
        let m = Model::<f64>::new(small(24)).unwrap();
        assert!(m.prepare(&[cloud(23, 1)], None, None).is_err());
        assert!(Model::<f64>::new(ModelConfig {
            layer1_width: 7,
            ..small(24)
        })
        .is_err());
        assert!(Model::<f64>::new(ModelConfig {
            edge_widths: vec![8, 8],
            ..small(24)
        })
        .is_err());
    }

    #[test]
    fn feature_space_graphs_run() {
        let m = Model::<f64>::new(ModelConfig {
            graph_space: GraphSpace::Features,
            ..small(24)
        })
        .unwrap();
        let out = m.predict(&m.prepare(&[cloud(24, 5), cloud(24, 6)], None, None).unwrap()).unwrap();
        assert_eq!(out.shape(), &[2, 4]);
        assert!(out.all_finite());
    }
}
