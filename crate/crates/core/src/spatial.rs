//! Radius-bounded k-nearest-neighbour graphs over 3D point sets.
//!
//! Rows are sorted by `(distance, index)`. When fewer than `k` points
//! qualify, the remaining slots are self-pads: they point at the centre,
//! carry distance 0 and are flagged in `pad_mask`.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Point positions plus optional per-point extra channels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    pub positions: Vec<[f64; 3]>,
    /// Row-major `N x extra_dim`.
    pub extras: Vec<f64>,
    pub extra_dim: usize,
}

impl PointSet {
    pub fn new(positions: Vec<[f64; 3]>) -> Result<Self> {
        Self::with_extras(positions, Vec::new(), 0)
    }

    pub fn with_extras(positions: Vec<[f64; 3]>, extras: Vec<f64>, extra_dim: usize) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::InvalidArgument("empty point set".into()));
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point positions".into()));
        }
        if extras.len() != positions.len() * extra_dim {
            return Err(Error::InvalidArgument(format!(
                "{} extra values for {} points x {} channels",
                extras.len(),
                positions.len(),
                extra_dim
            )));
        }
        Ok(Self {
            positions,
            extras,
            extra_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Per-point neighbour table for one cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborGraph {
    pub n: usize,
    pub k: usize,
    pub radius: f64,
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
    pub pad_mask: Vec<bool>,
}

impl NeighborGraph {
    pub fn row(&self, i: usize) -> (&[usize], &[f64], &[bool]) {
        let r = i * self.k..(i + 1) * self.k;
        (&self.indices[r.clone()], &self.distances[r.clone()], &self.pad_mask[r])
    }

    /// Same graph with every neighbour farther than `radius` turned into a
    /// self-pad. Applied to an unbounded graph this reproduces a direct
    /// radius-bounded search, because rows are distance-sorted.
    pub fn restrict(&self, radius: f64) -> NeighborGraph {
        let mut g = self.clone();
        g.radius = radius.min(self.radius);
        for i in 0..self.n {
            for j in 0..self.k {
                let at = i * self.k + j;
                if !g.pad_mask[at] && g.distances[at] > radius {
                    g.indices[at] = i;
                    g.distances[at] = 0.0;
                    g.pad_mask[at] = true;
                }
            }
        }
        g
    }

    /// Applies a permutation of the neighbour slots within every row.
    pub fn permute_slots(&self, perm: &[usize]) -> NeighborGraph {
        let mut g = self.clone();
        for i in 0..self.n {
            for (j, &p) in perm.iter().enumerate() {
                g.indices[i * self.k + j] = self.indices[i * self.k + p];
                g.distances[i * self.k + j] = self.distances[i * self.k + p];
                g.pad_mask[i * self.k + j] = self.pad_mask[i * self.k + p];
            }
        }
        g
    }
}

/// Neighbour indices for a batch of graphs, addressed as `(sample, row, slot)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexTable {
    batch: usize,
    rows: usize,
    k: usize,
    data: Vec<usize>,
}

impl IndexTable {
    pub fn new(batch: usize, rows: usize, k: usize, data: Vec<usize>) -> Result<Self> {
        if data.len() != batch * rows * k {
            return Err(Error::InvalidArgument(format!(
                "index table of {} entries for {batch}x{rows}x{k}",
                data.len()
            )));
        }
        Ok(Self { batch, rows, k, data })
    }

    /// Stacks per-sample graphs, which must agree on `n` and `k`.
    pub fn stack(graphs: &[&NeighborGraph]) -> Result<Self> {
        let first = graphs
            .first()
            .ok_or_else(|| Error::InvalidArgument("no graphs to stack".into()))?;
        let mut data = Vec::with_capacity(graphs.len() * first.n * first.k);
        for g in graphs {
            if g.n != first.n || g.k != first.k {
                return Err(Error::InvalidArgument("graphs disagree on n or k".into()));
            }
            data.extend_from_slice(&g.indices);
        }
        Self::new(graphs.len(), first.n, first.k, data)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn get(&self, b: usize, i: usize, j: usize) -> usize {
        self.data[(b * self.rows + i) * self.k + j]
    }
}

/// Search parameters shared by both search strategies.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KnnParams {
    pub k: usize,
    pub radius: f64,
    pub include_self: bool,
}

impl KnnParams {
    pub fn new(k: usize, radius: f64) -> Self {
        Self {
            k,
            radius,
            include_self: false,
        }
    }
}

#[inline]
fn distance(p: &[f64; 3], q: &[f64; 3]) -> f64 {
    let dx = q[0] - p[0];
    let dy = q[1] - p[1];
    let dz = q[2] - p[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Bounded insertion list ordered by `(distance, index)`.
struct Best {
    k: usize,
    items: Vec<(f64, usize)>,
}

impl Best {
    fn new(k: usize) -> Self {
        Self {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    #[inline]
    fn offer(&mut self, d: f64, j: usize) {
        if self.items.len() == self.k {
            let last = self.items[self.k - 1];
            if (d, j) >= last {
                return;
            }
        }
        let pos = self.items.partition_point(|&e| e < (d, j));
        self.items.insert(pos, (d, j));
        self.items.truncate(self.k);
    }
}

fn validate(points: &PointSet, params: &KnnParams) -> Result<()> {
    if params.k < 1 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if points.is_empty() {
        return Err(Error::InvalidArgument("empty point set".into()));
    }
    if !params.include_self && points.len() < 2 {
        return Err(Error::InvalidArgument(
            "need at least 2 points when excluding self".into(),
        ));
    }
    if params.radius.is_nan() || params.radius < 0.0 {
        return Err(Error::InvalidArgument(format!("radius {}", params.radius)));
    }
    Ok(())
}

fn finish_row(i: usize, k: usize, best: Best, g: &mut NeighborGraph) {
    for j in 0..k {
        let at = i * k + j;
        match best.items.get(j) {
            Some(&(d, idx)) => {
                g.indices[at] = idx;
                g.distances[at] = d;
                g.pad_mask[at] = false;
            }
            None => {
                g.indices[at] = i;
                g.distances[at] = 0.0;
                g.pad_mask[at] = true;
            }
        }
    }
}

fn empty_graph(n: usize, params: &KnnParams) -> NeighborGraph {
    NeighborGraph {
        n,
        k: params.k,
        radius: params.radius,
        indices: vec![0; n * params.k],
        distances: vec![0.0; n * params.k],
        pad_mask: vec![true; n * params.k],
    }
}

/// Exhaustive search; the reference for every other strategy.
pub fn knn_bruteforce(points: &PointSet, params: KnnParams) -> Result<NeighborGraph> {
    validate(points, &params)?;
    let pos = &points.positions;
    let n = pos.len();
    let mut g = empty_graph(n, &params);
    for i in 0..n {
        let mut best = Best::new(params.k);
        for (j, q) in pos.iter().enumerate() {
            if j == i && !params.include_self {
                continue;
            }
            let d = distance(&pos[i], q);
            if d <= params.radius {
                best.offer(d, j);
            }
        }
        finish_row(i, params.k, best, &mut g);
    }
    Ok(g)
}

/// Uniform-grid search with cell edge `radius`. Produces exactly the same
/// graph as [`knn_bruteforce`].
pub fn knn_grid(points: &PointSet, params: KnnParams) -> Result<NeighborGraph> {
    validate(points, &params)?;
    if !(params.radius.is_finite() && params.radius > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "grid search needs a finite positive radius, got {}",
            params.radius
        )));
    }
    let pos = &points.positions;
    let n = pos.len();
    // slight inflation keeps boundary pairs within one cell of each other
    let cell = params.radius * (1.0 + 1e-9);
    let mut lo = [f64::INFINITY; 3];
    for p in pos {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
        }
    }
    let key = |p: &[f64; 3]| -> [i64; 3] {
        [0, 1, 2].map(|a| ((p[a] - lo[a]) / cell).floor() as i64)
    };
    let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    let keys: Vec<[i64; 3]> = pos.iter().map(key).collect();
    for (i, k) in keys.iter().enumerate() {
        cells.entry(*k).or_default().push(i);
    }

    let mut g = empty_graph(n, &params);
    for i in 0..n {
        let mut best = Best::new(params.k);
        let c = keys[i];
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(members) = cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) else {
                        continue;
                    };
                    for &j in members {
                        if j == i && !params.include_self {
                            continue;
                        }
                        let d = distance(&pos[i], &pos[j]);
                        if d <= params.radius {
                            best.offer(d, j);
                        }
                    }
                }
            }
        }
        finish_row(i, params.k, best, &mut g);
    }
    Ok(g)
}

/// Unbounded k-NN over arbitrary-dimension feature rows (`n x dim`),
/// excluding self. Used when graphs are rebuilt in feature space.
pub fn knn_features(features: &[f64], n: usize, dim: usize, k: usize) -> Result<NeighborGraph> {
    if k < 1 || n < 2 || features.len() != n * dim {
        return Err(Error::InvalidArgument(format!(
            "feature knn with n={n}, dim={dim}, k={k}, {} values",
            features.len()
        )));
    }
    let params = KnnParams::new(k, f64::INFINITY);
    let mut g = empty_graph(n, &params);
    for i in 0..n {
        let fi = &features[i * dim..(i + 1) * dim];
        let mut best = Best::new(k);
        for j in 0..n {
            if j == i {
                continue;
            }
            let fj = &features[j * dim..(j + 1) * dim];
            let d = fi
                .iter()
                .zip(fj)
                .map(|(a, b)| (b - a) * (b - a))
                .sum::<f64>()
                .sqrt();
            best.offer(d, j);
        }
        finish_row(i, k, best, &mut g);
    }
    Ok(g)
}
