//! Per-edge geometry of a neighbour graph: relative vectors, lengths,
//! elevation and azimuth ratios, and the distance-attention weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial::{NeighborGraph, PointSet};
use crate::tensor::Real;

/// Lengths below this are treated as zero by the ratio and attention rules.
pub const DEGENERATE_EPS: f64 = 1e-12;

/// How the elevation and azimuth ratios become a per-edge weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngularMode {
    /// `cos(E) * cos(A)`, applying the cosine to the ratios themselves.
    CosOfRatio,
    /// `E * A`, treating the ratios as the cosines already.
    Ratio,
}

impl AngularMode {
    pub fn factor(self, elev: f64, azim: f64) -> f64 {
        match self {
            AngularMode::CosOfRatio => elev.cos() * azim.cos(),
            AngularMode::Ratio => elev * azim,
        }
    }
}

impl std::str::FromStr for AngularMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cos_of_ratio" => Ok(Self::CosOfRatio),
            "ratio" => Ok(Self::Ratio),
            _ => Err(Error::Config(format!("unknown angular mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for AngularMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AngularMode::CosOfRatio => "cos_of_ratio",
            AngularMode::Ratio => "ratio",
        })
    }
}

#[inline]
pub fn elevation_ratio<T: Real>(z: T, dist: T) -> T {
    if dist < T::from_f64(DEGENERATE_EPS) {
        T::zero()
    } else {
        z / dist
    }
}

#[inline]
pub fn azimuth_ratio<T: Real>(x: T, y: T) -> T {
    let h = (x * x + y * y).sqrt();
    if h < T::from_f64(DEGENERATE_EPS) {
        T::zero()
    } else {
        x / h
    }
}

fn argmax_first<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

/// `m_j = (max - d_j)^2 / sum_l (max - d_l)^2`, uniform when the
/// denominator vanishes.
pub fn distance_attention_row<T: Real>(dist: &[T], out: &mut [T]) {
    let k = dist.len();
    if k == 0 {
        return;
    }
    let max = dist[argmax_first(dist)];
    let mut total = T::zero();
    for (o, d) in out.iter_mut().zip(dist) {
        let gap = max - *d;
        *o = gap * gap;
        total += *o;
    }
    if total < T::from_f64(DEGENERATE_EPS) {
        let u = T::one() / T::from_f64(k as f64);
        out.iter_mut().for_each(|o| *o = u);
    } else {
        out.iter_mut().for_each(|o| *o = *o / total);
    }
}

/// Backward of [`distance_attention_row`]. The argmax choice and the
/// uniform-fallback branch are held fixed; gradient flows through the
/// selected maximum's value.
pub fn distance_attention_row_vjp<T: Real>(dist: &[T], grad_out: &[T], grad_in: &mut [T]) {
    let k = dist.len();
    if k == 0 {
        return;
    }
    let star = argmax_first(dist);
    let max = dist[star];
    let gaps: Vec<T> = dist.iter().map(|d| max - *d).collect();
    let total: T = gaps.iter().map(|g| *g * *g).sum();
    if total < T::from_f64(DEGENERATE_EPS) {
        return;
    }
    let weighted: T = grad_out
        .iter()
        .zip(&gaps)
        .map(|(g, gap)| *g * *gap * *gap)
        .sum();
    let two = T::from_f64(2.0);
    let mut to_max = T::zero();
    for j in 0..k {
        // dL/dw_j for w_j = gap_j^2
        let dw = grad_out[j] / total - weighted / (total * total);
        let dgap = dw * two * gaps[j];
        grad_in[j] -= dgap;
        to_max += dgap;
    }
    grad_in[star] += to_max;
}

/// Geometry of every edge of one neighbour graph, `N x K` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeGeometry {
    pub n: usize,
    pub k: usize,
    pub rel: Vec<[f64; 3]>,
    pub dist: Vec<f64>,
    pub elev: Vec<f64>,
    pub azim: Vec<f64>,
    pub m_weight: Vec<f64>,
}

impl EdgeGeometry {
    pub fn compute(points: &PointSet, graph: &NeighborGraph) -> Result<Self> {
        let (rel, dist) = relative_vectors(points, graph)?;
        let (elev, azim) = elevation_azimuth(&rel, &dist);
        let m_weight = distance_attention(&dist, graph.k);
        Ok(Self {
            n: graph.n,
            k: graph.k,
            rel,
            dist,
            elev,
            azim,
            m_weight,
        })
    }

    /// Per-edge angular factor under `mode`.
    pub fn angular(&self, mode: AngularMode) -> Vec<f64> {
        self.elev
            .iter()
            .zip(&self.azim)
            .map(|(&e, &a)| mode.factor(e, a))
            .collect()
    }
}

/// `rel[i, j] = q_ij - p_i` and its Euclidean length. Self-pads yield zeros.
pub fn relative_vectors(points: &PointSet, graph: &NeighborGraph) -> Result<(Vec<[f64; 3]>, Vec<f64>)> {
    if points.len() != graph.n {
        return Err(Error::InvalidArgument(format!(
            "graph over {} points applied to {} points",
            graph.n,
            points.len()
        )));
    }
    let p = &points.positions;
    let mut rel = Vec::with_capacity(graph.n * graph.k);
    let mut dist = Vec::with_capacity(graph.n * graph.k);
    for i in 0..graph.n {
        for &j in graph.row(i).0 {
            let v = [p[j][0] - p[i][0], p[j][1] - p[i][1], p[j][2] - p[i][2]];
            dist.push((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt());
            rel.push(v);
        }
    }
    Ok((rel, dist))
}

pub fn elevation_azimuth(rel: &[[f64; 3]], dist: &[f64]) -> (Vec<f64>, Vec<f64>) {
    rel.iter()
        .zip(dist)
        .map(|(v, &d)| (elevation_ratio(v[2], d), azimuth_ratio(v[0], v[1])))
        .unzip()
}

/// Distance attention for each row of `k` distances.
pub fn distance_attention(dist: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; dist.len()];
    for (row, o) in dist.chunks(k).zip(out.chunks_mut(k)) {
        distance_attention_row(row, o);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial::{knn_bruteforce, KnnParams};
    use proptest::prelude::*;

    #[test]
    fn three_four_five() {
        let pts = PointSet::new(vec![[0.0, 0.0, 0.0], [3.0, 4.0, 0.0]]).unwrap();
        let g = knn_bruteforce(&pts, KnnParams::new(1, f64::INFINITY)).unwrap();
        let (rel, dist) = relative_vectors(&pts, &g).unwrap();
        assert_eq!(rel[0], [3.0, 4.0, 0.0]);
        assert_eq!(dist[0], 5.0);
    }

    #[test]
    fn pads_are_zero_vectors() {
        let pts = PointSet::new(vec![[0.0, 0.0, 0.0], [3.0, 4.0, 0.0]]).unwrap();
        let g = knn_bruteforce(&pts, KnnParams::new(2, 1.0)).unwrap();
        let geo = EdgeGeometry::compute(&pts, &g).unwrap();
        assert!(geo.rel.iter().all(|v| *v == [0.0; 3]));
        assert!(geo.dist.iter().all(|&d| d == 0.0));
        assert!(geo.elev.iter().chain(&geo.azim).all(|&v| v == 0.0));
    }

    #[test]
    fn point_count_mismatch() {
        let pts = PointSet::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        let g = knn_bruteforce(&pts, KnnParams::new(1, f64::INFINITY)).unwrap();
        let fewer = PointSet::new(vec![[0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
        assert!(relative_vectors(&fewer, &g).is_err());
    }

    #[test]
    fn elevation_azimuth_cases() {
        let (e, a) = elevation_azimuth(&[[0.0, 0.0, 1.0]], &[1.0]);
        assert_eq!((e[0], a[0]), (1.0, 0.0));
        let (e, a) = elevation_azimuth(&[[1.0, 0.0, 0.0]], &[1.0]);
        assert_eq!((e[0], a[0]), (0.0, 1.0));
        let s2 = 2f64.sqrt();
        let (e, a) = elevation_azimuth(&[[1.0, 1.0, s2]], &[2.0]);
        assert!((e[0] - s2 / 2.0).abs() < 1e-15);
        assert!((a[0] - 1.0 / s2).abs() < 1e-15);
    }

    #[test]
    fn attention_rows() {
        let m = distance_attention(&[1.0, 2.0, 3.0], 3);
        assert!((m[0] - 0.8).abs() < 1e-15 && (m[1] - 0.2).abs() < 1e-15 && m[2] == 0.0);
        let u = distance_attention(&[2.0, 2.0, 2.0], 3);
        assert!(u.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let scaled = distance_attention(&[10.0, 20.0, 30.0], 3);
        for (a, b) in m.iter().zip(&scaled) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_vjp_matches_finite_differences() {
        let d = [0.3, 1.1, 0.7, 2.0, 0.2];
        let g = [0.5, -1.0, 2.0, 0.3, 1.5];
        let mut analytic = [0.0; 5];
        distance_attention_row_vjp(&d, &g, &mut analytic);
        let f = |d: &[f64]| {
            let mut o = [0.0; 5];
            distance_attention_row(d, &mut o);
            o.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>()
        };
        for j in 0..5 {
            let mut p = d;
            let mut m = d;
            p[j] += 1e-6;
            m[j] -= 1e-6;
            let num = (f(&p) - f(&m)) / 2e-6;
            assert!((num - analytic[j]).abs() < 1e-7, "{j}: {num} vs {}", analytic[j]);
        }
    }

    proptest! {
        #[test]
        fn attention_simplex_and_monotone(row in prop::collection::vec(0.0f64..5.0, 1..12)) {
            let m = distance_attention(&row, row.len());
            prop_assert!(m.iter().all(|&v| v >= 0.0));
            prop_assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for a in 0..row.len() {
                for b in 0..row.len() {
                    if row[a] <= row[b] {
                        prop_assert!(m[a] >= m[b] - 1e-15);
                    }
                }
            }
        }

        #[test]
        fn ratios_bounded(v in prop::array::uniform3(-10.0f64..10.0)) {
            let d = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            let (e, a) = elevation_azimuth(&[v], &[d]);
            prop_assert!(e[0].abs() <= 1.0 && a[0].abs() <= 1.0);
            let f = AngularMode::CosOfRatio.factor(e[0], a[0]);
            prop_assert!(f >= 1f64.cos().powi(2) - 1e-15 && f <= 1.0);
        }
    }
}
