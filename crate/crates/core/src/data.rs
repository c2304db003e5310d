//! Datasets: OFF meshes, surface sampling, synthetic primitives,
//! normalisation, augmentation and the `VAPC` binary container.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, OffErrorKind, Result};
use crate::spatial::PointSet;

// ---- meshes -----------------------------------------------------------------

/// Triangle mesh. Every face index is `< vertices.len()`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
    /// Zero-area triangles removed while parsing.
    pub dropped_faces: usize,
}

impl Mesh {
    pub fn face_area(&self, f: [usize; 3]) -> f64 {
        let [a, b, c] = f.map(|i| self.vertices[i]);
        let u = sub(b, a);
        let v = sub(c, a);
        0.5 * norm(cross(u, v))
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// Parses OFF text. `source` names the input in error messages.
///
/// Accepts a separate or fused `OFF` keyword line (`OFF4 4 0`), `#`
/// comments and blank lines, and fan-triangulates polygons.
pub fn parse_off(text: &str, source: &str) -> Result<Mesh> {
    let err = |line: usize, kind| Error::OffParse {
        path: source.to_string(),
        line,
        kind,
    };
    let mut lines = text.lines().enumerate().filter_map(|(i, l)| {
        let body = l.split('#').next().unwrap_or("").trim();
        (!body.is_empty()).then_some((i + 1, body))
    });
    let last_line = text.lines().count().max(1);

    let (mut line_no, mut first) = lines.next().ok_or(err(1, OffErrorKind::MissingCounts))?;
    if let Some(rest) = first.strip_prefix("OFF") {
        if rest.trim().is_empty() {
            (line_no, first) = lines.next().ok_or(err(last_line, OffErrorKind::MissingCounts))?;
        } else {
            first = rest.trim();
        }
    }
    let counts = numbers::<usize>(first, line_no, source)?;
    if counts.len() < 2 {
        return Err(err(line_no, OffErrorKind::MissingCounts));
    }
    let (nv, nf) = (counts[0], counts[1]);

    let mut vertices = Vec::with_capacity(nv);
    while vertices.len() < nv {
        let Some((ln, l)) = lines.next() else {
            return Err(err(
                last_line,
                OffErrorKind::VertexCount {
                    expected: nv,
                    found: vertices.len(),
                },
            ));
        };
        let v = numbers::<f64>(l, ln, source)?;
        if v.len() < 3 {
            return Err(err(
                ln,
                OffErrorKind::VertexCount {
                    expected: nv,
                    found: vertices.len(),
                },
            ));
        }
        vertices.push([v[0], v[1], v[2]]);
    }

    let mut mesh = Mesh {
        vertices,
        ..Mesh::default()
    };
    for read in 0..nf {
        let Some((ln, l)) = lines.next() else {
            return Err(err(last_line, OffErrorKind::FaceCount { expected: nf, found: read }));
        };
        let f = numbers::<usize>(l, ln, source)?;
        let arity = f[0];
        if arity < 3 {
            return Err(err(ln, OffErrorKind::FaceArity(arity)));
        }
        if f.len() < arity + 1 {
            return Err(err(ln, OffErrorKind::FaceArity(f.len() - 1)));
        }
        let idx = &f[1..=arity];
        if let Some(&bad) = idx.iter().find(|&&i| i >= nv) {
            return Err(err(ln, OffErrorKind::FaceIndex { index: bad, vertices: nv }));
        }
        for t in 1..arity - 1 {
            let tri = [idx[0], idx[t], idx[t + 1]];
            if mesh.face_area(tri) > 0.0 {
                mesh.faces.push(tri);
            } else {
                mesh.dropped_faces += 1;
            }
        }
    }
    Ok(mesh)
}

fn numbers<T: std::str::FromStr>(line: &str, line_no: usize, source: &str) -> Result<Vec<T>> {
    line.split_whitespace()
        .map(|tok| {
            tok.parse::<T>().map_err(|_| Error::OffParse {
                path: source.to_string(),
                line: line_no,
                kind: OffErrorKind::BadNumber(tok.to_string()),
            })
        })
        .collect()
}

pub fn read_off(path: &Path) -> Result<Mesh> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_off(&text, &path.display().to_string())
}

/// Serialises a mesh so that [`parse_off`] reproduces it exactly.
pub fn write_off(mesh: &Mesh) -> String {
    let mut s = format!("OFF\n{} {} 0\n", mesh.vertices.len(), mesh.faces.len());
    for v in &mesh.vertices {
        s.push_str(&format!("{:?} {:?} {:?}\n", v[0], v[1], v[2]));
    }
    for f in &mesh.faces {
        s.push_str(&format!("3 {} {} {}\n", f[0], f[1], f[2]));
    }
    s
}

/// Draws `n` surface points: faces by area, positions uniform in each face.
pub fn sample_surface(mesh: &Mesh, n: usize, seed: u64) -> Result<PointSet> {
    let mut cum = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for &f in &mesh.faces {
        total += mesh.face_area(f);
        cum.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("mesh has zero surface area".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = (0..n)
        .map(|_| {
            let u = rng.random::<f64>() * total;
            let fi = cum.partition_point(|&c| c <= u).min(cum.len() - 1);
            let [a, b, c] = mesh.faces[fi].map(|i| mesh.vertices[i]);
            triangle_point(a, b, c, rng.random(), rng.random())
        })
        .collect();
    PointSet::new(pts)
}

fn triangle_point(a: [f64; 3], b: [f64; 3], c: [f64; 3], r1: f64, r2: f64) -> [f64; 3] {
    let s = r1.sqrt();
    let (wa, wb, wc) = (1.0 - s, s * (1.0 - r2), s * r2);
    [0, 1, 2].map(|k| wa * a[k] + wb * b[k] + wc * c[k])
}

// ---- synthetic primitives -----------------------------------------------------

/// Analytic shapes of the synthetic benchmark, in label order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    Sphere,
    Cube,
    Cylinder,
    Cone,
    Torus,
    Pyramid,
    Capsule,
    Disk,
}

pub const ALL_PRIMITIVES: [Primitive; 8] = [
    Primitive::Sphere,
    Primitive::Cube,
    Primitive::Cylinder,
    Primitive::Cone,
    Primitive::Torus,
    Primitive::Pyramid,
    Primitive::Capsule,
    Primitive::Disk,
];

impl Primitive {
    pub fn name(self) -> &'static str {
        match self {
            Primitive::Sphere => "sphere",
            Primitive::Cube => "cube",
            Primitive::Cylinder => "cylinder",
            Primitive::Cone => "cone",
            Primitive::Torus => "torus",
            Primitive::Pyramid => "pyramid",
            Primitive::Capsule => "capsule",
            Primitive::Disk => "disk",
        }
    }
}

impl std::str::FromStr for Primitive {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ALL_PRIMITIVES
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown shape class {s:?}")))
    }
}

/// Canonical sizes: sphere radius 1, cube half-extent 1, cylinder and cone
/// radius 1 over `z in [-1, 1]`, torus radii 1 and 0.35, pyramid base
/// half-width 1 with apex at `z = 1`, capsule radius 0.5 with half-length
/// 0.75, disk radius 1 in the `z = 0` plane.
pub const TORUS_TUBE: f64 = 0.35;
pub const CAPSULE_RADIUS: f64 = 0.5;
pub const CAPSULE_HALF: f64 = 0.75;

/// One uniform surface sample of a primitive in its canonical frame, plus
/// the index of the surface patch it came from.
pub fn sample_primitive(p: Primitive, rng: &mut ChaCha8Rng) -> ([f64; 3], usize) {
    match p {
        Primitive::Sphere => (unit_sphere(rng), 0),
        Primitive::Cube => {
            let face = rng.random_range(0..6);
            let (u, v) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let s = if face % 2 == 0 { 1.0 } else { -1.0 };
            let pt = match face / 2 {
                0 => [s, u, v],
                1 => [u, s, v],
                _ => [u, v, s],
            };
            (pt, face)
        }
        Primitive::Cylinder => {
            // side 4*pi, each cap pi
            let pick = rng.random::<f64>() * 6.0;
            if pick < 4.0 {
                let t = rng.random_range(0.0..2.0 * PI);
                ([t.cos(), t.sin(), rng.random_range(-1.0..1.0)], 0)
            } else {
                let z = if pick < 5.0 { 1.0 } else { -1.0 };
                let [x, y] = unit_disk(rng);
                ([x, y, z], 1)
            }
        }
        Primitive::Cone => {
            // lateral pi * sqrt(5), base pi
            let lateral = 5f64.sqrt();
            if rng.random::<f64>() * (lateral + 1.0) < lateral {
                let s = rng.random::<f64>().sqrt();
                let t = rng.random_range(0.0..2.0 * PI);
                ([s * t.cos(), s * t.sin(), 1.0 - 2.0 * s], 0)
            } else {
                let [x, y] = unit_disk(rng);
                ([x, y, -1.0], 1)
            }
        }
        Primitive::Torus => loop {
            let u = rng.random_range(0.0..2.0 * PI);
            let v = rng.random_range(0.0..2.0 * PI);
            // area element is proportional to 1 + (r / R) cos v
            if rng.random::<f64>() * (1.0 + TORUS_TUBE) < 1.0 + TORUS_TUBE * v.cos() {
                let ring = 1.0 + TORUS_TUBE * v.cos();
                break ([ring * u.cos(), ring * u.sin(), TORUS_TUBE * v.sin()], 0);
            }
        },
        Primitive::Pyramid => {
            let apex = [0.0, 0.0, 1.0];
            let corners = [[1.0, 1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, -1.0], [1.0, -1.0, -1.0]];
            // each side: base 2, slant height sqrt(5), area sqrt(5); base area 4
            let side = 5f64.sqrt();
            let pick = rng.random::<f64>() * (4.0 * side + 4.0);
            if pick < 4.0 * side {
                let f = ((pick / side) as usize).min(3);
                let pt = triangle_point(apex, corners[f], corners[(f + 1) % 4], rng.random(), rng.random());
                (pt, 0)
            } else {
                ([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), -1.0], 1)
            }
        }
        Primitive::Capsule => {
            let (r, h) = (CAPSULE_RADIUS, CAPSULE_HALF);
            let side = 2.0 * PI * r * 2.0 * h;
            let caps = 4.0 * PI * r * r;
            if rng.random::<f64>() * (side + caps) < side {
                let t = rng.random_range(0.0..2.0 * PI);
                ([r * t.cos(), r * t.sin(), rng.random_range(-h..h)], 0)
            } else {
                let d = unit_sphere(rng);
                let shift = if d[2] >= 0.0 { h } else { -h };
                ([r * d[0], r * d[1], r * d[2] + shift], 1)
            }
        }
        Primitive::Disk => {
            let [x, y] = unit_disk(rng);
            ([x, y, 0.0], 0)
        }
    }
}

fn unit_sphere(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let z: f64 = rng.random_range(-1.0..1.0);
    let t = rng.random_range(0.0..2.0 * PI);
    let s = (1.0 - z * z).max(0.0).sqrt();
    [s * t.cos(), s * t.sin(), z]
}

fn unit_disk(rng: &mut ChaCha8Rng) -> [f64; 2] {
    let r = rng.random::<f64>().sqrt();
    let t = rng.random_range(0.0..2.0 * PI);
    [r * t.cos(), r * t.sin()]
}

/// Per-axis aspect jitter range applied to synthetic shapes.
pub const ASPECT_JITTER: (f64, f64) = (0.85, 1.15);

/// Samples one synthetic cloud: canonical surface samples, aspect jitter,
/// a random rotation about the vertical axis, then unit-sphere
/// normalisation. Returns positions and per-point surface patch ids.
pub fn synth_cloud(p: Primitive, n_points: usize, rng: &mut ChaCha8Rng) -> (Vec<[f64; 3]>, Vec<usize>) {
    let scale = [0; 3].map(|_| rng.random_range(ASPECT_JITTER.0..ASPECT_JITTER.1));
    let theta = rng.random_range(0.0..2.0 * PI);
    let (c, s) = (theta.cos(), theta.sin());
    let mut pts = Vec::with_capacity(n_points);
    let mut patches = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        let (q, patch) = sample_primitive(p, rng);
        let q = [q[0] * scale[0], q[1] * scale[1], q[2] * scale[2]];
        pts.push([c * q[0] - s * q[1], s * q[0] + c * q[1], q[2]]);
        patches.push(patch);
    }
    normalize_unit_sphere(&mut pts);
    (pts, patches)
}

/// Classification dataset of `per_class` clouds for each listed primitive;
/// labels follow the order of `classes`.
pub fn synth_shapes(classes: &[Primitive], per_class: usize, n_points: usize, seed: u64) -> Result<Dataset> {
    if classes.len() < 2 {
        return Err(Error::InvalidArgument("need at least two shape classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(classes.len() * per_class);
    for _ in 0..per_class {
        for (label, &p) in classes.iter().enumerate() {
            let (pts, _) = synth_cloud(p, n_points, &mut rng);
            samples.push(Sample::from_points(&pts, label as u16, None));
        }
    }
    Ok(Dataset {
        num_points: n_points,
        extra_dim: 0,
        num_classes: classes.len(),
        segmentation: false,
        samples,
    })
}

/// Categories of the synthetic part-segmentation set, each with two parts
/// (lateral surface and caps or base).
pub const SEG_CATEGORIES: [Primitive; 4] = [Primitive::Cylinder, Primitive::Cone, Primitive::Pyramid, Primitive::Capsule];

/// Part-labelled dataset: category `c` owns part labels `2c` and `2c + 1`.
pub fn synth_parts(per_category: usize, n_points: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for _ in 0..per_category {
        for (cat, &p) in SEG_CATEGORIES.iter().enumerate() {
            let (pts, patches) = synth_cloud(p, n_points, &mut rng);
            let parts = patches.iter().map(|&q| (2 * cat + q.min(1)) as u16).collect();
            samples.push(Sample::from_points(&pts, cat as u16, Some(parts)));
        }
    }
    Ok(Dataset {
        num_points: n_points,
        extra_dim: 0,
        num_classes: 2 * SEG_CATEGORIES.len(),
        segmentation: true,
        samples,
    })
}

/// Centres the cloud at its centroid and scales the farthest point to unit
/// norm. A cloud of coincident points is only centred.
pub fn normalize_unit_sphere(points: &mut [[f64; 3]]) {
    if points.is_empty() {
        return;
    }
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points.iter() {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    c = c.map(|v| v / n);
    let mut far = 0.0f64;
    for p in points.iter_mut() {
        *p = sub(*p, c);
        far = far.max(norm(*p));
    }
    if far > 0.0 {
        for p in points.iter_mut() {
            *p = p.map(|v| v / far);
        }
    }
}

/// Training-time perturbation magnitudes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub scale_range: (f64, f64),
    pub jitter_sigma: f64,
    pub jitter_clip: f64,
    pub shift_range: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            scale_range: (0.8, 1.25),
            jitter_sigma: 0.01,
            jitter_clip: 0.05,
            shift_range: 0.1,
        }
    }
}

/// Anisotropic scale, clipped Gaussian jitter per coordinate, then a
/// global shift.
pub fn augment(points: &mut [[f64; 3]], params: &AugmentParams, rng: &mut ChaCha8Rng) {
    let (lo, hi) = params.scale_range;
    let scale = [0; 3].map(|_| if hi > lo { rng.random_range(lo..hi) } else { lo });
    let shift = [0; 3].map(|_| {
        if params.shift_range > 0.0 {
            rng.random_range(-params.shift_range..params.shift_range)
        } else {
            0.0
        }
    });
    let normal = (params.jitter_sigma > 0.0).then(|| Normal::new(0.0, params.jitter_sigma).expect("sigma > 0"));
    for p in points.iter_mut() {
        for k in 0..3 {
            let j = match &normal {
                Some(d) => d.sample(rng).clamp(-params.jitter_clip, params.jitter_clip),
                None => 0.0,
            };
            p[k] = p[k] * scale[k] + j + shift[k];
        }
    }
}

// ---- container ----------------------------------------------------------------

pub const VAPC_MAGIC: [u8; 4] = *b"VAPC";
pub const VAPC_VERSION: u32 = 1;
/// Set in the stored class count for part-segmentation payloads.
pub const SEGMENTATION_FLAG: u32 = 1 << 31;
/// Upper bound on segmentation categories (one-hot width of the head).
pub const MAX_CATEGORIES: usize = 16;
const HEADER_LEN: usize = 24;

/// One cloud. `label` is the class, or the category for segmentation, in
/// which case `point_labels` holds one part label per point.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Row-major `N x 3`.
    pub positions: Vec<f32>,
    /// Row-major `N x E`.
    pub extras: Vec<f32>,
    pub label: u16,
    pub point_labels: Option<Vec<u16>>,
}

impl Sample {
    pub fn from_points(pts: &[[f64; 3]], label: u16, point_labels: Option<Vec<u16>>) -> Self {
        Self {
            positions: pts.iter().flatten().map(|&v| v as f32).collect(),
            extras: Vec::new(),
            label,
            point_labels,
        }
    }

    pub fn points(&self) -> Vec<[f64; 3]> {
        self.positions
            .chunks_exact(3)
            .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
            .collect()
    }

    pub fn len(&self) -> usize {
        self.positions.len() / 3
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// In-memory form of a `VAPC` file.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_points: usize,
    pub extra_dim: usize,
    /// Classes, or part labels for segmentation.
    pub num_classes: usize,
    pub segmentation: bool,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn sample_bytes(&self) -> usize {
        let n = self.num_points;
        let labels = if self.segmentation { 2 + 2 * n } else { 2 };
        4 * n * (3 + self.extra_dim) + labels
    }

    /// Part labels observed for each category, sorted.
    pub fn category_parts(&self) -> Vec<Vec<usize>> {
        let mut parts = vec![Vec::new(); MAX_CATEGORIES];
        for s in &self.samples {
            if let Some(pl) = &s.point_labels {
                let set: &mut Vec<usize> = &mut parts[s.label as usize];
                for &l in pl {
                    if !set.contains(&(l as usize)) {
                        set.push(l as usize);
                    }
                }
            }
        }
        for p in &mut parts {
            p.sort_unstable();
        }
        while parts.last().is_some_and(|p| p.is_empty()) {
            parts.pop();
        }
        parts
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_points;
        for (i, s) in self.samples.iter().enumerate() {
            let pl_len = s.point_labels.as_ref().map(|p| p.len());
            let seg_ok = if self.segmentation { pl_len == Some(n) } else { pl_len.is_none() };
            if s.positions.len() != 3 * n || s.extras.len() != self.extra_dim * n || !seg_ok {
                return Err(Error::InvalidArgument(format!("sample {i} does not match the dataset layout")));
            }
            if self.segmentation {
                if s.label as usize >= MAX_CATEGORIES {
                    return Err(Error::LabelRange {
                        sample: i,
                        label: s.label as usize,
                        classes: MAX_CATEGORIES,
                    });
                }
                if let Some(&l) = s.point_labels.iter().flatten().find(|&&l| l as usize >= self.num_classes) {
                    return Err(Error::LabelRange {
                        sample: i,
                        label: l as usize,
                        classes: self.num_classes,
                    });
                }
            } else if s.label as usize >= self.num_classes {
                return Err(Error::LabelRange {
                    sample: i,
                    label: s.label as usize,
                    classes: self.num_classes,
                });
            }
        }
        Ok(())
    }
}

pub fn write_container<W: Write>(ds: &Dataset, mut w: W) -> Result<()> {
    ds.validate()?;
    let classes = ds.num_classes as u32 | if ds.segmentation { SEGMENTATION_FLAG } else { 0 };
    let mut buf = Vec::with_capacity(HEADER_LEN + ds.len() * ds.sample_bytes());
    buf.extend_from_slice(&VAPC_MAGIC);
    for v in [VAPC_VERSION, ds.len() as u32, ds.num_points as u32, ds.extra_dim as u32, classes] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for s in &ds.samples {
        for v in s.positions.iter().chain(&s.extras) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&s.label.to_le_bytes());
        for l in s.point_labels.iter().flatten() {
            buf.extend_from_slice(&l.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_container<R: Read>(mut r: R) -> Result<Dataset> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode_container(&bytes)
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

pub fn decode_container(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 4 {
        return Err(Error::Length {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if found != VAPC_MAGIC {
        return Err(Error::BadMagic {
            expected: VAPC_MAGIC,
            found,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Length {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let version = u32_at(bytes, 4);
    if version != VAPC_VERSION {
        return Err(Error::Version(version));
    }
    let count = u32_at(bytes, 8) as usize;
    let n = u32_at(bytes, 12) as usize;
    let e = u32_at(bytes, 16) as usize;
    let raw_classes = u32_at(bytes, 20);
    let mut ds = Dataset {
        num_points: n,
        extra_dim: e,
        num_classes: (raw_classes & !SEGMENTATION_FLAG) as usize,
        segmentation: raw_classes & SEGMENTATION_FLAG != 0,
        samples: Vec::with_capacity(count),
    };
    let expected = count
        .checked_mul(ds.sample_bytes())
        .and_then(|p| p.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::InvalidArgument("container header overflows".into()))?;
    if bytes.len() != expected {
        return Err(Error::Length {
            expected,
            found: bytes.len(),
        });
    }
    let f32s = |at: usize, len: usize| -> Vec<f32> {
        bytes[at..at + 4 * len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect()
    };
    let u16s = |at: usize, len: usize| -> Vec<u16> {
        bytes[at..at + 2 * len]
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().expect("2 bytes")))
            .collect()
    };
    let mut at = HEADER_LEN;
    for _ in 0..count {
        let positions = f32s(at, 3 * n);
        at += 12 * n;
        let extras = f32s(at, e * n);
        at += 4 * e * n;
        let label = u16s(at, 1)[0];
        at += 2;
        let point_labels = ds.segmentation.then(|| {
            let v = u16s(at, n);
            at += 2 * n;
            v
        });
        ds.samples.push(Sample {
            positions,
            extras,
            label,
            point_labels,
        });
    }
    ds.validate()?;
    Ok(ds)
}

pub fn save_container(ds: &Dataset, path: &Path) -> Result<()> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let f = std::fs::File::create(path).map_err(io)?;
    let mut w = std::io::BufWriter::new(f);
    write_container(ds, &mut w)?;
    w.flush().map_err(io)
}

pub fn load_container(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_container(&bytes)
}
