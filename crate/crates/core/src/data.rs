//! Synthetic articulated chains, skinning weights, dataset splits and random
//! motions.
//!
//! A chain is a tube along the x axis cut into segments. Joints sit between
//! segments; posing rotates every distal segment about its joint pivot
//! (forward kinematics) and blends the per-segment motions with the skinning
//! weights.

// Only needed when std is absent from the build graph.
#[allow(unused_imports)]
use num_traits::Float;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::group::{act_points, compose, EuclideanMotion};
use crate::linalg3::{quat_to_mat, Mat3, Vec3};

/// Haar-uniform rotation from a normalized Gaussian quaternion.
pub fn random_rotation(rng: &mut impl Rng) -> Mat3 {
    loop {
        let q: [f64; 4] = core::array::from_fn(|_| StandardNormal.sample(rng));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-12 {
            return quat_to_mat(q.map(|v| v / n));
        }
    }
}

/// Random motion: Haar rotation, optionally composed with `−I` (a
/// reflection) with probability one half, and a translation uniform in
/// `[−scale, scale]³`.
pub fn random_motion(rng: &mut impl Rng, scale: f64, allow_reflection: bool) -> EuclideanMotion {
    let mut r = random_rotation(rng);
    if allow_reflection && rng.random_bool(0.5) {
        r = r.scale(-1.0);
    }
    let t = if scale > 0.0 {
        Vec3::new(
            rng.random_range(-scale..=scale),
            rng.random_range(-scale..=scale),
            rng.random_range(-scale..=scale),
        )
    } else {
        Vec3::ZERO
    };
    EuclideanMotion::new(r, t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for (i, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&v| v >= n) {
                return Err(Error::InvalidSpec(format!("face {i} references a vertex beyond {n}")));
            }
        }
        Ok(())
    }
}

/// Row-stochastic vertex-to-part weights, `n×k`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PartWeights {
    n: usize,
    k: usize,
    data: Vec<f64>,
}

impl PartWeights {
    pub fn new(n: usize, k: usize, data: Vec<f64>) -> Result<Self> {
        if k == 0 || data.len() != n * k {
            return Err(Error::InvalidSpec(format!(
                "part weights need n·k = {} entries with k ≥ 1, got {}",
                n * k,
                data.len()
            )));
        }
        for (i, row) in data.chunks(k).enumerate() {
            if row.iter().any(|w| !(0.0..=1.0).contains(w)) {
                return Err(Error::InvalidSpec(format!("row {i} has a weight outside [0, 1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-8 {
                return Err(Error::InvalidSpec(format!("row {i} sums to {s}, not 1")));
            }
        }
        Ok(Self { n, k, data })
    }

    /// Every vertex fully in part `labels[i]`.
    pub fn hard(labels: &[usize], k: usize) -> Result<Self> {
        let mut data = vec![0.0; labels.len() * k];
        for (i, &l) in labels.iter().enumerate() {
            if l >= k {
                return Err(Error::InvalidSpec(format!("label {l} ≥ k = {k}")));
            }
            data[i * k + l] = 1.0;
        }
        Self::new(labels.len(), k, data)
    }

    /// All ones, `k = 1`.
    pub fn single(n: usize) -> Self {
        Self {
            n,
            k: 1,
            data: vec![1.0; n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.k + j]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, j)).collect()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_hard(&self) -> bool {
        self.data.iter().all(|&w| w == 0.0 || w == 1.0)
    }

    /// Part with the largest weight per vertex (lowest index on ties).
    pub fn labels(&self) -> Vec<usize> {
        self.data
            .chunks(self.k)
            .map(|row| {
                let mut best = 0;
                for (j, &w) in row.iter().enumerate() {
                    if w > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    /// Row-wise `wᵢⱼ^{1/T} / Σₗ wᵢₗ^{1/T}`; approaches hard labels as `T → 0`.
    pub fn sharpened(&self, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::InvalidSpec("temperature must be positive".into()));
        }
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.k) {
            let top = row.iter().copied().fold(0.0, f64::max);
            let e: Vec<f64> = row.iter().map(|&w| (w / top).powf(1.0 / temperature)).collect();
            let s: f64 = e.iter().sum();
            data.extend(e.into_iter().map(|v| v / s));
        }
        Self::new(self.n, self.k, data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArticulatedChainSpec {
    pub segments: usize,
    pub ring_size: usize,
    pub rings_per_segment: usize,
    pub segment_length: f64,
    pub radius: f64,
    /// Ratio of the z semi-axis to the y semi-axis of the cross-section.
    /// Anything but 1 keeps the rest-pose covariance spectrum simple.
    pub aspect: f64,
    /// Radius grows linearly along the chain, from `1 − taper` to `1 + taper`
    /// times `radius`.
    pub taper: f64,
    /// Skews the cross-section off both of its mirror axes. With `taper`
    /// this leaves the rest pose without reflection symmetries, which an
    /// exactly equivariant autoencoder cannot resolve.
    pub bulge: f64,
    /// Axis-angle rotation per joint, `segments − 1` entries.
    pub joint_angles: Vec<Vec3>,
    pub soft_weights: bool,
}

impl Default for ArticulatedChainSpec {
    fn default() -> Self {
        Self {
            segments: 3,
            ring_size: 8,
            rings_per_segment: 8,
            segment_length: 1.0,
            radius: 0.25,
            aspect: 0.6,
            taper: 0.3,
            bulge: 0.4,
            joint_angles: vec![Vec3::ZERO; 2],
            soft_weights: false,
        }
    }
}

impl ArticulatedChainSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.into()));
        if self.segments < 2 {
            return bad("segments must be ≥ 2");
        }
        if self.ring_size < 3 {
            return bad("ring size must be ≥ 3");
        }
        if self.rings_per_segment < 1 {
            return bad("rings per segment must be ≥ 1");
        }
        if self.soft_weights && self.rings_per_segment < 4 {
            return bad("soft weights need at least 4 rings per segment");
        }
        if !(self.segment_length > 0.0 && self.radius > 0.0 && self.aspect > 0.0) {
            return bad("lengths, radius and aspect must be positive");
        }
        if !(self.taper.abs() < 1.0) || !(self.bulge.abs() < 1.0) {
            return bad("taper and bulge must lie in (−1, 1)");
        }
        if self.joint_angles.len() != self.segments - 1 {
            return bad("need one joint angle per joint (segments − 1)");
        }
        if self.joint_angles.iter().any(|a| !a.is_finite()) {
            return bad("joint angles must be finite");
        }
        Ok(())
    }

    pub fn vertex_count(&self) -> usize {
        self.segments * self.rings_per_segment * self.ring_size
    }

    fn total_length(&self) -> f64 {
        self.segments as f64 * self.segment_length
    }

    fn ring_spacing(&self) -> f64 {
        self.segment_length / self.rings_per_segment as f64
    }

    /// Pivot of joint `j`, between segments `j` and `j + 1`, in rest pose.
    pub fn pivot(&self, j: usize) -> Vec3 {
        Vec3::new((j + 1) as f64 * self.segment_length - 0.5 * self.total_length(), 0.0, 0.0)
    }

    /// Rigid motion of each segment under forward kinematics.
    pub fn segment_motions(&self) -> Vec<EuclideanMotion> {
        let mut out = vec![EuclideanMotion::IDENTITY];
        for j in 0..self.segments - 1 {
            let p = self.pivot(j);
            let r = Mat3::from_rotation_vector(self.joint_angles[j]);
            // x ↦ R(x − p) + p
            let local = EuclideanMotion::new(r, p - r * p);
            let prev = out[j];
            out.push(compose(&prev, &local));
        }
        out
    }
}

/// Rest-pose tube, triangles and skinning weights.
pub fn chain_rest(spec: &ArticulatedChainSpec) -> Result<(Mesh, PartWeights)> {
    spec.validate()?;
    let rings = spec.segments * spec.rings_per_segment;
    let spacing = spec.ring_spacing();
    let half = 0.5 * spec.total_length();
    let mut vertices = Vec::with_capacity(spec.vertex_count());
    let mut weights = Vec::with_capacity(spec.vertex_count() * spec.segments);
    for ring in 0..rings {
        let x = (ring as f64 + 0.5) * spacing - half;
        let seg = ring / spec.rings_per_segment;
        let w = ring_weights(spec, ring, seg);
        let r = spec.radius * (1.0 + spec.taper * x / half);
        for k in 0..spec.ring_size {
            let theta = 2.0 * core::f64::consts::PI * k as f64 / spec.ring_size as f64;
            let (s, c) = theta.sin_cos();
            let b = 0.5 * spec.bulge;
            vertices.push(Vec3::new(x, r * (c + b * s * s), spec.aspect * r * (s + b * c * c)));
            weights.extend_from_slice(&w);
        }
    }
    let m = spec.ring_size;
    let mut faces = Vec::with_capacity(2 * (rings - 1) * m);
    for ring in 0..rings - 1 {
        for k in 0..m {
            let a = ring * m + k;
            let b = ring * m + (k + 1) % m;
            let c = a + m;
            let d = b + m;
            faces.push([a, b, d]);
            faces.push([a, d, c]);
        }
    }
    let w = PartWeights::new(vertices.len(), spec.segments, weights)?;
    Ok((Mesh { vertices, faces }, w))
}

/// Hard: the ring's own segment. Soft: linear blend toward the neighbouring
/// segment for the two rings on each side of a joint.
fn ring_weights(spec: &ArticulatedChainSpec, ring: usize, seg: usize) -> Vec<f64> {
    let mut w = vec![0.0; spec.segments];
    w[seg] = 1.0;
    if !spec.soft_weights {
        return w;
    }
    let band = 2.0 * spec.ring_spacing();
    let x = (ring as f64 + 0.5) * spec.ring_spacing();
    let start = seg as f64 * spec.segment_length;
    let end = start + spec.segment_length;
    let (delta, other) = if x - start < end - x {
        (x - start, seg.checked_sub(1))
    } else {
        (end - x, (seg + 1 < spec.segments).then_some(seg + 1))
    };
    if let Some(o) = other {
        if delta < band {
            let own = 0.5 + delta / (2.0 * band);
            w[seg] = own;
            w[o] = 1.0 - own;
        }
    }
    w
}

/// Linear blend skinning of `rest` with per-part motions.
pub fn skin(rest: &[Vec3], weights: &PartWeights, motions: &[EuclideanMotion]) -> Result<Vec<Vec3>> {
    if rest.len() != weights.n() || motions.len() != weights.k() {
        return Err(Error::shape(
            "skin",
            format!(
                "{} vertices / {} motions vs weights {}x{}",
                rest.len(),
                motions.len(),
                weights.n(),
                weights.k()
            ),
        ));
    }
    Ok(rest
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let mut y = Vec3::ZERO;
            for (j, g) in motions.iter().enumerate() {
                let w = weights.get(i, j);
                if w != 0.0 {
                    y += g.apply(x) * w;
                }
            }
            y
        })
        .collect())
}

/// Posed chain and its skinning weights.
pub fn gen_chain(spec: &ArticulatedChainSpec) -> Result<(Mesh, PartWeights)> {
    let (rest, w) = chain_rest(spec)?;
    let posed = skin(&rest.vertices, &w, &spec.segment_motions())?;
    Ok((
        Mesh {
            vertices: posed,
            faces: rest.faces,
        },
        w,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainDatasetConfig {
    pub count: usize,
    pub template: ArticulatedChainSpec,
    /// Bend about z per joint is uniform in `±max_bend`.
    pub max_bend: f64,
    /// Bend about y per joint is uniform in `±max_twist`.
    pub max_twist: f64,
}

impl Default for ChainDatasetConfig {
    fn default() -> Self {
        Self {
            count: 256,
            template: ArticulatedChainSpec::default(),
            max_bend: 1.0,
            max_twist: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainDataset {
    pub faces: Vec<[usize; 3]>,
    pub weights: PartWeights,
    pub shapes: Vec<Vec<Vec3>>,
    /// Pose parameter per shape: the first joint's bend about z.
    pub poses: Vec<f64>,
    pub joint_angles: Vec<Vec<Vec3>>,
}

pub fn gen_chain_dataset(cfg: &ChainDatasetConfig, rng: &mut impl Rng) -> Result<ChainDataset> {
    cfg.template.validate()?;
    let (rest, weights) = chain_rest(&cfg.template)?;
    let joints = cfg.template.segments - 1;
    let mut shapes = Vec::with_capacity(cfg.count);
    let mut poses = Vec::with_capacity(cfg.count);
    let mut all_angles = Vec::with_capacity(cfg.count);
    for _ in 0..cfg.count {
        let angles: Vec<Vec3> = (0..joints)
            .map(|_| {
                let bend = if cfg.max_bend > 0.0 { rng.random_range(-cfg.max_bend..=cfg.max_bend) } else { 0.0 };
                let twist = if cfg.max_twist > 0.0 { rng.random_range(-cfg.max_twist..=cfg.max_twist) } else { 0.0 };
                Vec3::new(0.0, twist, bend)
            })
            .collect();
        let spec = ArticulatedChainSpec {
            joint_angles: angles.clone(),
            ..cfg.template.clone()
        };
        shapes.push(skin(&rest.vertices, &weights, &spec.segment_motions())?);
        poses.push(angles[0].z);
        all_angles.push(angles);
    }
    Ok(ChainDataset {
        faces: rest.faces,
        weights,
        shapes,
        poses,
        joint_angles: all_angles,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    /// Held-out shapes as they are.
    I,
    /// Held-out shapes rotated by a uniform angle about +z.
    Z,
    /// Held-out shapes rotated by Haar-uniform rotations.
    SO3,
    /// Shapes whose pose parameter lies in a band are held out.
    UnseenPose,
}

impl SplitKind {
    pub fn name(self) -> &'static str {
        match self {
            SplitKind::I => "I",
            SplitKind::Z => "z",
            SplitKind::SO3 => "SO3",
            SplitKind::UnseenPose => "unseen-pose",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "I" | "i" => Some(SplitKind::I),
            "z" | "Z" => Some(SplitKind::Z),
            "SO3" | "so3" => Some(SplitKind::SO3),
            "unseen-pose" => Some(SplitKind::UnseenPose),
            _ => None,
        }
    }

    fn stream(self) -> u64 {
        match self {
            SplitKind::I => 1,
            SplitKind::Z => 2,
            SplitKind::SO3 => 3,
            SplitKind::UnseenPose => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitConfig {
    pub test_fraction: f64,
    /// Half-open band `[lo, hi)` of held-out pose parameters.
    pub pose_band: (f64, f64),
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.3,
            pose_band: (0.3, 0.6),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub kind: SplitKind,
    pub seed: u64,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// One motion per test shape, applied before evaluation.
    pub test_motions: Vec<EuclideanMotion>,
}

/// Train/test partition. For `I`, `z` and `SO3` the partition depends only
/// on the seed, so the three kinds hold out the same shapes.
pub fn make_splits(poses: &[f64], kind: SplitKind, seed: u64, cfg: &SplitConfig) -> Result<DatasetSplit> {
    if poses.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = poses.len();
    let (train, test) = if kind == SplitKind::UnseenPose {
        let (lo, hi) = cfg.pose_band;
        let (test, train): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| poses[i] >= lo && poses[i] < hi);
        (train, test)
    } else {
        if !(cfg.test_fraction > 0.0 && cfg.test_fraction < 1.0) {
            return Err(Error::Config("test fraction must be in (0, 1)".into()));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = ((n as f64 * cfg.test_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
        let mut test = idx[..n_test].to_vec();
        let mut train = idx[n_test..].to_vec();
        test.sort_unstable();
        train.sort_unstable();
        (train, test)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(kind.stream());
    let test_motions = test
        .iter()
        .map(|_| match kind {
            SplitKind::I | SplitKind::UnseenPose => EuclideanMotion::IDENTITY,
            SplitKind::Z => EuclideanMotion::rotation(Mat3::rot_z(rng.random_range(0.0..2.0 * core::f64::consts::PI))),
            SplitKind::SO3 => EuclideanMotion::rotation(random_rotation(&mut rng)),
        })
        .collect();
    Ok(DatasetSplit {
        kind,
        seed,
        train,
        test,
        test_motions,
    })
}

/// Test shapes of a split, with the split's motions applied.
pub fn split_test_shapes(shapes: &[Vec<Vec3>], split: &DatasetSplit) -> Vec<Vec<Vec3>> {
    split
        .test
        .iter()
        .zip(&split.test_motions)
        .map(|(&i, g)| act_points(g, &shapes[i]))
        .collect()
}

/// Axis-aligned bounding box.
pub fn bounding_box<'a>(points: impl IntoIterator<Item = &'a Vec3>) -> Option<(Vec3, Vec3)> {
    let mut it = points.into_iter();
    let first = *it.next()?;
    let (mut lo, mut hi) = (first, first);
    for p in it {
        lo = Vec3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z));
        hi = Vec3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z));
    }
    Some((lo, hi))
}

/// Grows a box by `frac` of its extent on every side.
pub fn inflate_box(b: (Vec3, Vec3), frac: f64) -> (Vec3, Vec3) {
    let pad = (b.1 - b.0) * frac;
    (b.0 - pad, b.1 + pad)
}

/// Area-weighted uniform samples on a triangle mesh.
pub fn sample_surface(mesh: &Mesh, count: usize, rng: &mut impl Rng) -> Result<Vec<Vec3>> {
    mesh.validate()?;
    let mut cum = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in &mesh.faces {
        let [a, b, c] = f.map(|i| mesh.vertices[i]);
        total += (b - a).cross(c - a).norm() * 0.5;
        cum.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::InvalidSpec("mesh has no area".into()));
    }
    Ok((0..count)
        .map(|_| {
            let r = rng.random_range(0.0..total);
            let fi = cum.partition_point(|&c| c <= r).min(mesh.faces.len() - 1);
            let [a, b, c] = mesh.faces[fi].map(|i| mesh.vertices[i]);
            let (mut u, mut v): (f64, f64) = (rng.random(), rng.random());
            if u + v > 1.0 {
                u = 1.0 - u;
                v = 1.0 - v;
            }
            a + (b - a) * u + (c - a) * v
        })
        .collect())
}

/// Adds Gaussian noise to every point and replaces a fraction with outliers
/// drawn uniformly from the inflated bounding box.
pub fn corrupt_cloud(points: &[Vec3], noise: f64, outlier_frac: f64, rng: &mut impl Rng) -> Vec<Vec3> {
    let Some(bb) = bounding_box(points) else {
        return Vec::new();
    };
    let (lo, hi) = inflate_box(bb, 0.1);
    let n_out = (points.len() as f64 * outlier_frac).round() as usize;
    points
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            if i < n_out {
                Vec3::new(
                    rng.random_range(lo.x..=hi.x),
                    rng.random_range(lo.y..=hi.y),
                    rng.random_range(lo.z..=hi.z),
                )
            } else {
                let e: [f64; 3] = core::array::from_fn(|_| StandardNormal.sample(rng));
                p + Vec3::from_array(e) * noise
            }
        })
        .collect()
}

/// Uniform samples on a sphere surface.
pub fn sphere_points(center: Vec3, radius: f64, count: usize, rng: &mut impl Rng) -> Vec<Vec3> {
    (0..count)
        .map(|_| loop {
            let e: [f64; 3] = core::array::from_fn(|_| StandardNormal.sample(rng));
            let v = Vec3::from_array(e);
            let n = v.norm();
            if n > 1e-12 {
                break center + v * (radius / n);
            }
        })
        .collect()
}
