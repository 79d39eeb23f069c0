//! Evaluation metrics and zero-level-set point extraction.
//!
//! Nearest neighbours are brute force. Inside means `f ≤ 0`.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::group::ScalarField;
use crate::linalg3::Vec3;

/// Mean over all vertices of all meshes of `‖xᵢⱼ − yᵢⱼ‖` (a mean of
/// norms, not of squares).
pub fn mse(xs: &[Vec<Vec3>], ys: &[Vec<Vec3>]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::shape("mse", alloc::format!("{} vs {} meshes", xs.len(), ys.len())));
    }
    if xs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, (x, y)) in xs.iter().zip(ys).enumerate() {
        if x.len() != y.len() {
            return Err(Error::shape(
                "mse",
                alloc::format!("mesh {i}: {} vs {} vertices", x.len(), y.len()),
            ));
        }
        for (a, b) in x.iter().zip(y) {
            sum += a.dist(*b);
        }
        count += x.len();
    }
    Ok(sum / count.max(1) as f64)
}

/// Index of and squared distance to the nearest point of `b` (lowest index
/// on ties). `b` must be nonempty.
pub fn nearest(p: Vec3, b: &[Vec3]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, q) in b.iter().enumerate() {
        let d = (p - *q).norm_sq();
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// `(1/|A|) Σ_{a∈A} min_{b∈B} ‖a − b‖²`.
pub fn chamfer_one_sided(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(a.iter().map(|p| nearest(*p, b).1).sum::<f64>() / a.len() as f64)
}

/// Average of the two one-sided distances.
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    let ab = chamfer_one_sided(a, b)?;
    let ba = chamfer_one_sided(b, a)?;
    Ok(0.5 * (ab + ba))
}

/// `(1/|S|) Σ o_X(s) o_Y(s)`: the fraction of samples inside both shapes.
pub fn iou(samples: &[Vec3], occ_x: &dyn Fn(Vec3) -> bool, occ_y: &dyn Fn(Vec3) -> bool) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySample);
    }
    let hits = samples.iter().filter(|&&s| occ_x(s) && occ_y(s)).count();
    Ok(hits as f64 / samples.len() as f64)
}

/// `x ↦ f(x) ≤ 0`.
pub fn occupancy_from_field(f: &ScalarField) -> impl Fn(Vec3) -> bool + '_ {
    move |x| f.eval(x) <= 0.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IouConfig {
    pub bbox_samples: usize,
    pub near_samples: usize,
    pub sigma: f64,
    pub bbox: (Vec3, Vec3),
}

impl IouConfig {
    /// Desk-scale counts: 10⁴ box samples and 2·10⁴ near-surface samples.
    pub fn desk(bbox: (Vec3, Vec3)) -> Self {
        Self {
            bbox_samples: 10_000,
            near_samples: 20_000,
            sigma: 0.01,
            bbox,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bbox_samples + self.near_samples == 0 || !(self.sigma > 0.0) {
            return Err(Error::Config("IoU needs samples > 0 and sigma > 0".into()));
        }
        Ok(())
    }
}

/// Uniform samples in the box plus Gaussian perturbations of surface points.
pub fn iou_samples(cfg: &IouConfig, surface: &[Vec3], rng: &mut impl Rng) -> Result<Vec<Vec3>> {
    cfg.validate()?;
    if cfg.near_samples > 0 && surface.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let (lo, hi) = cfg.bbox;
    let mut out = Vec::with_capacity(cfg.bbox_samples + cfg.near_samples);
    for _ in 0..cfg.bbox_samples {
        out.push(Vec3::new(
            rng.random_range(lo.x..=hi.x),
            rng.random_range(lo.y..=hi.y),
            rng.random_range(lo.z..=hi.z),
        ));
    }
    let noise = Normal::new(0.0, cfg.sigma).map_err(|_| Error::Config("invalid sigma".into()))?;
    for _ in 0..cfg.near_samples {
        let p = surface[rng.random_range(0..surface.len())];
        out.push(p + Vec3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng)));
    }
    Ok(out)
}

/// Regular grid over a box with `res` cells (so `res + 1` samples) per axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub min: Vec3,
    pub max: Vec3,
    pub res: [usize; 3],
}

impl GridSpec {
    pub fn new(min: Vec3, max: Vec3, res: [usize; 3]) -> Result<Self> {
        if res.iter().any(|&r| r < 2) {
            return Err(Error::Config("grid resolution must be ≥ 2 per axis".into()));
        }
        if !(max.x > min.x && max.y > min.y && max.z > min.z) {
            return Err(Error::Config("grid box must have positive extent".into()));
        }
        Ok(Self { min, max, res })
    }

    /// Same resolution on every axis. Panics on an invalid box or `res < 2`.
    pub fn cube(min: Vec3, max: Vec3, res: usize) -> Self {
        Self::new(min, max, [res; 3]).expect("valid grid")
    }

    pub fn cell(&self) -> Vec3 {
        let d = self.max - self.min;
        Vec3::new(d.x / self.res[0] as f64, d.y / self.res[1] as f64, d.z / self.res[2] as f64)
    }

    pub fn cell_diagonal(&self) -> f64 {
        self.cell().norm()
    }

    fn samples(&self) -> [usize; 3] {
        self.res.map(|r| r + 1)
    }

    fn index(&self, i: usize, j: usize, k: usize) -> usize {
        let s = self.samples();
        (i * s[1] + j) * s[2] + k
    }

    fn point(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let d = self.max - self.min;
        let coord = |lo: f64, ext: f64, t: usize, r: usize| if t == r { lo + ext } else { lo + ext * (t as f64 / r as f64) };
        Vec3::new(
            coord(self.min.x, d.x, i, self.res[0]),
            coord(self.min.y, d.y, j, self.res[1]),
            coord(self.min.z, d.z, k, self.res[2]),
        )
    }

    /// Grid vertices with `x` slowest and `z` fastest.
    pub fn points(&self) -> Vec<Vec3> {
        let s = self.samples();
        let mut out = Vec::with_capacity(s[0] * s[1] * s[2]);
        for i in 0..s[0] {
            for j in 0..s[1] {
                for k in 0..s[2] {
                    out.push(self.point(i, j, k));
                }
            }
        }
        out
    }
}

/// Linear-interpolation zero points on every grid edge whose endpoint values
/// have strictly opposite signs. `values` are at [`GridSpec::points`].
/// Edges are visited x-edges first, then y, then z, each in vertex order.
pub fn zero_crossings_from_values(grid: &GridSpec, values: &[f64]) -> Result<Vec<Vec3>> {
    let s = grid.samples();
    if values.len() != s[0] * s[1] * s[2] {
        return Err(Error::shape(
            "zero_crossings_from_values",
            alloc::format!("{} values for {} grid points", values.len(), s[0] * s[1] * s[2]),
        ));
    }
    let mut out = Vec::new();
    let steps = [(1, 0, 0), (0, 1, 0), (0, 0, 1)];
    for (axis, (di, dj, dk)) in steps.into_iter().enumerate() {
        for i in 0..s[0] {
            for j in 0..s[1] {
                for k in 0..s[2] {
                    let next = [i + di, j + dj, k + dk];
                    if next[axis] >= s[axis] {
                        continue;
                    }
                    let fa = values[grid.index(i, j, k)];
                    let fb = values[grid.index(next[0], next[1], next[2])];
                    if (fa < 0.0 && fb > 0.0) || (fa > 0.0 && fb < 0.0) {
                        let a = grid.point(i, j, k);
                        let b = grid.point(next[0], next[1], next[2]);
                        out.push(a + (b - a) * (fa / (fa - fb)));
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn extract_zero_crossings(f: &dyn Fn(Vec3) -> f64, grid: &GridSpec) -> Vec<Vec3> {
    let values: Vec<f64> = grid.points().into_iter().map(f).collect();
    zero_crossings_from_values(grid, &values).expect("one value per grid point")
}
