//! Fixed-size 3D linear algebra.
//!
//! Everything here has an exact output contract: eigenvalues come back
//! ascending with a fixed eigenvector sign convention, Procrustes always
//! returns a proper rotation, and slerp refuses the ambiguous half-turn.

// Only needed when std is absent from the build graph.
#[allow(unused_imports)]
use num_traits::Float;
use core::ops::{Add, AddAssign, Div, Index, Mul, Neg, Sub, SubAssign};


use crate::error::{Error, Result};

/// Relative eigenvalue gap below which a spectrum is reported degenerate.
pub const EIGEN_GAP_TOL: f64 = 1e-7;
/// Weight sums at or below this are treated as zero.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;
/// Rotations this close to a half-turn have no unique geodesic.
pub const NEAR_PI_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub const fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub const fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dist(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    pub fn max_abs(self) -> f64 {
        self.x.abs().max(self.y.abs()).max(self.z.abs())
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Index<usize> for Vec3 {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl SubAssign for Vec3 {
    fn sub_assign(&mut self, o: Vec3) {
        *self = *self - o;
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

/// Row-major 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Mat3 {
    pub m: [[f64; 3]; 3],
}

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3 {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };
    pub const ZERO: Mat3 = Mat3 { m: [[0.0; 3]; 3] };

    pub const fn from_rows(m: [[f64; 3]; 3]) -> Self {
        Self { m }
    }

    pub fn from_cols(c0: Vec3, c1: Vec3, c2: Vec3) -> Self {
        Self::from_rows([[c0.x, c1.x, c2.x], [c0.y, c1.y, c2.y], [c0.z, c1.z, c2.z]])
    }

    pub fn diag(d: [f64; 3]) -> Self {
        Self::from_rows([[d[0], 0.0, 0.0], [0.0, d[1], 0.0], [0.0, 0.0, d[2]]])
    }

    pub fn col(&self, j: usize) -> Vec3 {
        Vec3::new(self.m[0][j], self.m[1][j], self.m[2][j])
    }

    pub fn row(&self, i: usize) -> Vec3 {
        Vec3::from_array(self.m[i])
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.m;
        Mat3::from_rows([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn det(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn trace(&self) -> f64 {
        self.m[0][0] + self.m[1][1] + self.m[2][2]
    }

    pub fn frobenius(&self) -> f64 {
        self.m.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&self, s: f64) -> Mat3 {
        let mut out = *self;
        out.m.iter_mut().flatten().for_each(|v| *v *= s);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().flatten().all(|v| v.is_finite())
    }

    /// Frobenius distance of `RᵀR` from the identity.
    pub fn orthogonality_error(&self) -> f64 {
        (self.transpose() * *self - Mat3::IDENTITY).frobenius()
    }

    /// Rotation by `angle` radians about `axis` (normalized internally).
    pub fn axis_angle(axis: Vec3, angle: f64) -> Mat3 {
        let n = axis.norm();
        if n == 0.0 || angle == 0.0 {
            return Mat3::IDENTITY;
        }
        let k = axis / n;
        let (s, c) = angle.sin_cos();
        let v = 1.0 - c;
        Mat3::from_rows([
            [c + k.x * k.x * v, k.x * k.y * v - k.z * s, k.x * k.z * v + k.y * s],
            [k.y * k.x * v + k.z * s, c + k.y * k.y * v, k.y * k.z * v - k.x * s],
            [k.z * k.x * v - k.y * s, k.z * k.y * v + k.x * s, c + k.z * k.z * v],
        ])
    }

    /// Rotation from a rotation vector (axis scaled by angle).
    pub fn from_rotation_vector(v: Vec3) -> Mat3 {
        Mat3::axis_angle(v, v.norm())
    }

    /// Written out so the `z` row is exactly `(0, 0, 1)`.
    pub fn rot_z(angle: f64) -> Mat3 {
        let (s, c) = angle.sin_cos();
        Mat3::from_rows([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    }
}

impl Add for Mat3 {
    type Output = Mat3;
    fn add(self, o: Mat3) -> Mat3 {
        let mut out = self;
        for i in 0..3 {
            for j in 0..3 {
                out.m[i][j] += o.m[i][j];
            }
        }
        out
    }
}

impl Sub for Mat3 {
    type Output = Mat3;
    fn sub(self, o: Mat3) -> Mat3 {
        let mut out = self;
        for i in 0..3 {
            for j in 0..3 {
                out.m[i][j] -= o.m[i][j];
            }
        }
        out
    }
}

impl Mul for Mat3 {
    type Output = Mat3;
    fn mul(self, o: Mat3) -> Mat3 {
        let mut out = Mat3::ZERO;
        for i in 0..3 {
            for j in 0..3 {
                out.m[i][j] = (0..3).map(|k| self.m[i][k] * o.m[k][j]).sum();
            }
        }
        out
    }
}

impl Mul<Vec3> for Mat3 {
    type Output = Vec3;
    fn mul(self, v: Vec3) -> Vec3 {
        Vec3::new(self.row(0).dot(v), self.row(1).dot(v), self.row(2).dot(v))
    }
}

/// Output of [`sym_eig3`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenResult3 {
    /// Ascending.
    pub eigenvalues: [f64; 3],
    /// Column `i` is the unit eigenvector of `eigenvalues[i]`.
    pub eigenvectors: Mat3,
    pub degenerate: bool,
}

impl EigenResult3 {
    pub fn min_gap(&self) -> f64 {
        let l = self.eigenvalues;
        (l[1] - l[0]).min(l[2] - l[1])
    }
}

/// Cyclic Jacobi sweeps on a symmetric matrix. Returns unsorted eigenvalues
/// and the accumulated rotation whose columns are the eigenvectors.
fn jacobi<const N: usize>(mut a: [[f64; N]; N]) -> ([f64; N], [[f64; N]; N]) {
    let mut v = [[0.0; N]; N];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let scale: f64 = a.iter().flatten().map(|x| x * x).sum();
    if scale == 0.0 {
        return ([0.0; N], v);
    }
    for _sweep in 0..64 {
        let mut off = 0.0;
        for p in 0..N {
            for q in (p + 1)..N {
                off += a[p][q] * a[p][q];
            }
        }
        if off <= scale * 1e-32 {
            break;
        }
        for p in 0..N {
            for q in (p + 1)..N {
                let apq = a[p][q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..N {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..N {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                a[p][q] = 0.0;
                a[q][p] = 0.0;
                for row in v.iter_mut() {
                    let vp = row[p];
                    let vq = row[q];
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut evals = [0.0; N];
    for (i, e) in evals.iter_mut().enumerate() {
        *e = a[i][i];
    }
    (evals, v)
}

/// Largest-magnitude component positive; ties go to the lowest index.
fn canonical_sign(v: Vec3) -> Vec3 {
    let mut best = 0;
    for i in 1..3 {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        -v
    } else {
        v
    }
}

/// Eigendecomposition of a symmetric 3x3 matrix.
///
/// The input is symmetrized as `(C + Cᵀ)/2`. Eigenvalues are ascending; each
/// eigenvector has its largest-magnitude component positive. The spectrum is
/// flagged degenerate when any consecutive gap is below
/// `EIGEN_GAP_TOL * max(1, λ3)`.
pub fn sym_eig3(c: &Mat3) -> EigenResult3 {
    let s = (*c + c.transpose()).scale(0.5);
    let (evals, v) = jacobi::<3>(s.m);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| evals[i].total_cmp(&evals[j]));
    let eigenvalues = [evals[order[0]], evals[order[1]], evals[order[2]]];
    let basis = Mat3::from_rows(v);
    let cols = order.map(|i| canonical_sign(basis.col(i)));
    let eigenvectors = Mat3::from_cols(cols[0], cols[1], cols[2]);
    let tol = EIGEN_GAP_TOL * eigenvalues[2].abs().max(1.0);
    let gap = (eigenvalues[1] - eigenvalues[0]).min(eigenvalues[2] - eigenvalues[1]);
    EigenResult3 {
        eigenvalues,
        eigenvectors,
        degenerate: gap < tol,
    }
}

fn check_weights(points: &[Vec3], w: &[f64]) -> Result<f64> {
    if points.len() != w.len() {
        return Err(Error::shape(
            "weights",
            alloc::format!("{} points but {} weights", points.len(), w.len()),
        ));
    }
    if points.is_empty() {
        return Err(Error::TooFewPoints { needed: 1, got: 0 });
    }
    let total: f64 = w.iter().sum();
    if !(total > WEIGHT_SUM_TOL) {
        return Err(Error::ZeroWeight);
    }
    Ok(total)
}

/// `(1ᵀw)⁻¹ Vᵀw`.
pub fn weighted_centroid(points: &[Vec3], w: &[f64]) -> Result<Vec3> {
    let total = check_weights(points, w)?;
    let mut acc = Vec3::ZERO;
    for (p, &wi) in points.iter().zip(w) {
        acc += *p * wi;
    }
    Ok(acc / total)
}

/// `(V − 1tᵀ)ᵀ diag(w) (V − 1tᵀ)` with `t` the weighted centroid.
pub fn weighted_covariance(points: &[Vec3], w: &[f64]) -> Result<Mat3> {
    let t = weighted_centroid(points, w)?;
    let mut c = Mat3::ZERO;
    for (p, &wi) in points.iter().zip(w) {
        let d = (*p - t).to_array();
        for i in 0..3 {
            for j in 0..3 {
                c.m[i][j] += wi * d[i] * d[j];
            }
        }
    }
    Ok(c)
}

pub(crate) fn quat_to_mat(q: [f64; 4]) -> Mat3 {
    let [w, x, y, z] = q;
    Mat3::from_rows([
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ])
}

fn mat_to_quat(r: &Mat3) -> [f64; 4] {
    let m = &r.m;
    let tr = r.trace();
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (m[2][1] - m[1][2]) / s,
            (m[0][2] - m[2][0]) / s,
            (m[1][0] - m[0][1]) / s,
        ]
    } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
        let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
        [
            (m[2][1] - m[1][2]) / s,
            0.25 * s,
            (m[0][1] + m[1][0]) / s,
            (m[0][2] + m[2][0]) / s,
        ]
    } else if m[1][1] > m[2][2] {
        let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
        [
            (m[0][2] - m[2][0]) / s,
            (m[0][1] + m[1][0]) / s,
            0.25 * s,
            (m[1][2] + m[2][1]) / s,
        ]
    } else {
        let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
        [
            (m[1][0] - m[0][1]) / s,
            (m[0][2] + m[2][0]) / s,
            (m[1][2] + m[2][1]) / s,
            0.25 * s,
        ]
    };
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.map(|v| v / n)
}

/// Rotation `R ∈ SO(3)` minimizing `‖A Rᵀ − B‖_F`, i.e. `R aᵢ ≈ bᵢ` row-wise.
///
/// Inputs are expected to be centered. Uses the quaternion eigenvector
/// formulation, which always yields `det R = +1`.
pub fn procrustes_rotation(a: &[Vec3], b: &[Vec3]) -> Result<Mat3> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "procrustes_rotation",
            alloc::format!("{} source rows vs {} target rows", a.len(), b.len()),
        ));
    }
    // cross-covariance S_ij = Σ a_i b_j
    let mut s = [[0.0; 3]; 3];
    for (p, q) in a.iter().zip(b) {
        let (p, q) = (p.to_array(), q.to_array());
        for i in 0..3 {
            for j in 0..3 {
                s[i][j] += p[i] * q[j];
            }
        }
    }
    let h = Mat3::from_rows(s);
    let (sv, _) = jacobi::<3>((h.transpose() * h).m);
    let mut sv = sv;
    sv.sort_by(f64::total_cmp);
    if !(sv[2] > 0.0) || sv[1] <= 1e-12 * sv[2] {
        return Err(Error::DegenerateAlignment);
    }
    let [[sxx, sxy, sxz], [syx, syy, syz], [szx, szy, szz]] = s;
    let n = [
        [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
        [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
        [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
        [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
    ];
    let (evals, vecs) = jacobi::<4>(n);
    let mut best = 0;
    for i in 1..4 {
        if evals[i] > evals[best] {
            best = i;
        }
    }
    let q = [vecs[0][best], vecs[1][best], vecs[2][best], vecs[3][best]];
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(quat_to_mat(q.map(|v| v / norm)))
}

/// Geodesic `exp(t·log R)` from the identity to `R`.
pub fn slerp_rotation(t: f64, r: &Mat3) -> Result<Mat3> {
    if r.orthogonality_error() > 1e-8 || (r.det() - 1.0).abs() > 1e-8 {
        return Err(Error::NotRotation);
    }
    let mut q = mat_to_quat(r);
    if q[0] < 0.0 {
        q = q.map(|v| -v);
    }
    let vnorm = (q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let half = vnorm.atan2(q[0]);
    if (2.0 * half - core::f64::consts::PI).abs() < NEAR_PI_TOL {
        return Err(Error::NearPiRotation);
    }
    if vnorm == 0.0 || t == 0.0 {
        return Ok(Mat3::IDENTITY);
    }
    let (s, c) = (t * half).sin_cos();
    let k = s / vnorm;
    Ok(quat_to_mat([c, q[1] * k, q[2] * k, q[3] * k]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::random_rotation;
    use alloc::vec::Vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-0.5..0.5),
                )
            })
            .collect()
    }

    fn max_abs_diff(a: &Mat3, b: &Mat3) -> f64 {
        (*a - *b).m.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    #[test]
    fn eig_diagonal() {
        let e = sym_eig3(&Mat3::diag([2.0, 8.0, 18.0]));
        assert_eq!(e.eigenvalues, [2.0, 8.0, 18.0]);
        assert_eq!(e.eigenvectors, Mat3::IDENTITY);
        assert!(!e.degenerate);
    }

    #[test]
    fn eig_identity_is_degenerate() {
        let e = sym_eig3(&Mat3::IDENTITY);
        assert_eq!(e.eigenvalues, [1.0, 1.0, 1.0]);
        assert!(e.degenerate);
    }

    #[test]
    fn eig_recovers_known_decomposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let q = random_rotation(&mut rng);
            let c = q * Mat3::diag([1.0, 4.0, 9.0]) * q.transpose();
            let e = sym_eig3(&c);
            for (got, want) in e.eigenvalues.iter().zip([1.0, 4.0, 9.0]) {
                assert!((got - want).abs() < 1e-9);
            }
            for i in 0..3 {
                let a = e.eigenvectors.col(i);
                let b = q.col(i);
                let err = (a - b).norm().min((a + b).norm());
                assert!(err < 1e-9, "column {i} off by {err}");
            }
            assert!(!e.degenerate);
        }
    }

    #[test]
    fn eig_reconstructs_random_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let mut c = Mat3::ZERO;
            for i in 0..3 {
                for j in i..3 {
                    let v = rng.random_range(-5.0..5.0);
                    c.m[i][j] = v;
                    c.m[j][i] = v;
                }
            }
            let e = sym_eig3(&c);
            let v = e.eigenvectors;
            let back = v * Mat3::diag(e.eigenvalues) * v.transpose();
            assert!((back - c).frobenius() <= 1e-9 * c.frobenius().max(1.0));
            assert!(v.orthogonality_error() < 1e-10);
            let lmax = e.eigenvalues[2].abs().max(e.eigenvalues[0].abs());
            for i in 0..3 {
                let r = v.col(i);
                let res = (c * r - r * e.eigenvalues[i]).norm();
                assert!(res < 1e-9 * lmax.max(1.0));
            }
            assert!(e.eigenvalues[0] <= e.eigenvalues[1] && e.eigenvalues[1] <= e.eigenvalues[2]);
        }
    }

    #[test]
    fn eig_sign_convention() {
        let c = Mat3::from_rows([[2.0, 1.0, 0.0], [1.0, 2.0, 0.0], [0.0, 0.0, 7.0]]);
        let e = sym_eig3(&c);
        // tie between |x| and |y| goes to x
        let r1 = e.eigenvectors.col(0);
        assert!(r1.x > 0.0 && r1.y < 0.0);
        let r2 = e.eigenvectors.col(1);
        assert!(r2.x > 0.0 && r2.y > 0.0);
        assert!(e.eigenvectors.col(2).z > 0.0);
    }

    #[test]
    fn centroid_examples() {
        let v = [Vec3::new(1.0, 0.0, 0.0), Vec3::new(-1.0, 0.0, 0.0)];
        assert_eq!(weighted_centroid(&v, &[1.0, 1.0]).unwrap(), Vec3::ZERO);
        assert_eq!(
            weighted_centroid(&v, &[3.0, 1.0]).unwrap(),
            Vec3::new(0.5, 0.0, 0.0)
        );
        assert_eq!(weighted_centroid(&v, &[0.0, 0.0]), Err(Error::ZeroWeight));
        assert!(matches!(
            weighted_centroid(&v, &[1.0]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn centroid_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.random_range(1..40);
            let v = rand_points(&mut rng, n);
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..2.0)).collect();
            let c = weighted_centroid(&v, &w).unwrap();
            let mut num = [0.0; 3];
            let mut den = 0.0;
            for i in 0..n {
                for k in 0..3 {
                    num[k] += w[i] * v[i][k];
                }
                den += w[i];
            }
            for k in 0..3 {
                assert!((c[k] - num[k] / den).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn covariance_axis_cloud() {
        let v = [
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(-1.0, 0.0, 0.0),
            Vec3::new(0.0, 2.0, 0.0),
            Vec3::new(0.0, -2.0, 0.0),
            Vec3::new(0.0, 0.0, 3.0),
            Vec3::new(0.0, 0.0, -3.0),
        ];
        let c = weighted_covariance(&v, &[1.0; 6]).unwrap();
        assert_eq!(c, Mat3::diag([2.0, 8.0, 18.0]));
        let single = weighted_covariance(&[Vec3::new(4.0, -1.0, 2.0)], &[0.3]).unwrap();
        assert_eq!(single, Mat3::ZERO);
    }

    #[test]
    fn covariance_closed_form_agrees() {
        // Vᵀ[diag(w)(I − 1wᵀ/1ᵀw)]V evaluated literally with an n×n matrix.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let n = rng.random_range(1..25);
            let v = rand_points(&mut rng, n);
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0) + 1e-3).collect();
            let sw: f64 = w.iter().sum();
            let mut m = alloc::vec![alloc::vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    let id = if i == j { 1.0 } else { 0.0 };
                    m[i][j] = w[i] * (id - w[j] / sw);
                }
            }
            let mut closed = Mat3::ZERO;
            for a in 0..3 {
                for b in 0..3 {
                    let mut s = 0.0;
                    for i in 0..n {
                        for j in 0..n {
                            s += v[i][a] * m[i][j] * v[j][b];
                        }
                    }
                    closed.m[a][b] = s;
                }
            }
            let c = weighted_covariance(&v, &w).unwrap();
            assert!(max_abs_diff(&c, &closed) < 1e-10);
            let e = sym_eig3(&c);
            assert!(e.eigenvalues[0] >= -1e-10);
        }
    }

    #[test]
    fn procrustes_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_points(&mut rng, 6);
        let r = procrustes_rotation(&a, &a).unwrap();
        assert!(max_abs_diff(&r, &Mat3::IDENTITY) < 1e-12);
    }

    #[test]
    fn procrustes_recovers_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for seed in 0..1000u64 {
            let d = 3 + (seed as usize % 8);
            let mut a = rand_points(&mut rng, d);
            let c = a.iter().fold(Vec3::ZERO, |s, p| s + *p) / d as f64;
            a.iter_mut().for_each(|p| *p -= c);
            let r0 = random_rotation(&mut rng);
            let b: Vec<Vec3> = a.iter().map(|p| r0 * *p).collect();
            let r = procrustes_rotation(&a, &b).unwrap();
            assert!(max_abs_diff(&r, &r0) < 1e-8, "seed {seed}");
            assert!((r.det() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn procrustes_rank_one_is_degenerate() {
        let a = [
            Vec3::new(-1.0, 0.0, 0.0),
            Vec3::new(0.5, 0.0, 0.0),
            Vec3::new(0.5, 0.0, 0.0),
        ];
        let b = [
            Vec3::new(0.3, 1.0, -0.2),
            Vec3::new(0.1, -2.0, 0.7),
            Vec3::new(-0.4, 1.0, -0.5),
        ];
        assert_eq!(procrustes_rotation(&a, &b), Err(Error::DegenerateAlignment));
    }

    #[test]
    fn slerp_endpoints_and_half_angle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let r = random_rotation(&mut rng);
            match slerp_rotation(1.0, &r) {
                Ok(r1) => {
                    assert!(max_abs_diff(&r1, &r) < 1e-12);
                    assert_eq!(slerp_rotation(0.0, &r).unwrap(), Mat3::IDENTITY);
                }
                Err(Error::NearPiRotation) => {}
                Err(e) => panic!("{e}"),
            }
        }
        let half = slerp_rotation(0.5, &Mat3::rot_z(core::f64::consts::FRAC_PI_2)).unwrap();
        assert!(max_abs_diff(&half, &Mat3::rot_z(core::f64::consts::FRAC_PI_4)) < 1e-10);
    }

    #[test]
    fn slerp_rejects_half_turn_and_reflections() {
        let r = Mat3::rot_z(core::f64::consts::PI);
        assert_eq!(slerp_rotation(0.3, &r), Err(Error::NearPiRotation));
        let refl = Mat3::diag([1.0, 1.0, -1.0]);
        assert_eq!(slerp_rotation(0.3, &refl), Err(Error::NotRotation));
    }

    #[test]
    fn slerp_stays_in_so3() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let r = random_rotation(&mut rng);
            for i in 0..=100 {
                let t = i as f64 / 100.0;
                let Ok(rt) = slerp_rotation(t, &r) else { continue };
                assert!(rt.orthogonality_error() < 1e-10);
                assert!((rt.det() - 1.0).abs() < 1e-10);
            }
        }
    }
}
