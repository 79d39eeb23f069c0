//! The Euclidean group E(3) = O(3) ⋉ R³ and its actions.
//!
//! A motion `g = (R, t)` acts on a feature matrix `(u, U)` by leaving the
//! invariant part alone and mapping every equivariant row `U_i ↦ R U_i + t`;
//! on a scalar field it acts by change of variables, `(g·f)(x) = f(Rᵀ(x − t))`.

use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg3::{Mat3, Vec3};

/// `(R, t)` with `R` orthogonal. Reflections (`det R = −1`) are allowed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EuclideanMotion {
    pub rot: Mat3,
    pub trans: Vec3,
}

impl Default for EuclideanMotion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl EuclideanMotion {
    pub const IDENTITY: EuclideanMotion = EuclideanMotion {
        rot: Mat3::IDENTITY,
        trans: Vec3::ZERO,
    };

    pub fn new(rot: Mat3, trans: Vec3) -> Self {
        Self { rot, trans }
    }

    pub fn rotation(rot: Mat3) -> Self {
        Self::new(rot, Vec3::ZERO)
    }

    pub fn translation(trans: Vec3) -> Self {
        Self::new(Mat3::IDENTITY, trans)
    }

    /// `RᵀR = I` within `1e-8`.
    pub fn is_valid(&self) -> bool {
        self.rot.is_finite() && self.trans.is_finite() && self.rot.orthogonality_error() <= 1e-8
    }

    /// `x ↦ R x + t`.
    pub fn apply(&self, x: Vec3) -> Vec3 {
        self.rot * x + self.trans
    }

    /// `x ↦ Rᵀ(x − t)`.
    pub fn apply_inverse(&self, x: Vec3) -> Vec3 {
        self.rot.transpose() * (x - self.trans)
    }

    /// `max(‖R − R'‖_F, ‖t − t'‖)`.
    pub fn distance(&self, other: &EuclideanMotion) -> f64 {
        (self.rot - other.rot)
            .frobenius()
            .max((self.trans - other.trans).norm())
    }
}

/// Group law: `(R1 R2, R1 t2 + t1)`, i.e. `g1` after `g2`.
pub fn compose(g1: &EuclideanMotion, g2: &EuclideanMotion) -> EuclideanMotion {
    EuclideanMotion::new(g1.rot * g2.rot, g1.rot * g2.trans + g1.trans)
}

/// `(Rᵀ, −Rᵀt)`.
pub fn inverse(g: &EuclideanMotion) -> EuclideanMotion {
    let rt = g.rot.transpose();
    EuclideanMotion::new(rt, -(rt * g.trans))
}

/// A value `(u, U)` with invariant part `u ∈ Rᵃ` and equivariant part
/// `U ∈ R^{b×3}`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureMatrix {
    pub inv: Vec<f64>,
    pub equi: Vec<Vec3>,
}

impl FeatureMatrix {
    pub fn new(inv: Vec<f64>, equi: Vec<Vec3>) -> Self {
        Self { inv, equi }
    }

    pub fn inv_dim(&self) -> usize {
        self.inv.len()
    }

    pub fn equi_dim(&self) -> usize {
        self.equi.len()
    }

    pub fn is_finite(&self) -> bool {
        self.inv.iter().all(|v| v.is_finite()) && self.equi.iter().all(|v| v.is_finite())
    }

    /// Largest absolute entry over both parts.
    pub fn max_abs(&self) -> f64 {
        self.inv
            .iter()
            .map(|v| v.abs())
            .chain(self.equi.iter().map(|v| v.max_abs()))
            .fold(0.0, f64::max)
    }

    /// Largest absolute entry-wise difference; dimensions must agree.
    pub fn max_abs_diff(&self, other: &FeatureMatrix) -> Result<f64> {
        if self.inv.len() != other.inv.len() || self.equi.len() != other.equi.len() {
            return Err(Error::shape(
                "FeatureMatrix::max_abs_diff",
                alloc::format!(
                    "({}, {}) vs ({}, {})",
                    self.inv.len(),
                    self.equi.len(),
                    other.inv.len(),
                    other.equi.len()
                ),
            ));
        }
        let a = self
            .inv
            .iter()
            .zip(&other.inv)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        let b = self
            .equi
            .iter()
            .zip(&other.equi)
            .map(|(x, y)| (*x - *y).max_abs())
            .fold(0.0, f64::max);
        Ok(a.max(b))
    }

    /// Entries flattened as `[u, U row-major]`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.inv.clone();
        out.extend(self.equi.iter().flat_map(|v| v.to_array()));
        out
    }
}

/// `(u, U Rᵀ + 1tᵀ)`. The invariant part is copied untouched.
pub fn act_features(g: &EuclideanMotion, v: &FeatureMatrix) -> FeatureMatrix {
    FeatureMatrix {
        inv: v.inv.clone(),
        equi: act_points(g, &v.equi),
    }
}

/// `X Rᵀ + 1tᵀ`.
pub fn act_points(g: &EuclideanMotion, x: &[Vec3]) -> Vec<Vec3> {
    x.iter().map(|p| g.apply(*p)).collect()
}

type ValueFn = dyn Fn(Vec3) -> f64 + Send + Sync;
type GradFn = dyn Fn(Vec3) -> Vec3 + Send + Sync;

/// A differentiable map R³ → R, carried as a value evaluator plus a gradient
/// evaluator. Cloning is cheap.
#[derive(Clone)]
pub struct ScalarField {
    value: Arc<ValueFn>,
    grad: Arc<GradFn>,
}

impl core::fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str("ScalarField")
    }
}

impl ScalarField {
    pub fn new(
        value: impl Fn(Vec3) -> f64 + Send + Sync + 'static,
        grad: impl Fn(Vec3) -> Vec3 + Send + Sync + 'static,
    ) -> Self {
        Self {
            value: Arc::new(value),
            grad: Arc::new(grad),
        }
    }

    /// Gradient by central differences with the given step.
    pub fn with_fd_gradient(value: impl Fn(Vec3) -> f64 + Send + Sync + 'static, step: f64) -> Self {
        let value: Arc<ValueFn> = Arc::new(value);
        let v2 = value.clone();
        Self {
            value,
            grad: Arc::new(move |x| central_gradient(&*v2, x, step)),
        }
    }

    pub fn eval(&self, x: Vec3) -> f64 {
        (self.value)(x)
    }

    pub fn gradient(&self, x: Vec3) -> Vec3 {
        (self.grad)(x)
    }

    /// `‖x − c‖ − r`, the signed distance to a sphere.
    pub fn sphere(center: Vec3, radius: f64) -> Self {
        Self::new(
            move |x| (x - center).norm() - radius,
            move |x| {
                let d = x - center;
                let n = d.norm();
                if n == 0.0 {
                    Vec3::ZERO
                } else {
                    d / n
                }
            },
        )
    }
}

pub(crate) fn central_gradient(f: &dyn Fn(Vec3) -> f64, x: Vec3, h: f64) -> Vec3 {
    let e = [
        Vec3::new(h, 0.0, 0.0),
        Vec3::new(0.0, h, 0.0),
        Vec3::new(0.0, 0.0, h),
    ];
    let d = e.map(|e| (f(x + e) - f(x - e)) / (2.0 * h));
    Vec3::from_array(d)
}

/// `x ↦ f(Rᵀ(x − t))`, with gradient `R ∇f(Rᵀ(x − t))`.
pub fn act_field(g: &EuclideanMotion, f: &ScalarField) -> ScalarField {
    let (gv, fv) = (*g, f.clone());
    let (gg, fg) = (*g, f.clone());
    ScalarField::new(
        move |x| fv.eval(gv.apply_inverse(x)),
        move |x| gg.rot * fg.gradient(gg.apply_inverse(x)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::random_motion;
    use crate::eval::{chamfer, extract_zero_crossings, GridSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng) -> Vec3 {
        Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
    }

    fn rand_features(rng: &mut ChaCha8Rng, a: usize, b: usize) -> FeatureMatrix {
        FeatureMatrix::new(
            (0..a).map(|_| rng.random_range(-1.0..1.0)).collect(),
            (0..b).map(|_| rand_vec(rng)).collect(),
        )
    }

    #[test]
    fn compose_inverse_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let g = random_motion(&mut rng, 3.0, true);
            assert_eq!(compose(&g, &EuclideanMotion::IDENTITY), g);
            assert!(compose(&g, &inverse(&g)).distance(&EuclideanMotion::IDENTITY) < 1e-10);
            assert!(compose(&inverse(&g), &g).distance(&EuclideanMotion::IDENTITY) < 1e-10);
        }
        assert_eq!(inverse(&EuclideanMotion::IDENTITY), EuclideanMotion::IDENTITY);
        let t = EuclideanMotion::translation(Vec3::new(1.0, -2.0, 3.0));
        assert_eq!(inverse(&t), EuclideanMotion::translation(Vec3::new(-1.0, 2.0, -3.0)));
    }

    #[test]
    fn compose_acts_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let g1 = random_motion(&mut rng, 2.0, true);
            let g2 = random_motion(&mut rng, 2.0, true);
            let x = rand_vec(&mut rng);
            let a = compose(&g1, &g2).apply(x);
            let b = g1.apply(g2.apply(x));
            assert!((a - b).max_abs() < 1e-12);
        }
    }

    #[test]
    fn feature_action() {
        let v = FeatureMatrix::new(alloc::vec![0.5, -2.0], alloc::vec![Vec3::new(1.0, 0.0, 0.0)]);
        assert_eq!(act_features(&EuclideanMotion::IDENTITY, &v), v);
        let g = EuclideanMotion::rotation(Mat3::rot_z(core::f64::consts::FRAC_PI_2));
        let out = act_features(&g, &v);
        assert!((out.equi[0] - Vec3::new(0.0, 1.0, 0.0)).max_abs() < 1e-15);
        assert_eq!(out.inv, v.inv);
    }

    #[test]
    fn feature_action_axioms() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let v = rand_features(&mut rng, 4, 7);
            let g1 = random_motion(&mut rng, 2.0, true);
            let g2 = random_motion(&mut rng, 2.0, true);
            let lhs = act_features(&g1, &act_features(&g2, &v));
            let rhs = act_features(&compose(&g1, &g2), &v);
            assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-10);
            // invariant part is bit-identical
            assert_eq!(
                lhs.inv.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                v.inv.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn point_action() {
        let g = EuclideanMotion::translation(Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(act_points(&g, &[Vec3::ZERO]), alloc::vec![Vec3::new(1.0, 2.0, 3.0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Vec<Vec3> = (0..20).map(|_| rand_vec(&mut rng)).collect();
        assert_eq!(act_points(&EuclideanMotion::IDENTITY, &x), x);
        let g = random_motion(&mut rng, 1.0, true);
        let y = act_points(&g, &x);
        for (p, q) in x.iter().zip(&y) {
            let r = g.rot.m;
            for i in 0..3 {
                let want = r[i][0] * p.x + r[i][1] * p.y + r[i][2] * p.z + g.trans[i];
                assert!((q[i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn field_action_examples() {
        let f = ScalarField::new(|x| x.x, |_| Vec3::new(1.0, 0.0, 0.0));
        let g = EuclideanMotion::translation(Vec3::new(1.0, 0.0, 0.0));
        let gf = act_field(&g, &f);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let x = rand_vec(&mut rng);
            assert!((gf.eval(x) - (x.x - 1.0)).abs() < 1e-15);
            let idf = act_field(&EuclideanMotion::IDENTITY, &f);
            assert_eq!(idf.eval(x), f.eval(x));
        }
    }

    #[test]
    fn field_action_axioms_and_change_of_variables() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = ScalarField::new(
            |x| x.x * x.y + (2.0 * x.z).sin(),
            |x| Vec3::new(x.y, x.x, 2.0 * (2.0 * x.z).cos()),
        );
        for _ in 0..100 {
            let g1 = random_motion(&mut rng, 2.0, true);
            let g2 = random_motion(&mut rng, 2.0, true);
            let x = rand_vec(&mut rng);
            let lhs = act_field(&g1, &act_field(&g2, &f));
            let rhs = act_field(&compose(&g1, &g2), &f);
            assert!((lhs.eval(x) - rhs.eval(x)).abs() < 1e-9);
            assert!((lhs.gradient(x) - rhs.gradient(x)).max_abs() < 1e-9);
            let gf = act_field(&g1, &f);
            assert!((gf.eval(g1.apply(x)) - f.eval(x)).abs() < 1e-10);
            // analytic gradient agrees with central differences of the value
            let fd = central_gradient(&|p| gf.eval(p), x, 1e-5);
            let an = gf.gradient(x);
            assert!((fd - an).norm() <= 1e-4 * an.norm().max(1.0));
        }
    }

    #[test]
    fn field_action_moves_zero_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let f = ScalarField::sphere(Vec3::ZERO, 1.0);
        for _ in 0..5 {
            let g = random_motion(&mut rng, 0.5, true);
            let gf = act_field(&g, &f);
            let grid = GridSpec::cube(Vec3::new(-2.0, -2.0, -2.0), Vec3::new(2.0, 2.0, 2.0), 24);
            let pts = extract_zero_crossings(&|x| gf.eval(x), &grid);
            assert!(!pts.is_empty());
            // every extracted point maps back onto the unit sphere
            for p in &pts {
                let back = g.apply_inverse(*p);
                assert!((back.norm() - 1.0).abs() < 0.05);
                assert!((gf.eval(*p) - ((*p - g.trans).norm() - 1.0)).abs() < 1e-12);
            }
            // and agrees with the moved analytic field's crossings
            let direct = extract_zero_crossings(&|x| (x - g.trans).norm() - 1.0, &grid);
            assert!(chamfer(&pts, &direct).unwrap() < 1e-6);
        }
    }
}
