//! The frame-averaging operator.
//!
//! `⟨φ⟩_F(V) = (1/|F|) Σ_{g∈F} ρ_W(g) φ(ρ_V(g)⁻¹ V)`. Given an equivariant
//! frame `F`, the averaged map is equivariant for any `φ`.
//!
//! [`fa_apply`] works on plain values and is what the property checks use.
//! The models build the same average on an autodiff [`Tape`] with
//! [`pull_back_rows`] and [`push_forward_rows`]; the frame itself is a
//! constant there, so no gradient flows through the eigendecomposition.

use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::frames::Frame;
use crate::group::{act_features, act_field, act_points, inverse, EuclideanMotion, FeatureMatrix, ScalarField};
use crate::linalg3::Vec3;

/// How the group acts on a space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionSpec {
    /// `(u, U) ↦ (u, U Rᵀ + 1tᵀ)` with `u ∈ Rᵃ`, `U ∈ R^{b×3}`.
    Features { inv: usize, equi: usize },
    /// Rows of an `n×3` matrix move as points; `n = None` accepts any count.
    Points { n: Option<usize> },
    /// `ρ ≡ 1` on `Rᵃ`.
    Invariant { dim: usize },
    /// `f ↦ f(Rᵀ(· − t))`.
    Field,
}

#[derive(Debug, Clone)]
pub enum Value {
    Features(FeatureMatrix),
    Points(Vec<Vec3>),
    Invariant(Vec<f64>),
    Field(ScalarField),
}

impl Value {
    fn kind(&self) -> &'static str {
        match self {
            Value::Features(_) => "features",
            Value::Points(_) => "points",
            Value::Invariant(_) => "invariant",
            Value::Field(_) => "field",
        }
    }
}

fn check(spec: &ActionSpec, v: &Value, op: &'static str) -> Result<()> {
    let ok = match (spec, v) {
        (ActionSpec::Features { inv, equi }, Value::Features(f)) => f.inv_dim() == *inv && f.equi_dim() == *equi,
        (ActionSpec::Points { n }, Value::Points(p)) => n.is_none_or(|n| n == p.len()),
        (ActionSpec::Invariant { dim }, Value::Invariant(u)) => u.len() == *dim,
        (ActionSpec::Field, Value::Field(_)) => true,
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::shape(op, alloc::format!("{} value does not fit {spec:?}", v.kind())))
    }
}

/// `ρ(g) v`.
pub fn act(g: &EuclideanMotion, v: &Value) -> Value {
    match v {
        Value::Features(f) => Value::Features(act_features(g, f)),
        Value::Points(p) => Value::Points(act_points(g, p)),
        Value::Invariant(u) => Value::Invariant(u.clone()),
        Value::Field(f) => Value::Field(act_field(g, f)),
    }
}

/// Frame average of `phi` at `v`.
///
/// Terms are summed in frame order, so repeated calls are bit-identical.
/// A field-valued result evaluates every transformed field at the query
/// point and averages the values (and gradients) in the same order.
pub fn fa_apply(
    phi: &dyn Fn(&Value) -> Result<Value>,
    frame: &Frame,
    rho_in: ActionSpec,
    rho_out: ActionSpec,
    v: &Value,
) -> Result<Value> {
    if frame.is_empty() {
        return Err(Error::TooFewPoints { needed: 1, got: 0 });
    }
    check(&rho_in, v, "fa_apply input")?;
    let mut terms = Vec::with_capacity(frame.len());
    for g in &frame.motions {
        let w = phi(&act(&inverse(g), v))?;
        check(&rho_out, &w, "fa_apply output")?;
        terms.push(act(g, &w));
    }
    let k = terms.len() as f64;
    let out = match &terms[0] {
        Value::Features(first) => {
            let (a, b) = (first.inv_dim(), first.equi_dim());
            let flat: Vec<Vec<f64>> = terms
                .iter()
                .map(|t| match t {
                    Value::Features(f) => f.flatten(),
                    _ => unreachable!(),
                })
                .collect();
            let mean: Vec<f64> = pairwise_sum(&flat).into_iter().map(|x| x / k).collect();
            let equi = (0..b).map(|i| Vec3::new(mean[a + 3 * i], mean[a + 3 * i + 1], mean[a + 3 * i + 2])).collect();
            Value::Features(FeatureMatrix::new(mean[..a].to_vec(), equi))
        }
        Value::Points(first) => {
            let mut flat = Vec::with_capacity(terms.len());
            for t in &terms {
                let Value::Points(p) = t else { unreachable!() };
                if p.len() != first.len() {
                    return Err(Error::shape("fa_apply output", "point count varies across the frame"));
                }
                flat.push(p.iter().flat_map(|q| q.to_array()).collect::<Vec<f64>>());
            }
            let mean = pairwise_sum(&flat);
            Value::Points(mean.chunks(3).map(|c| Vec3::new(c[0], c[1], c[2]) / k).collect())
        }
        Value::Invariant(_) => {
            let flat: Vec<Vec<f64>> = terms
                .iter()
                .map(|t| match t {
                    Value::Invariant(u) => u.clone(),
                    _ => unreachable!(),
                })
                .collect();
            Value::Invariant(pairwise_sum(&flat).into_iter().map(|x| x / k).collect())
        }
        Value::Field(_) => {
            let fields: Arc<Vec<ScalarField>> = Arc::new(
                terms
                    .into_iter()
                    .map(|t| match t {
                        Value::Field(f) => f,
                        _ => unreachable!(),
                    })
                    .collect(),
            );
            let fg = fields.clone();
            Value::Field(ScalarField::new(
                move |x| {
                    let v: Vec<Vec<f64>> = fields.iter().map(|f| alloc::vec![f.eval(x)]).collect();
                    pairwise_sum(&v)[0] / k
                },
                move |x| {
                    let v: Vec<Vec<f64>> = fg.iter().map(|f| f.gradient(x).to_array().to_vec()).collect();
                    let s = pairwise_sum(&v);
                    Vec3::new(s[0], s[1], s[2]) / k
                },
            ))
        }
    };
    Ok(out)
}

/// `(1/|F|) Σ_g ψ(ρ(g)⁻¹ Z, ρ(g)⁻¹ x)`: the query point is transformed
/// together with the equivariant rows of `z`, and the output is invariant.
pub fn fa_apply_pointwise(
    psi: &dyn Fn(&FeatureMatrix, Vec3) -> f64,
    frame_of_z: &Frame,
    z: &FeatureMatrix,
    x: Vec3,
) -> Result<f64> {
    if frame_of_z.is_empty() {
        return Err(Error::TooFewPoints { needed: 1, got: 0 });
    }
    let terms: Vec<Vec<f64>> = frame_of_z
        .motions
        .iter()
        .map(|g| {
            let gi = inverse(g);
            alloc::vec![psi(&act_features(&gi, z), gi.apply(x))]
        })
        .collect();
    Ok(pairwise_sum(&terms)[0] / frame_of_z.len() as f64)
}

/// Elementwise sum in a fixed balanced-tree order. Identical terms over a
/// power-of-two frame sum exactly, so a constant map averages to itself.
pub(crate) fn pairwise_sum(terms: &[Vec<f64>]) -> Vec<f64> {
    match terms.len() {
        0 => Vec::new(),
        1 => terms[0].clone(),
        n => {
            let (a, b) = terms.split_at(n / 2);
            let mut s = pairwise_sum(a);
            for (x, y) in s.iter_mut().zip(pairwise_sum(b)) {
                *x += y;
            }
            s
        }
    }
}

fn is_identity(g: &EuclideanMotion) -> bool {
    *g == EuclideanMotion::IDENTITY
}

/// Taped `ρ(g)⁻¹` on the rows of `v`: `(V − 1tᵀ) R`.
pub fn pull_back_rows(tape: &mut Tape, v: Var, g: &EuclideanMotion) -> Result<Var> {
    if is_identity(g) {
        return Ok(v);
    }
    let t = tape.constant(Tensor::row(g.trans.to_array().to_vec()));
    let neg = tape.scale(t, -1.0);
    let centered = tape.add_row(v, neg)?;
    let r = tape.constant(mat_tensor(&g.rot.m));
    tape.matmul(centered, r)
}

/// Taped `ρ(g)` on the rows of `v`: `V Rᵀ + 1tᵀ`.
pub fn push_forward_rows(tape: &mut Tape, v: Var, g: &EuclideanMotion) -> Result<Var> {
    if is_identity(g) {
        return Ok(v);
    }
    let rt = tape.constant(mat_tensor(&g.rot.transpose().m));
    let rotated = tape.matmul(v, rt)?;
    let t = tape.constant(Tensor::row(g.trans.to_array().to_vec()));
    tape.add_row(rotated, t)
}

fn mat_tensor(m: &[[f64; 3]; 3]) -> Tensor {
    Tensor::matrix(3, 3, m.iter().flatten().copied().collect()).expect("3x3 has 9 entries")
}

/// Plain `ρ(g)⁻¹` on points, matching [`pull_back_rows`].
pub fn pull_back_points(g: &EuclideanMotion, x: &[Vec3]) -> Vec<Vec3> {
    x.iter().map(|p| g.apply_inverse(*p)).collect()
}
