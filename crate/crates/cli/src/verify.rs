//! The equivariance and gradient property suite behind `verify`.
//!
//! Every check draws its own random inputs from `seed`, so a report is
//! reproducible. `skip_fa` swaps every frame for the identity, which turns
//! the averaged maps back into their raw backbones: the FA-dependent checks
//! must then fail.

use std::sync::Arc;

use anyhow::Result;
use eqshape_core::autodiff::{grad_check, primitive_gradient_errors, Adjacency, Tape};
use eqshape_core::backbones::Activation;
use eqshape_core::data::{chain_rest, random_motion, skin, ArticulatedChainSpec};
use eqshape_core::fa::{fa_apply, ActionSpec, Value};
use eqshape_core::frames::{frame_set_distance, pca_frame, pca_frame_uniform, Frame, FrameDiagnostics};
use eqshape_core::group::{act_features, act_points, EuclideanMotion, FeatureMatrix, ScalarField};
use eqshape_core::models::{GlobalMeshAE, ImplicitConfig, ImplicitVAE, MeshAeConfig, PiecewiseMeshAE};
use eqshape_core::Vec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative eigen-gap below which a draw counts as degenerate and is skipped.
const MIN_REL_GAP: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyReport {
    pub name: String,
    pub trials: usize,
    /// Degenerate-frame draws that were replaced.
    pub skipped: usize,
    pub max_residual: f64,
    pub tolerance: f64,
}

impl PropertyReport {
    fn new(name: impl Into<String>, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            trials: 0,
            skipped: 0,
            max_residual: 0.0,
            tolerance,
        }
    }

    fn record(&mut self, residual: f64) {
        self.trials += 1;
        // NaN must fail, so no f64::max here.
        if !(residual <= self.max_residual) {
            self.max_residual = residual;
        }
    }

    pub fn passed(&self) -> bool {
        self.max_residual < self.tolerance
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyConfig {
    pub seed: u64,
    pub trials: usize,
    pub skip_fa: bool,
}

/// Every property with the same trial count.
pub fn run_all(cfg: &VerifyConfig) -> Result<Vec<PropertyReport>> {
    let mut out = vec![frame_equivariance(cfg.seed, cfg.trials)?];
    out.extend(fa_equivariance(cfg.seed, cfg.trials, cfg.skip_fa)?);
    out.push(implicit_decoder_invariance(cfg.seed, cfg.trials, cfg.skip_fa)?);
    out.push(global_autoencoder_equivariance(cfg.seed, cfg.trials, cfg.skip_fa)?);
    out.extend(part_equivariance(cfg.seed, cfg.trials, cfg.skip_fa)?);
    if cfg.trials > 0 {
        out.extend(gradient_fidelity(cfg.seed)?);
    }
    Ok(out)
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn rand_vec(r: &mut impl Rng, scale: [f64; 3]) -> Vec3 {
    Vec3::new(
        r.random_range(-scale[0]..scale[0]),
        r.random_range(-scale[1]..scale[1]),
        r.random_range(-scale[2]..scale[2]),
    )
}

fn rand_points(r: &mut impl Rng, n: usize) -> Vec<Vec3> {
    (0..n).map(|_| rand_vec(r, [2.0, 1.0, 0.5])).collect()
}

fn degenerate(d: &FrameDiagnostics) -> bool {
    d.min_gap <= MIN_REL_GAP * d.eigenvalues[2].abs().max(f64::MIN_POSITIVE)
}

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    let scale = b.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

fn flat_points(p: &[Vec3]) -> Vec<f64> {
    p.iter().flat_map(|q| q.to_array()).collect()
}

/// Frame equivariance: `F(gV, w) = g F(V, w)` as sets, for random weighted
/// point sets and motions with reflections.
pub fn frame_equivariance(seed: u64, trials: usize) -> Result<PropertyReport> {
    let mut rep = PropertyReport::new("frame_equivariance", 1e-6);
    let mut r = rng(seed, 1);
    while rep.trials < trials {
        let n = r.random_range(4..24);
        let v = rand_points(&mut r, n);
        let w: Vec<f64> = (0..n).map(|_| r.random_range(0.1..2.0)).collect();
        let g = random_motion(&mut r, 3.0, true);
        let (f, d) = pca_frame(&v, &w)?;
        if degenerate(&d) {
            rep.skipped += 1;
            continue;
        }
        let (fg, _) = pca_frame(&act_points(&g, &v), &w)?;
        rep.record(frame_set_distance(&fg, &f.left_mul(&g)).unwrap_or(f64::INFINITY));
    }
    Ok(rep)
}

/// One-hidden-layer tanh network on flat vectors.
#[derive(Debug, Clone)]
struct RandomMlp {
    w1: Vec<Vec<f64>>,
    b1: Vec<f64>,
    w2: Vec<Vec<f64>>,
    b2: Vec<f64>,
}

impl RandomMlp {
    fn new(r: &mut impl Rng, input: usize, hidden: usize, output: usize) -> Self {
        let mut mat = |rows: usize, cols: usize, s: f64| -> Vec<Vec<f64>> {
            (0..rows).map(|_| (0..cols).map(|_| r.random_range(-s..s)).collect()).collect()
        };
        let w1 = mat(hidden, input, 1.0 / (input as f64).sqrt());
        let b1 = mat(1, hidden, 0.5).remove(0);
        let w2 = mat(output, hidden, 1.0 / (hidden as f64).sqrt());
        let b2 = mat(1, output, 0.5).remove(0);
        Self { w1, b1, w2, b2 }
    }

    fn eval(&self, x: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = self
            .w1
            .iter()
            .zip(&self.b1)
            .map(|(row, b)| (row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b).tanh())
            .collect();
        self.w2
            .iter()
            .zip(&self.b2)
            .map(|(row, b)| row.iter().zip(&h).map(|(a, v)| a * v).sum::<f64>() + b)
            .collect()
    }
}

fn flatten_value(v: &Value) -> Vec<f64> {
    match v {
        Value::Features(f) => f.flatten(),
        Value::Points(p) => flat_points(p),
        Value::Invariant(u) => u.clone(),
        Value::Field(_) => unreachable!("inputs are never fields"),
    }
}

fn output_width(spec: ActionSpec) -> usize {
    match spec {
        ActionSpec::Features { inv, equi } => inv + 3 * equi,
        ActionSpec::Points { n } => 3 * n.unwrap_or(0),
        ActionSpec::Invariant { dim } => dim,
        ActionSpec::Field => 1,
    }
}

fn make_value(spec: ActionSpec, y: Vec<f64>) -> Value {
    match spec {
        ActionSpec::Features { inv, .. } => {
            let equi = y[inv..].chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
            Value::Features(FeatureMatrix::new(y[..inv].to_vec(), equi))
        }
        ActionSpec::Points { .. } => Value::Points(y.chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()),
        ActionSpec::Invariant { .. } => Value::Invariant(y),
        ActionSpec::Field => unreachable!("fields are built separately"),
    }
}

/// A deliberately non-equivariant map between the two spaces.
fn random_backbone(
    r: &mut impl Rng,
    rho_in: ActionSpec,
    rho_out: ActionSpec,
) -> impl Fn(&Value) -> eqshape_core::Result<Value> {
    let width = output_width(rho_in);
    let mlp = Arc::new(RandomMlp::new(r, width + 3, 16, output_width(rho_out)));
    move |v: &Value| {
        let x = flatten_value(v);
        Ok(match rho_out {
            ActionSpec::Field => {
                let mlp = mlp.clone();
                Value::Field(ScalarField::with_fd_gradient(
                    move |q| {
                        let mut row = x.clone();
                        row.extend(q.to_array());
                        mlp.eval(&row)[0]
                    },
                    1e-6,
                ))
            }
            _ => {
                let mut row = x;
                row.extend([0.0; 3]);
                make_value(rho_out, mlp.eval(&row))
            }
        })
    }
}

fn frame_of(v: &Value, skip_fa: bool) -> Result<(Frame, FrameDiagnostics)> {
    let pts = match v {
        Value::Features(f) => &f.equi,
        Value::Points(p) => p,
        _ => unreachable!("frames come from point-like inputs"),
    };
    let (f, d) = pca_frame_uniform(pts)?;
    Ok((if skip_fa { Frame::trivial() } else { f }, d))
}

fn act_value(g: &EuclideanMotion, v: &Value) -> Value {
    eqshape_core::fa::act(g, v)
}

/// Action pairings shipped by the suite: point-like inputs to every output.
pub fn fa_pairings() -> Vec<(String, ActionSpec, ActionSpec)> {
    let points = ActionSpec::Points { n: Some(5) };
    let feats_in = ActionSpec::Features { inv: 2, equi: 4 };
    let outs = [
        ("points", ActionSpec::Points { n: Some(4) }),
        ("features", ActionSpec::Features { inv: 2, equi: 3 }),
        ("invariant", ActionSpec::Invariant { dim: 3 }),
        ("field", ActionSpec::Field),
    ];
    let mut v = Vec::new();
    for (iname, ispec) in [("points", points), ("features", feats_in)] {
        for (oname, ospec) in outs {
            v.push((format!("fa_equivariance[{iname}->{oname}]"), ispec, ospec));
        }
    }
    v
}

fn random_input(r: &mut impl Rng, spec: ActionSpec) -> Value {
    match spec {
        ActionSpec::Points { n } => Value::Points(rand_points(r, n.unwrap_or(5))),
        ActionSpec::Features { inv, equi } => Value::Features(FeatureMatrix::new(
            (0..inv).map(|_| r.random_range(-1.0..1.0)).collect(),
            rand_points(r, equi),
        )),
        _ => unreachable!(),
    }
}

/// `⟨φ⟩(ρ(g)V) = ρ(g)⟨φ⟩(V)` for a fresh random backbone per trial.
pub fn fa_equivariance(seed: u64, trials: usize, skip_fa: bool) -> Result<Vec<PropertyReport>> {
    let mut out = Vec::new();
    for (k, (name, rho_in, rho_out)) in fa_pairings().into_iter().enumerate() {
        let mut rep = PropertyReport::new(name, 1e-5);
        let mut r = rng(seed, 100 + k as u64);
        while rep.trials < trials {
            let v = random_input(&mut r, rho_in);
            let (f, d) = frame_of(&v, skip_fa)?;
            if degenerate(&d) {
                rep.skipped += 1;
                continue;
            }
            let phi = random_backbone(&mut r, rho_in, rho_out);
            let g = random_motion(&mut r, 3.0, true);
            let gv = act_value(&g, &v);
            let (fg, _) = frame_of(&gv, skip_fa)?;
            let lhs = fa_apply(&phi, &fg, rho_in, rho_out, &gv)?;
            let base = fa_apply(&phi, &f, rho_in, rho_out, &v)?;
            let residual = match (&lhs, &base) {
                (Value::Field(a), Value::Field(b)) => (0..5)
                    .map(|_| {
                        let q = rand_vec(&mut r, [1.5; 3]);
                        let want = b.eval(q);
                        (a.eval(g.apply(q)) - want).abs() / want.abs().max(1.0)
                    })
                    .fold(0.0, f64::max),
                _ => rel_diff(&flatten_value(&lhs), &flatten_value(&act_value(&g, &base))),
            };
            rep.record(residual);
        }
        out.push(rep);
    }
    Ok(out)
}

fn small_implicit(skip_fa: bool) -> ImplicitConfig {
    let mut cfg = ImplicitConfig::for_domain((Vec3::new(-1.5, -1.5, -1.5), Vec3::new(1.5, 1.5, 1.5)));
    cfg.fa = !skip_fa;
    cfg.m = 2;
    cfg.d = 4;
    cfg.encoder_hidden = 16;
    cfg.decoder_hidden = 16;
    cfg.decoder_layers = 3;
    cfg.decoder_skip = Some(1);
    cfg
}

/// `Ψ̂(ρ(g)Z, Rx + t) = Ψ̂(Z, x)` for the implicit decoder.
pub fn implicit_decoder_invariance(seed: u64, trials: usize, skip_fa: bool) -> Result<PropertyReport> {
    let mut rep = PropertyReport::new("implicit_decoder_invariance", 1e-5);
    let mut r = rng(seed, 200);
    let model = ImplicitVAE::new(small_implicit(skip_fa), &mut r)?;
    while rep.trials < trials {
        let z = FeatureMatrix::new(vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)], rand_points(&mut r, 4));
        if degenerate(&pca_frame_uniform(&z.equi)?.1) {
            rep.skipped += 1;
            continue;
        }
        let g = random_motion(&mut r, 2.0, true);
        let x = rand_vec(&mut r, [1.0; 3]);
        let a = model.decode_implicit(&z, x)?;
        let b = model.decode_implicit(&act_features(&g, &z), g.apply(x))?;
        rep.record((a - b).abs() / a.abs().max(1.0));
    }
    Ok(rep)
}

fn test_chain() -> Result<(ArticulatedChainSpec, Vec<Vec3>, Arc<Adjacency>, eqshape_core::data::PartWeights)> {
    let spec = ArticulatedChainSpec {
        ring_size: 6,
        rings_per_segment: 4,
        joint_angles: vec![Vec3::new(0.0, 0.2, 0.4), Vec3::new(0.0, -0.1, -0.5)],
        ..Default::default()
    };
    let (rest, w) = chain_rest(&spec)?;
    let x = skin(&rest.vertices, &w, &spec.segment_motions())?;
    let adj = Arc::new(Adjacency::from_triangles(x.len(), &rest.faces)?);
    Ok((spec, x, adj, w))
}

fn small_mesh_cfg(skip_fa: bool) -> MeshAeConfig {
    MeshAeConfig {
        m: 3,
        d: 4,
        hidden: 12,
        enc_rounds: 2,
        dec_rounds: 2,
        activation: Activation::Elu,
        fa: !skip_fa,
    }
}

fn rel_points(a: &[Vec3], b: &[Vec3]) -> f64 {
    rel_diff(&flat_points(a), &flat_points(b))
}

fn rel_codes(a: &FeatureMatrix, b: &FeatureMatrix) -> f64 {
    rel_diff(&a.flatten(), &b.flatten())
}

/// Encoder and decoder equivariance of the global mesh autoencoder; the
/// residual is the larger of the two.
pub fn global_autoencoder_equivariance(seed: u64, trials: usize, skip_fa: bool) -> Result<PropertyReport> {
    let mut rep = PropertyReport::new("global_autoencoder_equivariance", 1e-5);
    let mut r = rng(seed, 300);
    let (_, x, adj, _) = test_chain()?;
    let model = GlobalMeshAE::new(small_mesh_cfg(skip_fa), adj, &mut r)?;
    let z = model.encode(&x)?;
    while rep.trials < trials {
        let g = random_motion(&mut r, 2.0, true);
        let enc = rel_codes(&model.encode(&act_points(&g, &x))?, &act_features(&g, &z));
        let c = FeatureMatrix::new((0..3).map(|_| r.random_range(-1.0..1.0)).collect(), rand_points(&mut r, 4));
        if degenerate(&pca_frame_uniform(&c.equi)?.1) {
            rep.skipped += 1;
            continue;
        }
        let dec = rel_points(&model.decode(&act_features(&g, &c))?, &act_points(&g, &model.decode(&c)?));
        rep.record(enc.max(dec));
    }
    Ok(rep)
}

/// Part equivariance with hard weights: per-part motions of a chain move
/// each part code by its own motion, and moved codes decode to the blend of
/// moved parts.
pub fn part_equivariance(seed: u64, trials: usize, skip_fa: bool) -> Result<Vec<PropertyReport>> {
    let mut enc = PropertyReport::new("part_equivariance_encoder", 1e-5);
    let mut dec = PropertyReport::new("part_equivariance_decoder", 1e-5);
    let mut r = rng(seed, 400);
    let (spec, x, adj, w) = test_chain()?;
    let model = PiecewiseMeshAE::new(small_mesh_cfg(skip_fa), adj, w.clone(), &mut r)?;
    let zs = model.encode(&x)?;
    let k = spec.segments;
    for _ in 0..trials {
        let gs: Vec<EuclideanMotion> = (0..k).map(|_| random_motion(&mut r, 1.5, false)).collect();
        let moved = skin(&x, &w, &gs)?;
        let zm = model.encode(&moved)?;
        enc.record((0..k).map(|j| rel_codes(&zm[j], &act_features(&gs[j], &zs[j]))).fold(0.0, f64::max));

        let codes: Vec<FeatureMatrix> = (0..k)
            .map(|_| FeatureMatrix::new((0..3).map(|_| r.random_range(-1.0..1.0)).collect(), rand_points(&mut r, 4)))
            .collect();
        let parts = model.decode_parts(&codes)?;
        let moved_codes: Vec<FeatureMatrix> = codes.iter().zip(&gs).map(|(c, g)| act_features(g, c)).collect();
        let y = model.decode(&moved_codes)?;
        let want: Vec<Vec3> = (0..x.len())
            .map(|i| (0..k).fold(Vec3::ZERO, |a, j| a + gs[j].apply(parts[j][i]) * w.get(i, j)))
            .collect();
        dec.record(rel_points(&y, &want));
    }
    Ok(vec![enc, dec])
}

/// Largest relative gap between taped and central-difference gradients of
/// the reconstruction loss on a 12-vertex model, frames held fixed.
pub fn end_to_end_gradient_error(seed: u64) -> Result<f64> {
    let spec = ArticulatedChainSpec {
        segments: 2,
        ring_size: 3,
        rings_per_segment: 2,
        joint_angles: vec![Vec3::new(0.1, 0.2, 0.5)],
        ..Default::default()
    };
    let (rest, w) = chain_rest(&spec)?;
    let x = skin(&rest.vertices, &w, &spec.segment_motions())?;
    let cfg = MeshAeConfig {
        m: 2,
        d: 3,
        hidden: 8,
        enc_rounds: 1,
        dec_rounds: 1,
        activation: Activation::Elu,
        fa: true,
    };
    let adj = Arc::new(Adjacency::from_triangles(x.len(), &rest.faces)?);
    let model = GlobalMeshAE::new(cfg, adj, &mut rng(seed, 500))?;
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape);
    let (loss, frame) = model.recon_error_taped(&mut tape, &b, &x, None)?;
    let g = tape.backward(loss)?;
    let analytic: Vec<f64> = b.grads(&tape, &g).concat();
    let err = grad_check(
        |p| {
            let mut m2 = model.clone();
            m2.params.set_flat(p).expect("same layout");
            let mut t = Tape::new();
            let b = m2.params.bind(&mut t);
            let (l, _) = m2.recon_error_taped(&mut t, &b, &x, Some(&frame)).expect("same shapes");
            t.scalar_value(l)
        },
        &model.params.flat(),
        &analytic,
        1e-6,
    );
    Ok(err)
}

/// Every autodiff primitive against central differences, plus the
/// end-to-end reconstruction loss.
pub fn gradient_fidelity(seed: u64) -> Result<Vec<PropertyReport>> {
    let mut prim = PropertyReport::new("gradient_primitives", 1e-4);
    for (_, e) in primitive_gradient_errors(seed)? {
        prim.record(e);
    }
    let mut e2e = PropertyReport::new("gradient_end_to_end", 1e-3);
    e2e.record(end_to_end_gradient_error(seed)?);
    Ok(vec![prim, e2e])
}

pub fn report_csv(reports: &[PropertyReport]) -> String {
    let mut s = String::from("property,trials,skipped,max_residual,tolerance,status\n");
    for r in reports {
        s += &format!(
            "{},{},{},{:e},{:e},{}\n",
            r.name,
            r.trials,
            r.skipped,
            r.max_residual,
            r.tolerance,
            if r.passed() { "PASS" } else { "FAIL" }
        );
    }
    s
}
