use super::*;
use crate::autodiff::grad_check;
use crate::data::{chain_rest, random_motion, skin, sphere_points, ArticulatedChainSpec};
use crate::eval::{chamfer, extract_zero_crossings, GridSpec};
use crate::fa::{fa_apply, ActionSpec, Value};
use crate::group::{act_features, act_points, EuclideanMotion};
use crate::linalg3::Mat3;
use alloc::string::String;
use std::vec::Vec;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_chain(soft: bool) -> (ArticulatedChainSpec, Vec<Vec3>, Vec<[usize; 3]>, PartWeights) {
    let spec = ArticulatedChainSpec {
        ring_size: 6,
        rings_per_segment: 4,
        soft_weights: soft,
        joint_angles: vec![Vec3::new(0.0, 0.2, 0.4), Vec3::new(0.0, -0.1, -0.5)],
        ..Default::default()
    };
    let (rest, w) = chain_rest(&spec).unwrap();
    let posed = skin(&rest.vertices, &w, &spec.segment_motions()).unwrap();
    (spec, posed, rest.faces, w)
}

fn small_cfg() -> MeshAeConfig {
    MeshAeConfig {
        m: 3,
        d: 4,
        hidden: 12,
        enc_rounds: 2,
        dec_rounds: 2,
        activation: Activation::Elu,
        fa: true,
    }
}

fn adjacency(n: usize, faces: &[[usize; 3]]) -> Arc<Adjacency> {
    Arc::new(Adjacency::from_triangles(n, faces).unwrap())
}

fn global_model(seed: u64, fa: bool) -> (GlobalMeshAE, Vec<Vec3>) {
    let (_, x, faces, _) = small_chain(false);
    let cfg = MeshAeConfig { fa, ..small_cfg() };
    let model = GlobalMeshAE::new(cfg, adjacency(x.len(), &faces), &mut rng(seed)).unwrap();
    (model, x)
}

fn rel_points(a: &[Vec3], b: &[Vec3]) -> f64 {
    let scale = b.iter().map(|p| p.max_abs()).fold(1.0, f64::max);
    a.iter().zip(b).map(|(p, q)| (*p - *q).max_abs()).fold(0.0, f64::max) / scale
}

fn rel_codes(a: &FeatureMatrix, b: &FeatureMatrix) -> f64 {
    a.max_abs_diff(b).unwrap() / b.max_abs().max(1.0)
}

fn random_code(r: &mut ChaCha8Rng, m: usize, d: usize) -> FeatureMatrix {
    FeatureMatrix::new(
        (0..m).map(|_| r.random_range(-1.0..1.0)).collect(),
        (0..d)
            .map(|_| Vec3::new(r.random_range(-1.0..1.0), r.random_range(-0.7..0.7), r.random_range(-0.4..0.4)))
            .collect(),
    )
}

// Global mesh model

#[test]
fn global_encoder_and_decoder_are_equivariant() {
    let (model, x) = global_model(1, true);
    let mut r = rng(2);
    let z = model.encode(&x).unwrap();
    for _ in 0..50 {
        let g = random_motion(&mut r, 2.0, true);
        let zg = model.encode(&act_points(&g, &x)).unwrap();
        assert!(rel_codes(&zg, &act_features(&g, &z)) < 1e-5);
        let c = random_code(&mut r, 3, 4);
        let yg = model.decode(&act_features(&g, &c)).unwrap();
        assert!(rel_points(&yg, &act_points(&g, &model.decode(&c).unwrap())) < 1e-5);
    }
}

#[test]
fn vanilla_model_is_not_equivariant() {
    let (model, x) = global_model(1, false);
    let z = model.encode(&x).unwrap();
    let g = EuclideanMotion::rotation(Mat3::from_rotation_vector(Vec3::new(0.3, 1.1, -0.4)));
    let zg = model.encode(&act_points(&g, &x)).unwrap();
    assert!(rel_codes(&zg, &act_features(&g, &z)) > 1e-3);
}

#[test]
fn zero_encoder_outputs_the_centroid() {
    let (mut model, x) = global_model(3, true);
    for (name, t) in model.params.clone().iter() {
        if name.starts_with("enc.") {
            model.params.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let _ = t;
    }
    let z = model.encode(&x).unwrap();
    assert!(z.inv.iter().all(|&u| u == 0.0));
    // Each term pushes zero rows forward to 1tᵀ; t is the centroid.
    let (f, _) = pca_frame_uniform(&x).unwrap();
    let mut hand = Vec3::ZERO;
    for g in &f.motions {
        hand += g.apply(Vec3::ZERO);
    }
    hand = hand / 8.0;
    for row in &z.equi {
        assert!((*row - hand).norm() < 1e-12);
    }
}

#[test]
fn constant_decoder_gives_frame_averaged_mesh() {
    let (mut model, _) = global_model(4, true);
    let c = Vec3::new(0.4, -0.2, 0.7);
    for (name, _) in model.params.clone().iter() {
        if name.starts_with("dec.") {
            let t = model.params.get_mut(name).unwrap();
            t.data_mut().fill(0.0);
            if name == "dec.head.b" {
                t.data_mut().copy_from_slice(&c.to_array());
            }
        }
    }
    let z = random_code(&mut rng(5), 3, 4);
    let y = model.decode(&z).unwrap();
    let (f, _) = pca_frame_uniform(&z.equi).unwrap();
    let mut hand = Vec3::ZERO;
    for g in &f.motions {
        hand += g.apply(c);
    }
    hand = hand / 8.0;
    assert_eq!(y.len(), model.vertices());
    for p in &y {
        assert!((*p - hand).norm() < 1e-12);
    }
}

#[test]
fn decoder_needs_three_rows() {
    let (_, x, faces, _) = small_chain(false);
    let cfg = MeshAeConfig { d: 2, ..small_cfg() };
    assert!(matches!(
        GlobalMeshAE::new(cfg, adjacency(x.len(), &faces), &mut rng(0)),
        Err(Error::Config(_))
    ));
    let (model, _) = global_model(0, true);
    let z = FeatureMatrix::new(vec![0.0; 3], vec![Vec3::ZERO; 2]);
    assert!(matches!(model.decode(&z), Err(Error::ShapeMismatch { .. })));
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape);
    let zv = LatentVar::constant(&mut tape, &z);
    assert_eq!(
        model.decode_taped(&mut tape, &b, zv, None).unwrap_err(),
        Error::TooFewPoints { needed: 3, got: 2 }
    );
}

#[test]
fn recon_loss_examples() {
    let (model, x) = global_model(6, true);
    assert_eq!(recon_loss(&model, &[]), Err(Error::EmptyBatch));
    let c = Vec3::new(0.1, -0.2, 0.3);
    let shifted: Vec<Vec3> = x.iter().map(|p| *p + c).collect();
    let d = frobenius_distance(&shifted, &x).unwrap();
    assert!((d - (x.len() as f64).sqrt() * c.norm()).abs() < 1e-12);
    assert_eq!(frobenius_distance(&x, &x).unwrap(), 0.0);

    let mut r = rng(7);
    let batch: Vec<Vec<Vec3>> = (0..3)
        .map(|_| act_points(&random_motion(&mut r, 1.0, false), &x))
        .collect();
    let mut naive = 0.0;
    for xi in &batch {
        let y = model.reconstruct(xi).unwrap();
        let mut s = 0.0;
        for (p, q) in y.iter().zip(xi) {
            for k in 0..3 {
                s += (p.to_array()[k] - q.to_array()[k]).powi(2);
            }
        }
        naive += s.sqrt();
    }
    naive /= 3.0;
    assert!((recon_loss(&model, &batch).unwrap() - naive).abs() < 1e-10);
}

#[test]
fn taped_encoder_matches_fa_apply() {
    // The stacked, taped average must agree with the reference operator
    // applied to the plain backbone.
    let (model, x) = global_model(8, true);
    let phi = |v: &Value| -> Result<Value> {
        let Value::Points(p) = v else { unreachable!() };
        let plain = GlobalMeshAE {
            nets: MeshPair {
                cfg: MeshAeConfig { fa: false, ..*model.config() },
                ..model.nets.clone()
            },
            params: model.params.clone(),
        };
        let z = plain.encode(p)?;
        Ok(Value::Features(z))
    };
    let (f, _) = pca_frame_uniform(&x).unwrap();
    let out = fa_apply(
        &phi,
        &f,
        ActionSpec::Points { n: Some(x.len()) },
        ActionSpec::Features { inv: 3, equi: 4 },
        &Value::Points(x.clone()),
    )
    .unwrap();
    let Value::Features(reference) = out else { panic!() };
    assert!(rel_codes(&model.encode(&x).unwrap(), &reference) < 1e-12);
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    // 12 vertices: two segments of two rings of three.
    let spec = ArticulatedChainSpec {
        segments: 2,
        ring_size: 3,
        rings_per_segment: 2,
        joint_angles: vec![Vec3::new(0.1, 0.2, 0.5)],
        ..Default::default()
    };
    let (rest, w) = chain_rest(&spec).unwrap();
    let x = skin(&rest.vertices, &w, &spec.segment_motions()).unwrap();
    assert_eq!(x.len(), 12);
    let cfg = MeshAeConfig {
        m: 2,
        d: 3,
        hidden: 8,
        enc_rounds: 1,
        dec_rounds: 1,
        activation: Activation::Elu,
        fa: true,
    };
    let model = GlobalMeshAE::new(cfg, adjacency(12, &rest.faces), &mut rng(9)).unwrap();
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape);
    let (loss, frame) = model.recon_error_taped(&mut tape, &b, &x, None).unwrap();
    let g = tape.backward(loss).unwrap();
    let analytic: Vec<f64> = b.grads(&tape, &g).concat();
    let flat = model.params.flat();
    let err = grad_check(
        |p| {
            let mut m2 = model.clone();
            m2.params.set_flat(p).unwrap();
            let mut t = Tape::new();
            let b = m2.params.bind(&mut t);
            let (l, _) = m2.recon_error_taped(&mut t, &b, &x, Some(&frame)).unwrap();
            t.scalar_value(l)
        },
        &flat,
        &analytic,
        1e-6,
    );
    assert!(err < 1e-3, "{err}");
}

// Training

fn tiny_global(seed: u64) -> (GlobalMeshAE, Vec<Vec3>) {
    let spec = ArticulatedChainSpec {
        ring_size: 4,
        rings_per_segment: 2,
        joint_angles: vec![Vec3::new(0.0, 0.1, 0.6), Vec3::new(0.0, 0.0, -0.4)],
        ..Default::default()
    };
    let (rest, w) = chain_rest(&spec).unwrap();
    let x = skin(&rest.vertices, &w, &spec.segment_motions()).unwrap();
    let cfg = MeshAeConfig {
        m: 2,
        d: 4,
        hidden: 16,
        enc_rounds: 1,
        dec_rounds: 1,
        activation: Activation::Elu,
        fa: true,
    };
    (GlobalMeshAE::new(cfg, adjacency(x.len(), &rest.faces), &mut rng(seed)).unwrap(), x)
}

#[test]
fn zero_epochs_leave_parameters_unchanged() {
    let (mut model, x) = tiny_global(10);
    let before = model.params.clone();
    let cfg = TrainConfig { epochs: 0, ..Default::default() };
    let mut state = TrainState::new(&model.params);
    train(&mut model, &[x], &cfg, &mut state, |_, _| panic!("no epochs")).unwrap();
    assert_eq!(model.params, before);
    assert!(state.history.is_empty());
}

#[test]
fn overfits_a_single_shape() {
    let (mut model, x) = tiny_global(11);
    let data = vec![x];
    let initial = recon_loss(&model, &data).unwrap();
    let cfg = TrainConfig {
        epochs: 2000,
        batch_size: 1,
        adam: AdamConfig { lr: 1e-3, ..Default::default() },
        seed: 1,
    };
    let mut state = TrainState::new(&model.params);
    train(&mut model, &data, &cfg, &mut state, |_, _| {}).unwrap();
    let last = recon_loss(&model, &data).unwrap();
    assert!(state.history.iter().all(|l| l.is_finite()));
    assert!(last < 0.01 * initial, "{initial} → {last}");
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let (model, x) = tiny_global(12);
    let mut r = rng(13);
    let data: Vec<Vec<Vec3>> = (0..5)
        .map(|_| act_points(&random_motion(&mut r, 0.5, false), &x))
        .collect();
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 2,
        adam: AdamConfig { lr: 1e-3, ..Default::default() },
        seed: 3,
    };
    let mut full = model.clone();
    let mut s_full = TrainState::new(&full.params);
    train(&mut full, &data, &cfg, &mut s_full, |_, _| {}).unwrap();

    let mut part = model.clone();
    let mut s_part = TrainState::new(&part.params);
    train(&mut part, &data, &TrainConfig { epochs: 2, ..cfg }, &mut s_part, |_, _| {}).unwrap();
    train(&mut part, &data, &cfg, &mut s_part, |_, _| {}).unwrap();
    assert_eq!(s_full.history, s_part.history);
    assert_eq!(full.params, part.params);
}

#[test]
fn batched_reconstruction_matches_single() {
    let (model, x) = global_model(28, true);
    let mut r = rng(29);
    let xs: Vec<Vec<Vec3>> = (0..3).map(|_| act_points(&random_motion(&mut r, 1.0, false), &x)).collect();
    let batched = model.reconstruct_batch(&xs).unwrap();
    for (x, y) in xs.iter().zip(&batched) {
        assert!(rel_points(y, &model.reconstruct(x).unwrap()) < 1e-12);
    }
    let (pw, _, xp) = piecewise(28, true);
    let xs = vec![xp.clone(), act_points(&random_motion(&mut r, 1.0, false), &xp)];
    let batched = pw.reconstruct_batch(&xs).unwrap();
    for (x, y) in xs.iter().zip(&batched) {
        assert!(rel_points(y, &pw.reconstruct(x).unwrap()) < 1e-12);
    }
}

#[test]
fn batch_loss_is_the_sum_of_sample_shares() {
    let (model, x) = tiny_global(14);
    let mut r = rng(15);
    let data: Vec<Vec<Vec3>> = (0..3)
        .map(|_| act_points(&random_motion(&mut r, 0.5, false), &x))
        .collect();
    let batch: Vec<&[Vec3]> = data.iter().map(|d| d.as_slice()).collect();
    let (loss, _) = batch_gradients(&model, &batch, &mut rng(0)).unwrap();
    assert!((loss - recon_loss(&model, &data).unwrap()).abs() < 1e-12);
}

// Piecewise model

fn piecewise(seed: u64, soft: bool) -> (PiecewiseMeshAE, ArticulatedChainSpec, Vec<Vec3>) {
    let (spec, x, faces, w) = small_chain(soft);
    let model = PiecewiseMeshAE::new(small_cfg(), adjacency(x.len(), &faces), w, &mut rng(seed)).unwrap();
    (model, spec, x)
}

#[test]
fn part_geometry_examples() {
    let (_, x, _, w) = small_chain(false);
    let labels = w.labels();
    for j in 0..3 {
        let xj = part_geometry(&x, &w, j).unwrap();
        let c = weighted_centroid(&x, &w.column(j)).unwrap();
        for i in 0..x.len() {
            if labels[i] == j {
                assert_eq!(xj[i], x[i]);
            } else {
                assert_eq!(xj[i], c);
            }
        }
    }
    assert_eq!(part_geometry(&x, &PartWeights::single(x.len()), 0).unwrap(), x);

    let (_, xs, _, ws) = small_chain(true);
    assert!(!ws.is_hard());
    for j in 0..3 {
        let col = ws.column(j);
        let tot: f64 = col.iter().sum();
        let mut c = [0.0; 3];
        for (p, a) in xs.iter().zip(&col) {
            for k in 0..3 {
                c[k] += a * p.to_array()[k];
            }
        }
        let xj = part_geometry(&xs, &ws, j).unwrap();
        for (i, p) in xs.iter().enumerate() {
            for k in 0..3 {
                let want = (1.0 - col[i]) * c[k] / tot + col[i] * p.to_array()[k];
                assert!((xj[i].to_array()[k] - want).abs() < 1e-12);
            }
        }
    }
    let zero = PartWeights::hard(&vec![0; x.len()], 2).unwrap();
    assert_eq!(
        part_geometry(&x, &zero, 1),
        Err(Error::ZeroWeight.in_part(1))
    );
}

#[test]
fn single_part_reduces_to_global_model_bit_for_bit() {
    let (_, x, faces, _) = small_chain(false);
    let adj = adjacency(x.len(), &faces);
    let global = GlobalMeshAE::new(small_cfg(), adj.clone(), &mut rng(16)).unwrap();
    let pw = PiecewiseMeshAE::new(small_cfg(), adj, PartWeights::single(x.len()), &mut rng(16)).unwrap();
    assert_eq!(global.params, pw.params);
    let zg = global.encode(&x).unwrap();
    let zp = pw.encode(&x).unwrap();
    assert_eq!(zp, vec![zg.clone()]);
    assert_eq!(pw.decode(&zp).unwrap(), global.decode(&zg).unwrap());
}

/// Per-part motions as in skinning: part `j` moved by `gs[j]`.
fn move_parts(spec: &ArticulatedChainSpec, x: &[Vec3], w: &PartWeights, r: &mut ChaCha8Rng) -> (Vec<EuclideanMotion>, Vec<Vec3>) {
    let gs: Vec<EuclideanMotion> = (0..spec.segments).map(|_| random_motion(r, 1.5, false)).collect();
    let moved = skin(x, w, &gs).unwrap();
    (gs, moved)
}

#[test]
fn hard_weights_give_part_equivariance() {
    let (model, spec, x) = piecewise(17, false);
    let mut r = rng(18);
    let zs = model.encode(&x).unwrap();
    let mut checked = 0;
    for _ in 0..50 {
        let (gs, moved) = move_parts(&spec, &x, model.weights(), &mut r);
        let zm = model.encode(&moved).unwrap();
        for j in 0..3 {
            assert!(rel_codes(&zm[j], &act_features(&gs[j], &zs[j])) < 1e-5);
        }
        // Decoder half: moved codes decode to the blend of moved parts.
        let codes: Vec<FeatureMatrix> = (0..3).map(|_| random_code(&mut r, 3, 4)).collect();
        let parts = model.decode_parts(&codes).unwrap();
        let moved_codes: Vec<FeatureMatrix> = codes.iter().zip(&gs).map(|(c, g)| act_features(g, c)).collect();
        let y = model.decode(&moved_codes).unwrap();
        let w = model.weights();
        let want: Vec<Vec3> = (0..x.len())
            .map(|i| (0..3).fold(Vec3::ZERO, |a, j| a + gs[j].apply(parts[j][i]) * w.get(i, j)))
            .collect();
        assert!(rel_points(&y, &want) < 1e-5);
        checked += 1;
    }
    assert_eq!(checked, 50);
}

#[test]
fn untouched_parts_keep_their_codes() {
    let (model, _, x) = piecewise(19, false);
    let labels = model.weights().labels();
    let g = random_motion(&mut rng(20), 1.0, false);
    let moved: Vec<Vec3> = x.iter().zip(&labels).map(|(p, &l)| if l == 1 { g.apply(*p) } else { *p }).collect();
    let a = model.encode(&x).unwrap();
    let b = model.encode(&moved).unwrap();
    assert!(rel_codes(&b[0], &a[0]) < 1e-10);
    assert!(rel_codes(&b[2], &a[2]) < 1e-10);
    assert!(rel_codes(&b[1], &act_features(&g, &a[1])) < 1e-5);
}

#[test]
fn identical_parts_have_related_codes() {
    // Two copies of one tube, the second a rigid motion of the first.
    let spec = ArticulatedChainSpec {
        segments: 2,
        ring_size: 6,
        rings_per_segment: 4,
        joint_angles: vec![Vec3::ZERO],
        ..Default::default()
    };
    let (rest, _) = chain_rest(&spec).unwrap();
    let half = rest.vertices.len() / 2;
    let tube: Vec<Vec3> = rest.vertices[..half].to_vec();
    let g = random_motion(&mut rng(21), 3.0, false);
    let mut x = tube.clone();
    x.extend(act_points(&g, &tube));
    let mut faces: Vec<[usize; 3]> = rest.faces.iter().filter(|f| f.iter().all(|&v| v < half)).copied().collect();
    let copy: Vec<[usize; 3]> = faces.iter().map(|f| f.map(|v| v + half)).collect();
    faces.extend(copy);
    let labels: Vec<usize> = (0..2 * half).map(|i| i / half).collect();
    let w = PartWeights::hard(&labels, 2).unwrap();
    let model = PiecewiseMeshAE::new(small_cfg(), adjacency(2 * half, &faces), w, &mut rng(22)).unwrap();
    let z = model.encode(&x).unwrap();
    // Part geometries differ by `g` only up to which vertices collapse
    // onto the centroid, and the shared encoder sees them identically.
    let mut swapped = act_points(&g, &tube);
    swapped.extend(tube.clone());
    let zs = model.encode(&swapped).unwrap();
    assert!(rel_codes(&z[1], &act_features(&g, &z[0])) < 1e-5 || rel_codes(&zs[0], &z[1]) < 1e-10);
    assert!(rel_codes(&zs[1], &z[0]) < 1e-10 || rel_codes(&zs[0], &act_features(&g, &z[0])) < 1e-5);
}

#[test]
fn constant_decoder_blends_placed_constants() {
    let (mut model, _, _) = piecewise(23, false);
    let c = Vec3::new(-0.3, 0.5, 0.2);
    for (name, _) in model.params.clone().iter() {
        if name.starts_with("dec.") {
            let t = model.params.get_mut(name).unwrap();
            t.data_mut().fill(0.0);
            if name == "dec.head.b" {
                t.data_mut().copy_from_slice(&c.to_array());
            }
        }
    }
    let mut r = rng(24);
    let codes: Vec<FeatureMatrix> = (0..3).map(|_| random_code(&mut r, 3, 4)).collect();
    let y = model.decode(&codes).unwrap();
    let placed: Vec<Vec3> = codes
        .iter()
        .map(|z| {
            let (f, _) = pca_frame_uniform(&z.equi).unwrap();
            f.motions.iter().fold(Vec3::ZERO, |a, g| a + g.apply(c)) / 8.0
        })
        .collect();
    let w = model.weights();
    for (i, p) in y.iter().enumerate() {
        let want = (0..3).fold(Vec3::ZERO, |a, j| a + placed[j] * w.get(i, j));
        assert!((*p - want).norm() < 1e-12);
    }
}

#[test]
fn sharper_weights_reduce_part_equivariance_error() {
    let (mut model, spec, x) = piecewise(25, true);
    let soft = model.weights().clone();
    let mut r = rng(26);
    let gs: Vec<EuclideanMotion> = (0..3).map(|_| random_motion(&mut r, 0.5, false)).collect();
    let mut residuals = Vec::new();
    for t in [1.0, 0.5, 0.25, 0.1, 0.05] {
        let w = soft.sharpened(t).unwrap();
        model.set_weights(w.clone()).unwrap();
        let z = model.encode(&x).unwrap();
        let moved = skin(&x, &w, &gs).unwrap();
        let zm = model.encode(&moved).unwrap();
        let res = (0..3)
            .map(|j| rel_codes(&zm[j], &act_features(&gs[j], &z[j])))
            .fold(0.0, f64::max);
        residuals.push(res);
    }
    let _ = spec;
    for w in residuals.windows(2) {
        assert!(w[1] <= w[0], "{residuals:?}");
    }
    assert!(residuals[0] > 1e-4, "soft weights should break exact equivariance: {residuals:?}");
}

#[test]
fn piecewise_errors_name_the_part() {
    let (model, _, x) = piecewise(27, false);
    let mut codes = model.encode(&x).unwrap();
    codes[2] = FeatureMatrix::new(vec![0.0; 3], vec![Vec3::ZERO; 2]);
    let err = model.decode(&codes).unwrap_err();
    assert!(matches!(err, Error::Part { part: 2, .. }), "{err:?}");
    codes.pop();
    assert!(matches!(model.decode(&codes), Err(Error::ShapeMismatch { .. })));
}

// Implicit VAE

fn implicit_cfg(m: usize, noisy: bool) -> ImplicitConfig {
    let mut cfg = ImplicitConfig::for_domain((Vec3::new(-1.5, -1.5, -1.5), Vec3::new(1.5, 1.5, 1.5)));
    cfg.m = m;
    cfg.d = 4;
    cfg.encoder_hidden = 16;
    cfg.decoder_hidden = 16;
    cfg.decoder_layers = 3;
    cfg.decoder_skip = Some(1);
    cfg.noisy_invariants = noisy;
    cfg.sald.samples = 32;
    cfg
}

fn ellipsoid_cloud(r: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
    sphere_points(Vec3::ZERO, 1.0, n, r)
        .into_iter()
        .map(|p| Vec3::new(p.x * 1.0, p.y * 0.7, p.z * 0.45))
        .collect()
}

#[test]
fn implicit_encoder_is_equivariant_and_eta_invariant() {
    for (m, noisy) in [(0, false), (2, true)] {
        let model = ImplicitVAE::new(implicit_cfg(m, noisy), &mut rng(30)).unwrap();
        let mut r = rng(31);
        let p = ellipsoid_cloud(&mut r, 40);
        let e = model.encode(&p).unwrap();
        assert_eq!(e.eta.len(), model.config().eta_dim());
        assert!(!e.degenerate);
        for _ in 0..50 {
            let g = random_motion(&mut r, 2.0, true);
            let eg = model.encode(&act_points(&g, &p)).unwrap();
            assert!(rel_codes(&eg.mu, &act_features(&g, &e.mu)) < 1e-5);
            for (a, b) in eg.eta.iter().zip(&e.eta) {
                assert!((a - b).abs() < 1e-5 * b.abs().max(1.0));
            }
        }
    }
}

#[test]
fn duplicated_points_encode_identically() {
    let model = ImplicitVAE::new(implicit_cfg(0, false), &mut rng(32)).unwrap();
    let p = ellipsoid_cloud(&mut rng(33), 30);
    let mut doubled = p.clone();
    doubled.extend(p.iter().copied());
    let a = model.encode(&p).unwrap();
    let b = model.encode(&doubled).unwrap();
    assert!(rel_codes(&a.mu, &b.mu) < 1e-12);
    for (x, y) in a.eta.iter().zip(&b.eta) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn colinear_cloud_is_flagged_not_rejected() {
    let model = ImplicitVAE::new(implicit_cfg(0, false), &mut rng(34)).unwrap();
    let p = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 1.0, 0.0), Vec3::new(2.0, 2.0, 0.0)];
    let e = model.encode(&p).unwrap();
    assert!(e.degenerate);
    assert!(e.mu.is_finite());
    assert_eq!(model.encode(&[]).unwrap_err(), Error::EmptyCloud);
}

#[test]
fn implicit_decoder_is_jointly_invariant() {
    let model = ImplicitVAE::new(implicit_cfg(2, false), &mut rng(35)).unwrap();
    let mut r = rng(36);
    for _ in 0..50 {
        let z = random_code(&mut r, 2, 4);
        let g = random_motion(&mut r, 2.0, true);
        let x = Vec3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
        let a = model.decode_implicit(&z, x).unwrap();
        let b = model.decode_implicit(&act_features(&g, &z), g.apply(x)).unwrap();
        assert!((a - b).abs() < 1e-5 * a.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn implicit_decoder_matches_pointwise_operator() {
    let model = ImplicitVAE::new(implicit_cfg(2, false), &mut rng(37)).unwrap();
    let mut r = rng(38);
    let z = random_code(&mut r, 2, 4);
    let (f, _) = pca_frame_uniform(&z.equi).unwrap();
    let psi = |zc: &FeatureMatrix, x: Vec3| {
        let mut tape = Tape::new();
        let b = model.params.bind(&mut tape);
        let mut row = zc.inv.clone();
        row.extend(zc.equi.iter().flat_map(|p| p.to_array()));
        let s = tape.constant(Tensor::row(row));
        let xv = tape.constant(Tensor::row(x.to_array().to_vec()));
        let y = model.dec.forward_blocked(&mut tape, &b, s, xv, 1).unwrap();
        tape.data(y)[0]
    };
    for _ in 0..10 {
        let x = Vec3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
        let want = crate::fa::fa_apply_pointwise(&psi, &f, &z, x).unwrap();
        assert!((model.decode_implicit(&z, x).unwrap() - want).abs() < 1e-12);
    }
}

#[test]
fn constant_implicit_decoder() {
    let mut model = ImplicitVAE::new(implicit_cfg(0, false), &mut rng(39)).unwrap();
    for (name, _) in model.params.clone().iter() {
        if name.starts_with("dec.") {
            let t = model.params.get_mut(name).unwrap();
            t.data_mut().fill(0.0);
        }
    }
    let last = model.dec.config().widths.len() - 2;
    model.params.get_mut(&format!("dec.l{last}.b")).unwrap().data_mut()[0] = 0.37;
    let z = random_code(&mut rng(40), 0, 4);
    for x in [Vec3::ZERO, Vec3::new(1.0, -2.0, 3.0)] {
        assert!((model.decode_implicit(&z, x).unwrap() - 0.37).abs() < 1e-15);
    }
}

#[test]
fn zero_level_set_moves_with_the_code() {
    let model = ImplicitVAE::new(implicit_cfg(0, false), &mut rng(41)).unwrap();
    let mut r = rng(42);
    let z = random_code(&mut r, 0, 4);
    let g = random_motion(&mut r, 0.5, false);
    let zg = act_features(&g, &z);
    let grid = GridSpec::cube(Vec3::new(-1.2, -1.2, -1.2), Vec3::new(1.2, 1.2, 1.2), 14);
    let base = extract_zero_crossings(&|x| model.decode_implicit(&z, x).unwrap(), &grid);
    assert!(!base.is_empty());
    // The moved field sampled on the moved grid, mapped back into world
    // coordinates.
    let moved = extract_zero_crossings(&|x| model.decode_implicit(&zg, g.apply(x)).unwrap(), &grid);
    let moved = act_points(&g, &moved);
    assert!(chamfer(&moved, &act_points(&g, &base)).unwrap() < 1e-4);
}

#[test]
fn sample_latent_properties() {
    let mut r = rng(43);
    let mu = random_code(&mut r, 2, 4);
    let s = sample_latent(&mu, &[-1e9; 4], &mut r).unwrap();
    assert!(rel_codes(&s, &mu) < 1e-8);
    assert_eq!(s.inv, mu.inv);
    let eta = [0.1, -0.5, 0.3, -2.0, 0.2, -0.1];
    assert_eq!(
        sample_latent(&mu, &eta, &mut rng(1)).unwrap(),
        sample_latent(&mu, &eta, &mut rng(1)).unwrap()
    );
    assert!(matches!(sample_latent(&mu, &eta[..5], &mut r), Err(Error::ShapeMismatch { .. })));

    // Taped and plain draw the same noise.
    let mut tape = Tape::new();
    let mv = LatentVar::constant(&mut tape, &mu);
    let ev = tape.constant(Tensor::row(eta.to_vec()));
    let taped = sample_latent_taped(&mut tape, &mv, ev, &mut rng(2)).unwrap().value(&tape);
    assert!(rel_codes(&taped, &sample_latent(&mu, &eta, &mut rng(2)).unwrap()) < 1e-15);
}

#[test]
fn sample_std_matches_exp_eta() {
    let mu = FeatureMatrix::new(vec![], vec![Vec3::new(1.0, -2.0, 0.5); 3]);
    let eta = [-0.7, 0.0, 0.4];
    let mut r = rng(44);
    let n = 100_000;
    let mut sq = [0.0; 3];
    for _ in 0..n {
        let s = sample_latent(&mu, &eta, &mut r).unwrap();
        for j in 0..3 {
            sq[j] += (s.equi[j] - mu.equi[j]).norm_sq();
        }
    }
    for j in 0..3 {
        let std = (sq[j] / (3.0 * n as f64)).sqrt();
        let want = eta[j].exp();
        assert!((std / want - 1.0).abs() < 0.02, "row {j}: {std} vs {want}");
    }
}

fn exact_distance(sign: f64) -> impl FnMut(&mut Tape, &[Vec3]) -> Result<Var> {
    move |t: &mut Tape, xs: &[Vec3]| {
        let v: Vec<f64> = xs.iter().map(|x| sign * x.norm()).collect();
        Ok(t.constant(Tensor::matrix(xs.len(), 1, v)?))
    }
}

#[test]
fn sald_vanishes_for_the_exact_distance() {
    let cloud = [Vec3::ZERO];
    let mut r = rng(45);
    let samples: Vec<Vec3> = (0..200)
        .map(|_| {
            let p = Vec3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
            if p.norm() < 0.05 { p + Vec3::new(0.2, 0.0, 0.0) } else { p }
        })
        .collect();
    let mut values = Vec::new();
    for sign in [1.0, -1.0] {
        let mut tape = Tape::new();
        let l = sald_loss_at(&mut tape, &samples, &cloud, 1e-5, &mut exact_distance(sign)).unwrap();
        values.push(tape.scalar_value(l));
    }
    assert!(values[0] < 1e-6, "{values:?}");
    assert!((values[0] - values[1]).abs() < 1e-12);
    let mut tape = Tape::new();
    assert_eq!(
        sald_loss_at(&mut tape, &samples, &[], 1e-5, &mut exact_distance(1.0)).unwrap_err(),
        Error::EmptyCloud
    );
}

#[test]
fn sald_matches_naive_tau() {
    let model = ImplicitVAE::new(implicit_cfg(0, false), &mut rng(46)).unwrap();
    let mut r = rng(47);
    let cloud = ellipsoid_cloud(&mut r, 25);
    let z = random_code(&mut r, 0, 4);
    let cfg = model.config().sald;
    let samples = sald_samples(&cloud, &cfg, &mut r).unwrap();
    assert_eq!(samples.len(), cfg.samples);
    let h = cfg.fd_step;
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape);
    let zv = LatentVar::constant(&mut tape, &z);
    let l = sald_loss_at(&mut tape, &samples, &cloud, h, &mut |t: &mut Tape, xs: &[Vec3]| {
        model.decode_points_taped(t, &b, &zv, xs)
    })
    .unwrap();
    let f = |x: Vec3| model.decode_implicit(&z, x).unwrap();
    let mut naive = 0.0;
    for &x in &samples {
        let fx = f(x);
        let gf = Vec3::new(
            (f(x + Vec3::new(h, 0.0, 0.0)) - f(x - Vec3::new(h, 0.0, 0.0))) / (2.0 * h),
            (f(x + Vec3::new(0.0, h, 0.0)) - f(x - Vec3::new(0.0, h, 0.0))) / (2.0 * h),
            (f(x + Vec3::new(0.0, 0.0, h)) - f(x - Vec3::new(0.0, 0.0, h))) / (2.0 * h),
        );
        let mut best = (0, f64::INFINITY);
        for (i, p) in cloud.iter().enumerate() {
            let d = (x - *p).norm();
            if d < best.1 {
                best = (i, d);
            }
        }
        let gh = (x - cloud[best.0]) / best.1;
        let tau = (fx.abs() - best.1).abs() + (gf - gh).norm().min((gf + gh).norm());
        assert!(tau >= 0.0);
        naive += tau;
    }
    naive /= samples.len() as f64;
    assert!((tape.scalar_value(l) - naive).abs() < 1e-10);
}

#[test]
fn vae_loss_examples() {
    let zero = FeatureMatrix::new(vec![0.0; 2], vec![Vec3::ZERO; 3]);
    assert_eq!(vae_loss(&[(zero.clone(), vec![-1.0; 3])]).unwrap(), 0.0);
    let mut one = zero.clone();
    one.equi[1].y = 2.0;
    assert_eq!(vae_loss(&[(one, vec![-1.0; 3])]).unwrap(), 2.0);
    assert_eq!(vae_loss(&[]), Err(Error::EmptyBatch));

    let mut r = rng(48);
    let batch: Vec<(FeatureMatrix, Vec<f64>)> = (0..4)
        .map(|_| (random_code(&mut r, 2, 3), (0..3).map(|_| r.random_range(-2.0..1.0)).collect()))
        .collect();
    let mut naive = 0.0;
    for (mu, eta) in &batch {
        for u in &mu.inv {
            naive += u.abs();
        }
        for row in &mu.equi {
            naive += row.x.abs() + row.y.abs() + row.z.abs();
        }
        for e in eta {
            naive += (e + 1.0).abs();
        }
    }
    assert!((vae_loss(&batch).unwrap() - naive).abs() < 1e-12);
    // Taped term agrees.
    let (mu, eta) = &batch[0];
    let mut tape = Tape::new();
    let mv = LatentVar::constant(&mut tape, mu);
    let ev = tape.constant(Tensor::row(eta.clone()));
    let t = vae_term_taped(&mut tape, &mv, ev);
    assert!((tape.scalar_value(t) - vae_loss(&batch[..1]).unwrap()).abs() < 1e-12);
}

#[test]
fn combined_loss_is_weighted_sum() {
    let model = ImplicitVAE::new(implicit_cfg(0, false), &mut rng(49)).unwrap();
    let mut r = rng(50);
    let batch: Vec<Vec<Vec3>> = (0..2).map(|_| ellipsoid_cloud(&mut r, 20)).collect();
    let s = sald_loss(&model, &batch, &mut rng(7)).unwrap();
    let c = combined_implicit_loss(&model, &batch, &mut rng(7)).unwrap();
    let vae = vae_loss(
        &batch
            .iter()
            .map(|p| {
                let e = model.encode(p).unwrap();
                (e.mu, e.eta)
            })
            .collect::<Vec<_>>(),
    )
    .unwrap();
    assert!(s >= 0.0);
    assert!((c - (s + 0.001 * vae)).abs() < 1e-12);
    // Training shares add up to the same number.
    let refs: Vec<&[Vec3]> = batch.iter().map(|b| b.as_slice()).collect();
    let (l, _) = batch_gradients(&model, &refs, &mut rng(7)).unwrap();
    assert!((l - c).abs() < 1e-12);
}

#[test]
fn geometric_init_starts_near_a_sphere() {
    let cfg = ImplicitConfig {
        decoder_hidden: 64,
        ..implicit_cfg(0, false)
    };
    let model = ImplicitVAE::new(cfg, &mut rng(51)).unwrap();
    let z = random_code(&mut rng(52), 0, 4);
    let r = model.config().init_radius;
    // The frame is centred on the code's centroid, and so is the sphere.
    let c = z.equi.iter().fold(Vec3::ZERO, |a, p| a + *p) / 4.0;
    let pts = sphere_points(c, r, 50, &mut rng(53));
    let mean: f64 = pts.iter().map(|&x| model.decode_implicit(&z, x).unwrap().abs()).sum::<f64>() / 50.0;
    assert!(mean < 0.25 * r, "{mean}");
    assert!(model.decode_implicit(&z, c).unwrap() < 0.0);
}

#[test]
fn field_wraps_the_decoder() {
    let model = ImplicitVAE::new(implicit_cfg(0, false), &mut rng(54)).unwrap();
    let z = random_code(&mut rng(55), 0, 4);
    let f = model.field(&z).unwrap();
    let x = Vec3::new(0.2, 0.1, -0.3);
    assert_eq!(f.eval(x), model.decode_implicit(&z, x).unwrap());
    assert!(f.gradient(x).is_finite());
    let bad = FeatureMatrix::new(vec![], vec![Vec3::ZERO; 2]);
    assert!(model.field(&bad).is_err());
    let _ = String::new();
}

