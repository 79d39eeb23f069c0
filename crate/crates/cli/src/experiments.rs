//! The two training experiments: rotation robustness of the mesh
//! autoencoder with and without frame averaging, and implicit
//! reconstruction of noisy spheres.

use std::sync::Arc;

use anyhow::{ensure, Context, Result};
use eqshape_core::autodiff::{AdamConfig, Adjacency};
use eqshape_core::backbones::Activation;
use eqshape_core::data::{
    bounding_box, corrupt_cloud, gen_chain_dataset, inflate_box, make_splits, sphere_points, split_test_shapes,
    ArticulatedChainSpec, ChainDatasetConfig, SplitConfig, SplitKind,
};
use eqshape_core::eval::{chamfer, mse, zero_crossings_from_values, GridSpec};
use eqshape_core::models::{
    train, GlobalMeshAE, ImplicitConfig, ImplicitVAE, MeshAeConfig, TrainConfig, TrainState,
};
use eqshape_core::Vec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct TrendConfig {
    pub data: ChainDatasetConfig,
    pub model: MeshAeConfig,
    pub train: TrainConfig,
    pub split: SplitConfig,
    pub data_seed: u64,
    pub split_seed: u64,
}

impl TrendConfig {
    /// 256 chains of 72 vertices, small networks, 200 epochs.
    pub fn desk() -> Self {
        Self {
            data: ChainDatasetConfig {
                count: 256,
                template: ArticulatedChainSpec {
                    ring_size: 6,
                    rings_per_segment: 4,
                    ..Default::default()
                },
                ..Default::default()
            },
            model: MeshAeConfig {
                m: 4,
                d: 8,
                hidden: 32,
                enc_rounds: 2,
                dec_rounds: 2,
                activation: Activation::Elu,
                fa: true,
            },
            train: TrainConfig {
                epochs: 200,
                batch_size: 16,
                adam: AdamConfig {
                    lr: 1e-3,
                    ..Default::default()
                },
                seed: 0,
            },
            split: SplitConfig::default(),
            data_seed: 0,
            split_seed: 0,
        }
    }
}

/// Test-set MSE of both models on aligned (`I`) and rotated (`SO3`) shapes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrendResult {
    pub fa_i: f64,
    pub fa_so3: f64,
    pub vanilla_i: f64,
    pub vanilla_so3: f64,
}

impl TrendResult {
    pub fn fa_ratio(&self) -> f64 {
        self.fa_so3 / self.fa_i
    }

    pub fn vanilla_ratio(&self) -> f64 {
        self.vanilla_so3 / self.vanilla_i
    }
}

/// Trains the frame-averaged and the plain model from the same
/// initialization on aligned shapes, then evaluates both on held-out shapes
/// as they are and under random rotations.
pub fn run_trend(cfg: &TrendConfig, log: &mut dyn FnMut(String)) -> Result<TrendResult> {
    let ds = gen_chain_dataset(&cfg.data, &mut ChaCha8Rng::seed_from_u64(cfg.data_seed))?;
    let adj = Arc::new(Adjacency::from_triangles(ds.shapes[0].len(), &ds.faces)?);
    let split_i = make_splits(&ds.poses, SplitKind::I, cfg.split_seed, &cfg.split)?;
    let split_so3 = make_splits(&ds.poses, SplitKind::SO3, cfg.split_seed, &cfg.split)?;
    let train_set: Vec<Vec<Vec3>> = split_i.train.iter().map(|&i| ds.shapes[i].clone()).collect();
    let test_i = split_test_shapes(&ds.shapes, &split_i);
    let test_so3 = split_test_shapes(&ds.shapes, &split_so3);

    let mut out = [0.0; 4];
    for (slot, fa) in [(0, true), (2, false)] {
        let name = if fa { "fa" } else { "vanilla" };
        let model_cfg = MeshAeConfig { fa, ..cfg.model };
        let mut model = GlobalMeshAE::new(model_cfg, adj.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.train.seed))?;
        let mut state = TrainState::new(&model.params);
        train(&mut model, &train_set, &cfg.train, &mut state, |e, l| {
            if e % 20 == 0 || e + 1 == cfg.train.epochs {
                log(format!("{name} epoch {e}: loss {l:.5}"));
            }
        })?;
        for (k, test) in [&test_i, &test_so3].into_iter().enumerate() {
            let recon = model.reconstruct_batch(test)?;
            out[slot + k] = mse(test, &recon)?;
        }
        log(format!("{name}: MSE(I) = {:.5}, MSE(SO3) = {:.5}", out[slot], out[slot + 1]));
    }
    Ok(TrendResult {
        fa_i: out[0],
        fa_so3: out[1],
        vanilla_i: out[2],
        vanilla_so3: out[3],
    })
}

#[derive(Debug, Clone)]
pub struct SphereConfig {
    pub clouds: usize,
    pub points: usize,
    pub noise: f64,
    /// Centers are uniform in `±center_range` per axis.
    pub center_range: f64,
    pub radius: (f64, f64),
    pub model: ImplicitConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub grid_res: usize,
    /// Clouds reconstructed for the Chamfer check.
    pub eval_clouds: usize,
    pub seed: u64,
}

impl SphereConfig {
    pub fn desk() -> Self {
        let domain = (Vec3::new(-1.5, -1.5, -1.5), Vec3::new(1.5, 1.5, 1.5));
        let mut model = ImplicitConfig::for_domain(domain);
        model.d = 8;
        model.encoder_hidden = 32;
        model.decoder_hidden = 32;
        model.decoder_layers = 3;
        model.decoder_skip = Some(2);
        model.sald.samples = 64;
        Self {
            clouds: 32,
            points: 256,
            noise: 0.01,
            center_range: 0.3,
            radius: (0.5, 0.9),
            model,
            batch_size: 8,
            steps: 500,
            lr: 5e-4,
            grid_res: 24,
            eval_clouds: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SphereResult {
    /// Chamfer between extracted zero crossings and the true sphere.
    pub chamfer: Vec<f64>,
    pub cell_diagonal: f64,
}

impl SphereResult {
    pub fn threshold(&self) -> f64 {
        4.0 * self.cell_diagonal * self.cell_diagonal
    }

    pub fn worst(&self) -> f64 {
        self.chamfer.iter().copied().fold(0.0, f64::max)
    }
}

/// Noisy sphere clouds with their centers and radii.
pub fn sphere_clouds(cfg: &SphereConfig, rng: &mut impl Rng) -> Vec<(Vec<Vec3>, Vec3, f64)> {
    (0..cfg.clouds)
        .map(|_| {
            let c = Vec3::new(
                rng.random_range(-cfg.center_range..=cfg.center_range),
                rng.random_range(-cfg.center_range..=cfg.center_range),
                rng.random_range(-cfg.center_range..=cfg.center_range),
            );
            let r = rng.random_range(cfg.radius.0..=cfg.radius.1);
            let clean = sphere_points(c, r, cfg.points, rng);
            (corrupt_cloud(&clean, cfg.noise, 0.0, rng), c, r)
        })
        .collect()
}

/// Trains the implicit VAE for `steps` minibatch updates, then extracts the
/// zero level set of the first `eval_clouds` mean codes on a grid over the
/// SALD domain.
pub fn run_spheres(cfg: &SphereConfig, log: &mut dyn FnMut(String)) -> Result<SphereResult> {
    ensure!(cfg.clouds > 0 && cfg.batch_size > 0, "need clouds and a positive batch size");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let clouds = sphere_clouds(cfg, &mut rng);
    let data: Vec<Vec<Vec3>> = clouds.iter().map(|c| c.0.clone()).collect();
    let mut model_cfg = cfg.model.clone();
    let bb = bounding_box(data.iter().flatten()).context("empty clouds")?;
    model_cfg.sald.domain = inflate_box(bb, 0.1);
    model_cfg.sald.fd_step = 1e-4 * model_cfg.sald.diagonal();
    let mut model = ImplicitVAE::new(model_cfg.clone(), &mut rng)?;
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let train_cfg = TrainConfig {
        epochs: cfg.steps.div_ceil(per_epoch),
        batch_size: cfg.batch_size,
        adam: AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        seed: cfg.seed,
    };
    let mut state = TrainState::new(&model.params);
    train(&mut model, &data, &train_cfg, &mut state, |e, l| {
        if e % 25 == 0 || e + 1 == train_cfg.epochs {
            log(format!("implicit epoch {e}: loss {l:.5}"));
        }
    })?;
    let (lo, hi) = model_cfg.sald.domain;
    let grid = GridSpec::new(lo, hi, [cfg.grid_res; 3])?;
    let mut result = SphereResult {
        chamfer: Vec::new(),
        cell_diagonal: grid.cell_diagonal(),
    };
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    for (cloud, c, r) in clouds.iter().take(cfg.eval_clouds) {
        let z = model.encode(cloud)?.mu;
        let values = model.decode_many(&z, &grid.points())?;
        let crossings = zero_crossings_from_values(&grid, &values)?;
        let truth = sphere_points(*c, *r, 4000, &mut eval_rng);
        let ch = if crossings.is_empty() { f64::INFINITY } else { chamfer(&crossings, &truth)? };
        log(format!("sphere r = {r:.3}: {} crossings, chamfer {ch:.5}", crossings.len()));
        result.chamfer.push(ch);
    }
    Ok(result)
}
