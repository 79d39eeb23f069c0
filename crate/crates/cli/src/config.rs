//! TOML run configuration. Every key has a default, so an empty file (or
//! no file) is a valid configuration; unknown keys are rejected.

use std::path::Path;

use anyhow::{bail, Context, Result};
use eqshape_core::autodiff::AdamConfig;
use eqshape_core::backbones::Activation;
use eqshape_core::data::{ArticulatedChainSpec, ChainDatasetConfig, SplitConfig};
use eqshape_core::eval::IouConfig;
use eqshape_core::models::{ImplicitConfig, MeshAeConfig, SaldConfig, TrainConfig};
use eqshape_core::Vec3;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub implicit: ImplicitSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub verify: VerifySection,
    pub interp: InterpSection,
    pub bench: BenchSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSection::default(),
            model: ModelSection::default(),
            implicit: ImplicitSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            verify: VerifySection::default(),
            interp: InterpSection::default(),
            bench: BenchSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub count: usize,
    pub segments: usize,
    pub ring_size: usize,
    pub rings_per_segment: usize,
    pub segment_length: f64,
    pub radius: f64,
    pub aspect: f64,
    pub taper: f64,
    pub bulge: f64,
    pub soft_weights: bool,
    pub max_bend: f64,
    pub max_twist: f64,
    /// Surface samples per noisy point cloud.
    pub cloud_points: usize,
    pub cloud_noise: f64,
    pub outlier_fraction: f64,
    pub test_fraction: f64,
    pub pose_band: [f64; 2],
}

impl Default for DataSection {
    fn default() -> Self {
        let chain = ArticulatedChainSpec::default();
        let ds = ChainDatasetConfig::default();
        let split = SplitConfig::default();
        Self {
            count: ds.count,
            segments: chain.segments,
            ring_size: chain.ring_size,
            rings_per_segment: chain.rings_per_segment,
            segment_length: chain.segment_length,
            radius: chain.radius,
            aspect: chain.aspect,
            taper: chain.taper,
            bulge: chain.bulge,
            soft_weights: chain.soft_weights,
            max_bend: ds.max_bend,
            max_twist: ds.max_twist,
            cloud_points: 512,
            cloud_noise: 0.01,
            outlier_fraction: 0.02,
            test_fraction: split.test_fraction,
            pose_band: [split.pose_band.0, split.pose_band.1],
        }
    }
}

impl DataSection {
    pub fn chain(&self) -> ArticulatedChainSpec {
        ArticulatedChainSpec {
            segments: self.segments,
            ring_size: self.ring_size,
            rings_per_segment: self.rings_per_segment,
            segment_length: self.segment_length,
            radius: self.radius,
            aspect: self.aspect,
            taper: self.taper,
            bulge: self.bulge,
            joint_angles: vec![Vec3::ZERO; self.segments.saturating_sub(1)],
            soft_weights: self.soft_weights,
        }
    }

    pub fn dataset(&self) -> ChainDatasetConfig {
        ChainDatasetConfig {
            count: self.count,
            template: self.chain(),
            max_bend: self.max_bend,
            max_twist: self.max_twist,
        }
    }

    pub fn splits(&self) -> SplitConfig {
        SplitConfig {
            test_fraction: self.test_fraction,
            pose_band: (self.pose_band[0], self.pose_band[1]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    GlobalMesh,
    Piecewise,
    Implicit,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::GlobalMesh => "global-mesh",
            ModelKind::Piecewise => "piecewise",
            ModelKind::Implicit => "implicit",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "global-mesh" => ModelKind::GlobalMesh,
            "piecewise" => ModelKind::Piecewise,
            "implicit" => ModelKind::Implicit,
            _ => bail!("unknown model kind {s:?} (expected global-mesh, piecewise or implicit)"),
        })
    }
}

pub fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Relu => "relu",
        Activation::Elu => "elu",
        Activation::Tanh => "tanh",
        Activation::Identity => "identity",
    }
}

pub fn parse_activation(s: &str) -> Result<Activation> {
    Ok(match s {
        "relu" => Activation::Relu,
        "elu" => Activation::Elu,
        "tanh" => Activation::Tanh,
        "identity" => Activation::Identity,
        _ => bail!("unknown activation {s:?}"),
    })
}

/// Mesh autoencoders (global and piecewise).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    /// `false` trains the plain backbone, the non-equivariant baseline.
    pub fa: bool,
    pub m: usize,
    pub d: usize,
    pub hidden: usize,
    pub enc_rounds: usize,
    pub dec_rounds: usize,
    pub activation: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: ModelKind::Piecewise,
            fa: true,
            m: 8,
            d: 8,
            hidden: 32,
            enc_rounds: 2,
            dec_rounds: 2,
            activation: "elu".into(),
        }
    }
}

impl ModelSection {
    pub fn mesh(&self) -> Result<MeshAeConfig> {
        let cfg = MeshAeConfig {
            m: self.m,
            d: self.d,
            hidden: self.hidden,
            enc_rounds: self.enc_rounds,
            dec_rounds: self.dec_rounds,
            activation: parse_activation(&self.activation)?,
            fa: self.fa,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImplicitSection {
    pub m: usize,
    pub d: usize,
    pub encoder_hidden: usize,
    pub encoder_blocks: usize,
    pub decoder_hidden: usize,
    pub decoder_layers: usize,
    /// Hidden layer that receives the input again; 0 disables the skip.
    pub decoder_skip: usize,
    pub activation: String,
    pub noisy_invariants: bool,
    pub init_radius: f64,
    pub vae_weight: f64,
    pub sald_samples: usize,
    /// Finite-difference step as a fraction of the domain diagonal.
    pub fd_step_fraction: f64,
    pub sigma_fraction: f64,
    /// Each side of the data bounding box grows by this fraction.
    pub domain_margin: f64,
}

impl Default for ImplicitSection {
    fn default() -> Self {
        let d = ImplicitConfig::for_domain((Vec3::ZERO, Vec3::new(1.0, 1.0, 1.0)));
        Self {
            m: d.m,
            d: d.d,
            encoder_hidden: d.encoder_hidden,
            encoder_blocks: d.encoder_blocks,
            decoder_hidden: d.decoder_hidden,
            decoder_layers: d.decoder_layers,
            decoder_skip: d.decoder_skip.unwrap_or(0),
            activation: activation_name(d.activation).into(),
            noisy_invariants: d.noisy_invariants,
            init_radius: d.init_radius,
            vae_weight: d.vae_weight,
            sald_samples: d.sald.samples,
            fd_step_fraction: 1e-4,
            sigma_fraction: d.sald.sigma_frac,
            domain_margin: 0.1,
        }
    }
}

impl ImplicitSection {
    pub fn implicit(&self, fa: bool, domain: (Vec3, Vec3)) -> Result<ImplicitConfig> {
        let mut sald = SaldConfig::for_domain(domain);
        sald.samples = self.sald_samples;
        sald.fd_step = self.fd_step_fraction * sald.diagonal();
        sald.sigma_frac = self.sigma_fraction;
        let cfg = ImplicitConfig {
            fa,
            m: self.m,
            d: self.d,
            encoder_hidden: self.encoder_hidden,
            encoder_blocks: self.encoder_blocks,
            decoder_hidden: self.decoder_hidden,
            decoder_layers: self.decoder_layers,
            decoder_skip: (self.decoder_skip > 0).then_some(self.decoder_skip),
            activation: parse_activation(&self.activation)?,
            noisy_invariants: self.noisy_invariants,
            init_radius: self.init_radius,
            vae_weight: self.vae_weight,
            sald,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self {
            epochs: 200,
            batch_size: 16,
            lr: 1e-3,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }
    }
}

impl TrainSection {
    pub fn train(&self, seed: u64) -> Result<TrainConfig> {
        if self.batch_size == 0 || !(self.lr > 0.0) {
            bail!("train.batch_size and train.lr must be positive");
        }
        Ok(TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
            },
            seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Cells per axis of the zero-crossing grid.
    pub grid_res: usize,
    /// Implicit models: number of test shapes reconstructed.
    pub shapes: usize,
    /// Surface samples of the reference mesh for Chamfer.
    pub surface_samples: usize,
    pub iou_bbox_samples: usize,
    pub iou_near_samples: usize,
    pub iou_sigma: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let iou = IouConfig::desk((Vec3::ZERO, Vec3::new(1.0, 1.0, 1.0)));
        Self {
            grid_res: 32,
            shapes: 8,
            surface_samples: 2000,
            iou_bbox_samples: iou.bbox_samples,
            iou_near_samples: iou.near_samples,
            iou_sigma: iou.sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub trials: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self { trials: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpSection {
    pub steps: usize,
}

impl Default for InterpSection {
    fn default() -> Self {
        Self { steps: 11 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub runs: usize,
    pub batches: Vec<usize>,
    pub parts: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            runs: 20,
            batches: vec![1, 4, 16],
            parts: 3,
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).context("invalid config")?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// A commented template with every key at its default value.
pub fn default_config_text() -> String {
    DEFAULT_CONFIG.to_string()
}

const DEFAULT_CONFIG: &str = r#"# Run configuration. Every key is optional.
seed = 0

[data]
count = 256
segments = 3
ring_size = 8
rings_per_segment = 8
segment_length = 1.0
radius = 0.25
aspect = 0.6
taper = 0.3
bulge = 0.4
soft_weights = false
max_bend = 1.0
max_twist = 0.5
cloud_points = 512
cloud_noise = 0.01        # Gaussian noise std on cloud points
outlier_fraction = 0.02
test_fraction = 0.3       # 70/30 split
pose_band = [0.3, 0.6]    # held-out first-joint bends for unseen-pose

[model]
kind = "piecewise"        # global-mesh | piecewise | implicit
fa = true
m = 8
d = 8
hidden = 32
enc_rounds = 2
dec_rounds = 2
activation = "elu"

[implicit]
m = 0
d = 8                     # published runs use 85
encoder_hidden = 64
encoder_blocks = 2
decoder_hidden = 64       # published runs use 512
decoder_layers = 4        # published runs use 8
decoder_skip = 2          # 0 disables
activation = "relu"
noisy_invariants = false
init_radius = 0.5
vae_weight = 0.001
sald_samples = 512
fd_step_fraction = 0.0001
sigma_fraction = 0.05
domain_margin = 0.1

[train]
epochs = 200
batch_size = 16           # published: 16 for meshes, 64 for point clouds
lr = 0.001                # published: 0.0001
beta1 = 0.9
beta2 = 0.999
eps = 1e-8

[eval]
grid_res = 32
shapes = 8
surface_samples = 2000
iou_bbox_samples = 10000  # published: 100000
iou_near_samples = 20000  # published: 200000
iou_sigma = 0.01

[verify]
trials = 50

[interp]
steps = 11

[bench]
runs = 20
batches = [1, 4, 16]
parts = 3
"#;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_matches_defaults() {
        assert_eq!(Config::parse(DEFAULT_CONFIG).unwrap(), Config::default());
        assert_eq!(Config::parse("").unwrap(), Config::default());
    }

    #[test]
    fn serialized_config_round_trips() {
        let mut c = Config::default();
        c.model.kind = ModelKind::Implicit;
        c.data.pose_band = [0.1, 0.2];
        assert_eq!(Config::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Config::parse("[train]\nlearning_rate = 1.0\n").is_err());
        assert!(Config::parse("[model]\nkind = \"nope\"\n").is_err());
    }

    #[test]
    fn invalid_values_surface_on_use() {
        let c = Config::parse("[model]\nd = 2\n").unwrap();
        assert!(c.model.mesh().is_err());
        let c = Config::parse("[train]\nlr = 0.0\n").unwrap();
        assert!(c.train.train(0).is_err());
    }
}
