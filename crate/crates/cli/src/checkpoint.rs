//! Model checkpoints: an EQF1 tensor file plus a TOML sidecar
//! (`<file>.txt`) recording the model kind, dimensions and configuration.
//!
//! Tensor names: `param/<name>`, `adam/m/<name>`, `adam/v/<name>`,
//! `adam/step`, `train/epoch`, `train/history`, `template/faces`,
//! `template/weights` and, for implicit models, `sald/domain`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use eqshape_core::autodiff::{decode_tensors, encode_tensors, Adjacency, AdamState, Params, Tensor};
use eqshape_core::data::{PartWeights, SplitKind};
use eqshape_core::models::{GlobalMeshAE, ImplicitVAE, PiecewiseMeshAE, Trainable, TrainState};
use eqshape_core::Vec3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Config, ModelKind};
use crate::formats::{read_text, write_text};

pub enum Model {
    Global(GlobalMeshAE),
    Piecewise(PiecewiseMeshAE),
    Implicit(ImplicitVAE),
}

/// What a model needs besides its configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub faces: Vec<[usize; 3]>,
    pub weights: PartWeights,
    /// SALD sampling box; implicit models only.
    pub domain: Option<(Vec3, Vec3)>,
}

impl Model {
    /// A freshly initialized model; initialization depends only on `config.seed`.
    pub fn build(config: &Config, template: &Template) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let n = template.weights.n();
        let adj = || Adjacency::from_triangles(n, &template.faces).map(Arc::new);
        Ok(match config.model.kind {
            ModelKind::GlobalMesh => Model::Global(GlobalMeshAE::new(config.model.mesh()?, adj()?, &mut rng)?),
            ModelKind::Piecewise => Model::Piecewise(PiecewiseMeshAE::new(
                config.model.mesh()?,
                adj()?,
                template.weights.clone(),
                &mut rng,
            )?),
            ModelKind::Implicit => {
                let domain = template.domain.ok_or_else(|| anyhow!("implicit model needs a sampling domain"))?;
                Model::Implicit(ImplicitVAE::new(config.implicit.implicit(config.model.fa, domain)?, &mut rng)?)
            }
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Global(_) => ModelKind::GlobalMesh,
            Model::Piecewise(_) => ModelKind::Piecewise,
            Model::Implicit(_) => ModelKind::Implicit,
        }
    }

    pub fn trainable(&self) -> &dyn Trainable {
        match self {
            Model::Global(m) => m,
            Model::Piecewise(m) => m,
            Model::Implicit(m) => m,
        }
    }

    pub fn trainable_mut(&mut self) -> &mut dyn Trainable {
        match self {
            Model::Global(m) => m,
            Model::Piecewise(m) => m,
            Model::Implicit(m) => m,
        }
    }

    pub fn params(&self) -> &Params {
        self.trainable().params()
    }

    /// Mesh reconstructions; `None` for implicit models.
    pub fn reconstruct_batch(&self, xs: &[Vec<Vec3>]) -> Option<eqshape_core::Result<Vec<Vec<Vec3>>>> {
        match self {
            Model::Global(m) => Some(m.reconstruct_batch(xs)),
            Model::Piecewise(m) => Some(m.reconstruct_batch(xs)),
            Model::Implicit(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub kind: ModelKind,
    pub fa: bool,
    pub vertices: usize,
    pub parts: usize,
    pub m: usize,
    pub d: usize,
    pub epoch: usize,
    /// Split whose training part the model was fit on.
    pub split: String,
    /// Reconstruction metric on the training items after the last epoch:
    /// per-vertex MSE for mesh models, Chamfer for implicit ones.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub train_metric: Option<f64>,
    pub config: Config,
}

pub struct Checkpoint {
    pub model: Model,
    pub state: TrainState,
    pub template: Template,
    pub meta: Sidecar,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".txt");
    PathBuf::from(s)
}

impl Checkpoint {
    pub fn new(config: &Config, template: Template, split: SplitKind) -> Result<Self> {
        let model = Model::build(config, &template)?;
        let state = TrainState::new(model.params());
        let (m, d) = match config.model.kind {
            ModelKind::Implicit => (config.implicit.m, config.implicit.d),
            _ => (config.model.m, config.model.d),
        };
        let meta = Sidecar {
            kind: config.model.kind,
            fa: config.model.fa,
            vertices: template.weights.n(),
            parts: template.weights.k(),
            m,
            d,
            epoch: 0,
            split: split.name().into(),
            train_metric: None,
            config: config.clone(),
        };
        Ok(Self {
            model,
            state,
            template,
            meta,
        })
    }

    pub fn split(&self) -> Result<SplitKind> {
        SplitKind::parse(&self.meta.split).ok_or_else(|| anyhow!("unknown split {:?} in sidecar", self.meta.split))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let params = self.model.params();
        let mut named: Vec<(String, Tensor)> = Vec::new();
        for (name, t) in params.iter() {
            named.push((format!("param/{name}"), t.clone()));
        }
        for ((name, t), (m, v)) in params.iter().zip(self.state.adam.m.iter().zip(&self.state.adam.v)) {
            named.push((format!("adam/m/{name}"), Tensor::new(t.shape().to_vec(), m.clone()).expect("moment shape")));
            named.push((format!("adam/v/{name}"), Tensor::new(t.shape().to_vec(), v.clone()).expect("moment shape")));
        }
        named.push(("adam/step".into(), Tensor::scalar(self.state.adam.step as f64)));
        named.push(("train/epoch".into(), Tensor::scalar(self.state.epoch as f64)));
        named.push(("train/history".into(), Tensor::row(self.state.history.clone())));
        let faces: Vec<f64> = self.template.faces.iter().flatten().map(|&i| i as f64).collect();
        named.push(("template/faces".into(), Tensor::matrix(self.template.faces.len(), 3, faces).expect("faces")));
        let w = &self.template.weights;
        named.push(("template/weights".into(), Tensor::matrix(w.n(), w.k(), w.data().to_vec()).expect("weights")));
        if let Some((lo, hi)) = self.template.domain {
            let d = vec![lo.x, lo.y, lo.z, hi.x, hi.y, hi.z];
            named.push(("sald/domain".into(), Tensor::matrix(2, 3, d).expect("domain")));
        }
        encode_tensors(named.iter().map(|(n, t)| (n.as_str(), t)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        std::fs::write(path, self.to_bytes()).with_context(|| format!("writing {}", path.display()))?;
        let mut meta = self.meta.clone();
        meta.epoch = self.state.epoch;
        let text = format!(
            "# Checkpoint metadata for {}\n{}",
            path.file_name().map(|s| s.to_string_lossy()).unwrap_or_default(),
            toml::to_string(&meta).context("serializing sidecar")?
        );
        write_text(&sidecar_path(path), &text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let meta: Sidecar = toml::from_str(&read_text(&side)?).with_context(|| format!("parsing {}", side.display()))?;
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_parts(meta, &bytes).with_context(|| format!("loading {}", path.display()))
    }

    pub fn from_parts(meta: Sidecar, bytes: &[u8]) -> Result<Self> {
        let mut tensors: HashMap<String, Tensor> = decode_tensors(bytes)?.into_iter().collect();
        let mut take = |name: &str| tensors.remove(name).ok_or_else(|| anyhow!("missing tensor {name}"));
        let faces_t = take("template/faces")?;
        let weights_t = take("template/weights")?;
        if faces_t.shape().len() != 2 || faces_t.cols() != 3 || weights_t.shape().len() != 2 {
            bail!("template tensors have the wrong shape");
        }
        let faces = faces_t
            .data()
            .chunks(3)
            .map(|f| {
                let idx = |v: f64| (v >= 0.0 && v.fract() == 0.0).then_some(v as usize);
                match (idx(f[0]), idx(f[1]), idx(f[2])) {
                    (Some(a), Some(b), Some(c)) => Ok([a, b, c]),
                    _ => Err(anyhow!("face indices must be non-negative integers")),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let weights = PartWeights::new(weights_t.rows(), weights_t.cols(), weights_t.data().to_vec())?;
        let domain = match take("sald/domain") {
            Ok(d) => {
                let d = d.data();
                if d.len() != 6 {
                    bail!("sald/domain must hold 6 numbers");
                }
                Some((Vec3::new(d[0], d[1], d[2]), Vec3::new(d[3], d[4], d[5])))
            }
            Err(e) if meta.kind == ModelKind::Implicit => return Err(e),
            Err(_) => None,
        };
        let template = Template { faces, weights, domain };
        let mut cfg = meta.config.clone();
        cfg.model.kind = meta.kind;
        cfg.model.fa = meta.fa;
        let mut model = Model::build(&cfg, &template)?;

        let names: Vec<(String, Vec<usize>)> =
            model.params().iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
        let mut adam_m = Vec::with_capacity(names.len());
        let mut adam_v = Vec::with_capacity(names.len());
        for (name, shape) in &names {
            let p = take(&format!("param/{name}"))?;
            let m = take(&format!("adam/m/{name}"))?;
            let v = take(&format!("adam/v/{name}"))?;
            if p.shape() != shape.as_slice() || m.shape() != shape.as_slice() || v.shape() != shape.as_slice() {
                bail!("tensor {name} has shape {:?}, model expects {shape:?}", p.shape());
            }
            *model.trainable_mut().params_mut().get_mut(name).expect("parameter exists") = p;
            adam_m.push(m.into_data());
            adam_v.push(v.into_data());
        }
        let count = |t: Tensor, what: &str| -> Result<u64> {
            let v = t.data().first().copied().unwrap_or(f64::NAN);
            if t.len() != 1 || !(v >= 0.0) || v.fract() != 0.0 {
                bail!("{what} must be a non-negative integer");
            }
            Ok(v as u64)
        };
        let step = count(take("adam/step")?, "adam/step")?;
        let epoch = count(take("train/epoch")?, "train/epoch")? as usize;
        let history = take("train/history")?.into_data();
        if history.len() != epoch {
            bail!("loss history has {} entries for {epoch} epochs", history.len());
        }
        if let Some(extra) = tensors.keys().next() {
            bail!("unexpected tensor {extra}");
        }
        let state = TrainState {
            epoch,
            adam: AdamState {
                step,
                m: adam_m,
                v: adam_v,
            },
            history,
        };
        Ok(Self {
            model,
            state,
            template,
            meta,
        })
    }
}
