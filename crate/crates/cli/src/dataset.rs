//! Datasets on disk.
//!
//! ```text
//! config.toml          configuration the dataset was generated with
//! manifest.txt         one line per shape: paths, pose, split membership
//! weights.txt          skinning weights of the template
//! meshes/shape_NNN.obj
//! clouds/shape_NNN.xyz noisy surface samples
//! splits/<kind>.txt    "train i" and "test i r00 .. r22 t0 t1 t2" lines
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use eqshape_core::data::{
    corrupt_cloud, gen_chain_dataset, make_splits, sample_surface, DatasetSplit, Mesh, PartWeights, SplitKind,
};
use eqshape_core::group::act_points;
use eqshape_core::{EuclideanMotion, Mat3, Vec3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::formats::{self, read_obj, read_text, read_weights, read_xyz, write_obj, write_text, write_weights, write_xyz};

pub const SPLIT_KINDS: [SplitKind; 4] = [SplitKind::I, SplitKind::Z, SplitKind::SO3, SplitKind::UnseenPose];

/// RNG stream for point-cloud sampling, separate from shape generation.
const CLOUD_STREAM: u64 = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: Config,
    pub faces: Vec<[usize; 3]>,
    pub weights: PartWeights,
    pub shapes: Vec<Vec<Vec3>>,
    pub clouds: Vec<Vec<Vec3>>,
    pub poses: Vec<f64>,
    pub splits: Vec<DatasetSplit>,
}

impl Dataset {
    pub fn generate(config: &Config) -> Result<Self> {
        let chains = gen_chain_dataset(&config.data.dataset(), &mut ChaCha8Rng::seed_from_u64(config.seed))?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(CLOUD_STREAM);
        let mut clouds = Vec::with_capacity(chains.shapes.len());
        for x in &chains.shapes {
            let mesh = Mesh {
                vertices: x.clone(),
                faces: chains.faces.clone(),
            };
            let p = sample_surface(&mesh, config.data.cloud_points, &mut rng)?;
            clouds.push(corrupt_cloud(&p, config.data.cloud_noise, config.data.outlier_fraction, &mut rng));
        }
        let splits = SPLIT_KINDS
            .iter()
            .map(|&k| make_splits(&chains.poses, k, config.seed, &config.data.splits()))
            .collect::<eqshape_core::Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            faces: chains.faces,
            weights: chains.weights,
            shapes: chains.shapes,
            clouds,
            poses: chains.poses,
            splits,
        })
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }

    pub fn split(&self, kind: SplitKind) -> &DatasetSplit {
        self.splits.iter().find(|s| s.kind == kind).expect("all split kinds are present")
    }

    pub fn mesh(&self, i: usize) -> Mesh {
        Mesh {
            vertices: self.shapes[i].clone(),
            faces: self.faces.clone(),
        }
    }

    /// Shapes (or clouds) of a split's training part.
    pub fn train_items(&self, items: &[Vec<Vec3>], kind: SplitKind) -> Vec<Vec<Vec3>> {
        self.split(kind).train.iter().map(|&i| items[i].clone()).collect()
    }

    /// Test items with the split's motions applied.
    pub fn test_items(&self, items: &[Vec<Vec3>], kind: SplitKind) -> Vec<Vec<Vec3>> {
        let s = self.split(kind);
        s.test.iter().zip(&s.test_motions).map(|(&i, g)| act_points(g, &items[i])).collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let width = digits(self.len());
        let mut manifest = String::from("# index mesh cloud pose");
        for k in SPLIT_KINDS {
            let _ = write!(manifest, " {}", k.name());
        }
        manifest.push('\n');
        for i in 0..self.len() {
            let (mesh, cloud) = item_paths(i, width);
            write_obj(&dir.join(&mesh), &self.mesh(i))?;
            write_xyz(&dir.join(&cloud), &self.clouds[i])?;
            let _ = write!(manifest, "{i} {mesh} {cloud} {}", self.poses[i]);
            for s in &self.splits {
                let role = if s.test.binary_search(&i).is_ok() { "test" } else { "train" };
                let _ = write!(manifest, " {role}");
            }
            manifest.push('\n');
        }
        write_text(&dir.join("manifest.txt"), &manifest)?;
        write_weights(&dir.join("weights.txt"), &self.weights)?;
        for s in &self.splits {
            write_text(&dir.join("splits").join(format!("{}.txt", s.kind.name())), &format_split(s))?;
        }
        write_text(&dir.join("config.toml"), &self.config.to_toml())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config = Config::load(&dir.join("config.toml"))?;
        let weights = read_weights(&dir.join("weights.txt"))?;
        let manifest_path = dir.join("manifest.txt");
        let manifest = read_text(&manifest_path)?;
        let (mut shapes, mut clouds, mut poses) = (Vec::new(), Vec::new(), Vec::new());
        let mut faces = None;
        for (line, l) in manifest.lines().enumerate() {
            let l = l.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            let bad = || anyhow!("{}: line {}: malformed entry", manifest_path.display(), line + 1);
            let toks: Vec<&str> = l.split_whitespace().collect();
            if toks.len() < 4 || toks[0].parse::<usize>().ok() != Some(shapes.len()) {
                return Err(bad());
            }
            let mesh = read_obj(&dir.join(toks[1]))?;
            match &faces {
                None => faces = Some(mesh.faces),
                Some(f) if *f != mesh.faces => bail!("{}: topology differs from the first shape", toks[1]),
                Some(_) => {}
            }
            shapes.push(mesh.vertices);
            clouds.push(read_xyz(&dir.join(toks[2]))?);
            poses.push(toks[3].parse::<f64>().map_err(|_| bad())?);
        }
        let faces = faces.ok_or_else(|| anyhow!("{}: no shapes", manifest_path.display()))?;
        if weights.n() != shapes[0].len() {
            bail!("weights.txt has {} rows for {} vertices", weights.n(), shapes[0].len());
        }
        let splits = SPLIT_KINDS
            .iter()
            .map(|&k| {
                let path = dir.join("splits").join(format!("{}.txt", k.name()));
                parse_split(&read_text(&path)?, k, config.seed, shapes.len())
                    .with_context(|| format!("parsing {}", path.display()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            faces,
            weights,
            shapes,
            clouds,
            poses,
            splits,
        })
    }
}

fn digits(n: usize) -> usize {
    n.saturating_sub(1).to_string().len().max(3)
}

fn item_paths(i: usize, width: usize) -> (String, String) {
    (format!("meshes/shape_{i:0width$}.obj"), format!("clouds/shape_{i:0width$}.xyz"))
}

fn format_split(s: &DatasetSplit) -> String {
    let mut out = format!("# {} split: train <index> | test <index> <rotation, row-major> <translation>\n", s.kind.name());
    for i in &s.train {
        let _ = writeln!(out, "train {i}");
    }
    for (i, g) in s.test.iter().zip(&s.test_motions) {
        let _ = write!(out, "test {i}");
        for row in g.rot.m {
            for v in row {
                let _ = write!(out, " {v}");
            }
        }
        let _ = writeln!(out, " {} {} {}", g.trans.x, g.trans.y, g.trans.z);
    }
    out
}

fn parse_split(text: &str, kind: SplitKind, seed: u64, n: usize) -> Result<DatasetSplit> {
    let (mut train, mut test, mut test_motions) = (Vec::new(), Vec::new(), Vec::new());
    for (line, l) in text.lines().enumerate() {
        let l = l.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let err = |m: &str| formats::ParseError {
            line: line + 1,
            message: m.into(),
        };
        let toks: Vec<&str> = l.split_whitespace().collect();
        let idx: usize = toks
            .get(1)
            .and_then(|t| t.parse().ok())
            .filter(|&i| i < n)
            .ok_or_else(|| err("expected a shape index"))?;
        match (toks[0], toks.len()) {
            ("train", 2) => train.push(idx),
            ("test", 14) => {
                let v = toks[2..]
                    .iter()
                    .map(|t| t.parse::<f64>())
                    .collect::<Result<Vec<f64>, _>>()
                    .map_err(|_| err("bad number"))?;
                let rot = Mat3::from_rows([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]]);
                test.push(idx);
                test_motions.push(EuclideanMotion::new(rot, Vec3::new(v[9], v[10], v[11])));
            }
            _ => return Err(err("expected \"train i\" or \"test i\" with 12 numbers").into()),
        }
    }
    Ok(DatasetSplit {
        kind,
        seed,
        train,
        test,
        test_motions,
    })
}

pub fn mesh_path(dir: &Path, i: usize, count: usize) -> PathBuf {
    dir.join(item_paths(i, digits(count)).0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Config {
        let mut c = Config::default();
        c.data.count = 6;
        c.data.ring_size = 4;
        c.data.rings_per_segment = 2;
        c.data.cloud_points = 20;
        c.seed = 3;
        c
    }

    #[test]
    fn write_then_load_is_exact() {
        let d = Dataset::generate(&tiny()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.write(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), d);
    }

    #[test]
    fn split_files_reject_garbage() {
        assert!(parse_split("train 99\n", SplitKind::I, 0, 5).is_err());
        assert!(parse_split("test 1 0 0\n", SplitKind::I, 0, 5).is_err());
        assert!(parse_split("# c\ntrain 1\n", SplitKind::I, 0, 5).is_ok());
    }
}
