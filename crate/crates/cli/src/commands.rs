//! The six verbs. Each returns `Ok(Status)` or an error; `main` maps errors to
//! exit code 2 and `Status::Failed` to 1.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, ensure, Context, Result};
use eqshape_core::data::{bounding_box, gen_chain, inflate_box, random_motion, sample_surface, Mesh, SplitKind};
use eqshape_core::eval::{chamfer, mse, zero_crossings_from_values, GridSpec};
use eqshape_core::group::act_points;
use eqshape_core::latent::{interpolate, interpolate_parts};
use eqshape_core::models::{train, ImplicitVAE};
use eqshape_core::Vec3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, Model, Template};
use crate::config::{Config, ModelKind};
use crate::dataset::Dataset;
use crate::formats::{read_obj, write_obj, write_text};
use crate::verify::{report_csv, run_all, VerifyConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    /// A checked property did not hold.
    Failed,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.eqf";

pub fn gen(cfg: &Config, out: &Path) -> Result<Status> {
    cfg.data.chain().validate()?;
    let data = Dataset::generate(cfg)?;
    data.write(out)?;
    println!("wrote {} shapes to {}", data.len(), out.display());
    Ok(Status::Ok)
}

/// Which items an evaluation runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    /// The training part of the checkpoint's split, untransformed.
    Train,
    Test(SplitKind),
}

impl Selection {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "train" {
            return Ok(Selection::Train);
        }
        SplitKind::parse(s)
            .map(Selection::Test)
            .ok_or_else(|| anyhow!("unknown split {s:?} (expected train, I, z, SO3 or unseen-pose)"))
    }

    pub fn name(self) -> &'static str {
        match self {
            Selection::Train => "train",
            Selection::Test(k) => k.name(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub split: &'static str,
    pub metric: &'static str,
    pub count: usize,
    pub value: f64,
}

impl MetricRow {
    /// A split with no shapes reports NaN rather than failing the run.
    fn empty(sel: Selection, metric: &'static str) -> Self {
        Self {
            split: sel.name(),
            metric,
            count: 0,
            value: f64::NAN,
        }
    }
}

/// MSE of mesh reconstructions, or Chamfer between the zero crossings of
/// decoded implicit fields and samples of the reference surfaces.
pub fn evaluate(ck: &Checkpoint, data: &Dataset, sel: Selection) -> Result<MetricRow> {
    let split = ck.split()?;
    let pick = |items: &[Vec<Vec3>]| match sel {
        Selection::Train => data.train_items(items, split),
        Selection::Test(k) => data.test_items(items, k),
    };
    match &ck.model {
        Model::Implicit(model) => {
            let ev = &ck.meta.config.eval;
            let clouds = pick(&data.clouds);
            let shapes = pick(&data.shapes);
            let count = ev.shapes.min(clouds.len());
            if count == 0 {
                return Ok(MetricRow::empty(sel, "chamfer"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(ck.meta.config.seed);
            let mut total = 0.0;
            for (cloud, shape) in clouds.iter().zip(&shapes).take(count) {
                let reference = Mesh {
                    vertices: shape.clone(),
                    faces: data.faces.clone(),
                };
                let truth = sample_surface(&reference, ev.surface_samples, &mut rng)?;
                total += implicit_chamfer(model, cloud, &truth, ev.grid_res, ck.meta.config.implicit.domain_margin)?;
            }
            Ok(MetricRow {
                split: sel.name(),
                metric: "chamfer",
                count,
                value: total / count as f64,
            })
        }
        mesh => {
            let xs = pick(&data.shapes);
            if xs.is_empty() {
                return Ok(MetricRow::empty(sel, "mse"));
            }
            let ys = mesh.reconstruct_batch(&xs).expect("mesh model")?;
            Ok(MetricRow {
                split: sel.name(),
                metric: "mse",
                count: xs.len(),
                value: mse(&xs, &ys)?,
            })
        }
    }
}

/// Chamfer between the decoded surface of `cloud` and `truth`. The grid
/// covers the cloud's bounding box grown by `margin` per side; an empty
/// extraction scores infinity.
pub fn implicit_chamfer(model: &ImplicitVAE, cloud: &[Vec3], truth: &[Vec3], res: usize, margin: f64) -> Result<f64> {
    let points = decoded_surface(model, cloud, res, margin)?;
    if points.is_empty() {
        return Ok(f64::INFINITY);
    }
    Ok(chamfer(&points, truth)?)
}

fn decoded_surface(model: &ImplicitVAE, cloud: &[Vec3], res: usize, margin: f64) -> Result<Vec<Vec3>> {
    let bb = bounding_box(cloud).context("empty point cloud")?;
    let (lo, hi) = inflate_box(bb, margin);
    let grid = GridSpec::new(lo, hi, [res; 3])?;
    let z = model.encode(cloud)?.mu;
    let values = model.decode_many(&z, &grid.points())?;
    Ok(zero_crossings_from_values(&grid, &values)?)
}

pub struct TrainArgs<'a> {
    pub data: &'a Path,
    pub out: &'a Path,
    pub resume: Option<&'a Path>,
    pub split: SplitKind,
    pub epochs: Option<usize>,
}

pub fn train_cmd(cfg: &Config, args: &TrainArgs) -> Result<Status> {
    let data = Dataset::load(args.data)?;
    let mut ck = match args.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            ensure!(
                ck.template.faces == data.faces && ck.template.weights == data.weights,
                "checkpoint template does not match the dataset"
            );
            ck
        }
        None => {
            let domain = (cfg.model.kind == ModelKind::Implicit)
                .then(|| {
                    let clouds = data.train_items(&data.clouds, args.split);
                    bounding_box(clouds.iter().flatten()).map(|b| inflate_box(b, cfg.implicit.domain_margin))
                })
                .flatten();
            let template = Template {
                faces: data.faces.clone(),
                weights: data.weights.clone(),
                domain,
            };
            Checkpoint::new(cfg, template, args.split)?
        }
    };
    // A resumed run keeps its own configuration; only the epoch target moves.
    if let Some(e) = args.epochs {
        ck.meta.config.train.epochs = e;
    }
    let run_cfg = ck.meta.config.clone();
    let split = ck.split()?;
    let items = match ck.model.kind() {
        ModelKind::Implicit => data.train_items(&data.clouds, split),
        _ => data.train_items(&data.shapes, split),
    };
    let train_cfg = run_cfg.train.train(run_cfg.seed)?;
    let started = Instant::now();
    let total = train_cfg.epochs;
    train(ck.model.trainable_mut(), &items, &train_cfg, &mut ck.state, |e, loss| {
        if e == 0 || (e + 1) % 10 == 0 || e + 1 == total {
            eprintln!("epoch {:>4}/{total}: loss {loss:.6e} [{:.1}s]", e + 1, started.elapsed().as_secs_f64());
        }
    })?;
    let row = evaluate(&ck, &data, Selection::Train)?;
    ck.meta.train_metric = Some(row.value);
    let path = args.out.join(CHECKPOINT_FILE);
    ck.save(&path)?;
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in ck.state.history.iter().enumerate() {
        let _ = writeln!(csv, "{},{l}", e + 1);
    }
    write_text(&args.out.join("loss.csv"), &csv)?;
    println!("train_{} = {}", row.metric, row.value);
    println!("checkpoint: {}", path.display());
    Ok(Status::Ok)
}

pub fn eval_cmd(checkpoint: &Path, data: &Path, splits: &[Selection], out: &Path) -> Result<Status> {
    let ck = Checkpoint::load(checkpoint)?;
    let data = Dataset::load(data)?;
    let mut csv = String::from("split,metric,count,value\n");
    let mut rows = Vec::new();
    for &sel in splits {
        let row = evaluate(&ck, &data, sel)?;
        println!("{:<12} {} = {} ({} shapes)", row.split, row.metric, row.value, row.count);
        let _ = writeln!(csv, "{},{},{},{}", row.split, row.metric, row.count, row.value);
        rows.push(row);
    }
    let find = |k: SplitKind| rows.iter().find(|r| r.split == k.name()).map(|r| r.value);
    if let (Some(i), Some(r)) = (find(SplitKind::I), find(SplitKind::SO3)) {
        println!("SO3 / I = {}", r / i);
    }
    write_text(&out.join("metrics.csv"), &csv)?;
    Ok(Status::Ok)
}

pub fn verify_cmd(cfg: &VerifyConfig, out: &Path) -> Result<Status> {
    let reports = run_all(cfg)?;
    for r in &reports {
        println!(
            "{} {:<34} trials {:>4} skipped {:>3} max residual {:.3e} (tol {:.0e})",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.trials,
            r.skipped,
            r.max_residual,
            r.tolerance
        );
    }
    write_text(&out.join("verify.csv"), &report_csv(&reports))?;
    Ok(if reports.iter().all(|r| r.passed()) { Status::Ok } else { Status::Failed })
}

/// Parameters of `steps` evenly spaced points in `[0, 1]`.
pub fn interp_times(steps: usize) -> Vec<f64> {
    (0..steps).map(|i| i as f64 / (steps - 1) as f64).collect()
}

pub fn interp_cmd(checkpoint: &Path, a: &Path, b: &Path, steps: usize, out: &Path) -> Result<Vec<PathBuf>> {
    ensure!(steps >= 2, "steps must be ≥ 2");
    let ck = Checkpoint::load(checkpoint)?;
    let (ma, mb) = (read_obj(a)?, read_obj(b)?);
    let n = ck.template.weights.n();
    for (m, p) in [(&ma, a), (&mb, b)] {
        ensure!(m.vertices.len() == n, "{} has {} vertices, the model expects {n}", p.display(), m.vertices.len());
    }
    let decoded: Vec<Vec<Vec3>> = match &ck.model {
        Model::Global(m) => {
            let (z0, z1) = (m.encode(&ma.vertices)?, m.encode(&mb.vertices)?);
            interp_times(steps)
                .into_iter()
                .map(|t| Ok(m.decode(&interpolate(&z0, &z1, t)?)?))
                .collect::<Result<_>>()?
        }
        Model::Piecewise(m) => {
            let (z0, z1) = (m.encode(&ma.vertices)?, m.encode(&mb.vertices)?);
            interp_times(steps)
                .into_iter()
                .map(|t| Ok(m.decode(&interpolate_parts(&z0, &z1, t)?)?))
                .collect::<Result<_>>()?
        }
        Model::Implicit(_) => bail!("interp needs a mesh-model checkpoint"),
    };
    let width = (steps - 1).to_string().len().max(3);
    let mut paths = Vec::with_capacity(steps);
    for (i, v) in decoded.into_iter().enumerate() {
        let p = out.join(format!("interp_{i:0width$}.obj"));
        write_obj(
            &p,
            &Mesh {
                vertices: v,
                faces: ck.template.faces.clone(),
            },
        )?;
        paths.push(p);
    }
    println!("wrote {steps} meshes to {}", out.display());
    Ok(paths)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub variant: &'static str,
    pub batch: usize,
    pub median_ms: f64,
}

pub const BENCH_VARIANTS: [&str; 3] = ["backbone", "fa-global", "fa-piecewise"];

/// Median forward time of the plain backbone, the FA-wrapped global model
/// and the FA-wrapped piecewise model on posed chains.
pub fn bench(cfg: &Config) -> Result<Vec<BenchRow>> {
    let b = &cfg.bench;
    ensure!(b.runs >= 1 && !b.batches.is_empty() && b.batches.iter().all(|&n| n > 0), "bench needs runs and batch sizes");
    let mut spec = cfg.data.chain();
    spec.segments = b.parts;
    spec.joint_angles = vec![Vec3::ZERO; b.parts.saturating_sub(1)];
    let (mesh, weights) = gen_chain(&spec)?;
    let template = Template {
        faces: mesh.faces.clone(),
        weights,
        domain: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let max_batch = *b.batches.iter().max().expect("nonempty");
    let inputs: Vec<Vec<Vec3>> =
        (0..max_batch).map(|_| act_points(&random_motion(&mut rng, 1.0, false), &mesh.vertices)).collect();
    let mut rows = Vec::new();
    for variant in BENCH_VARIANTS {
        let mut c = cfg.clone();
        c.model.kind = if variant == "fa-piecewise" { ModelKind::Piecewise } else { ModelKind::GlobalMesh };
        c.model.fa = variant != "backbone";
        let model = Model::build(&c, &template)?;
        for &batch in &b.batches {
            let xs = &inputs[..batch];
            model.reconstruct_batch(xs).expect("mesh model")?;
            let mut times: Vec<f64> = (0..b.runs)
                .map(|_| {
                    let t = Instant::now();
                    let y = model.reconstruct_batch(xs).expect("mesh model");
                    let ms = t.elapsed().as_secs_f64() * 1e3;
                    y.map(|_| ms)
                })
                .collect::<eqshape_core::Result<_>>()?;
            times.sort_by(f64::total_cmp);
            let mid = times.len() / 2;
            let median_ms = if times.len() % 2 == 1 { times[mid] } else { 0.5 * (times[mid - 1] + times[mid]) };
            rows.push(BenchRow { variant, batch, median_ms });
        }
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("variant,batch,median_ms\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.variant, r.batch, r.median_ms);
    }
    s
}

pub fn bench_cmd(cfg: &Config, out: &Path) -> Result<Status> {
    ensure!(cfg.bench.runs >= 20, "bench needs at least 20 runs, got {}", cfg.bench.runs);
    let rows = bench(cfg)?;
    for r in &rows {
        println!(
            "{:<13} batch {:>3}: median {:>9.3} ms ({:.3} ms per shape)",
            r.variant,
            r.batch,
            r.median_ms,
            r.median_ms / r.batch as f64
        );
    }
    write_text(&out.join("bench.csv"), &bench_csv(&rows))?;
    Ok(Status::Ok)
}
