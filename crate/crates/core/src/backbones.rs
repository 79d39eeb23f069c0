//! Plain (non-equivariant) networks that frame averaging wraps.
//!
//! All three take a stack of `G` inputs at once so that the eight frame
//! elements, and several parts or samples, share one set of matrix
//! products. Parameters live in a [`Params`] under a name prefix.

// Only needed when std is absent from the build graph.
#[allow(unused_imports)]
use num_traits::Float;
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use crate::autodiff::Adjacency;
use crate::autodiff::{glorot_uniform, Bound, Params, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Elu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Elu => tape.elu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => x,
        }
    }

    /// Scalar version, for reference evaluations.
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp() - 1.0
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }
}

fn init_linear(rng: &mut impl Rng, params: &mut Params, name: &str, fan_in: usize, fan_out: usize) {
    params.insert(format!("{name}.w"), glorot_uniform(rng, fan_in, fan_out));
    params.insert(format!("{name}.b"), Tensor::zeros(alloc::vec![1, fan_out]));
}

/// One input block of an affine layer. Blocks occupy consecutive row ranges
/// of the weight matrix, in order.
#[derive(Clone, Copy)]
enum Input {
    Rows(Var),
    /// Row `i` of the logical input uses row `i / block` of this matrix.
    Shared(Var, usize),
}

fn affine(tape: &mut Tape, p: &Bound, name: &str, inputs: &[Input]) -> Result<Var> {
    let w = p.var(&format!("{name}.w"))?;
    let b = p.var(&format!("{name}.b"))?;
    let fan_in = tape.dims(w).0;
    let mut offset = 0;
    let mut acc: Option<Var> = None;
    for inp in inputs {
        let (v, shared) = match *inp {
            Input::Rows(v) => (v, None),
            Input::Shared(v, block) => (v, Some(block)),
        };
        let width = tape.dims(v).1;
        if width == 0 {
            continue;
        }
        let ws = if offset == 0 && width == fan_in {
            w
        } else {
            tape.slice_rows(w, offset, width)?
        };
        offset += width;
        let mut y = tape.matmul(v, ws)?;
        if let Some(block) = shared {
            y = tape.repeat_rows(y, block);
        }
        acc = Some(match acc {
            None => y,
            Some(a) => tape.add(a, y)?,
        });
    }
    let consumed: usize = inputs
        .iter()
        .map(|i| match *i {
            Input::Rows(v) | Input::Shared(v, _) => tape.dims(v).1,
        })
        .sum();
    if consumed != fan_in {
        return Err(Error::shape(
            "affine",
            format!("layer `{name}` expects {fan_in} inputs, got {consumed}"),
        ));
    }
    let acc = acc.ok_or_else(|| Error::shape("affine", format!("layer `{name}` has no inputs")))?;
    tape.add_row(acc, b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpConfig {
    /// Input width, hidden widths, output width.
    pub widths: Vec<usize>,
    pub activation: Activation,
    /// Layer whose input is `[h, x]` instead of `h`.
    pub skip: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    cfg: MlpConfig,
    prefix: String,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, cfg: MlpConfig) -> Result<Self> {
        if cfg.widths.len() < 2 || cfg.widths.contains(&0) {
            return Err(Error::Config(format!(
                "mlp needs at least one layer of positive widths, got {:?}",
                cfg.widths
            )));
        }
        if let Some(s) = cfg.skip {
            if s == 0 || s >= cfg.widths.len() - 1 {
                return Err(Error::Config(format!("skip layer {s} out of range")));
            }
        }
        Ok(Self {
            cfg,
            prefix: prefix.into(),
        })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.cfg
    }

    pub fn in_dim(&self) -> usize {
        self.cfg.widths[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.cfg.widths.last().unwrap()
    }

    fn layers(&self) -> usize {
        self.cfg.widths.len() - 1
    }

    fn fan_in(&self, l: usize) -> usize {
        self.cfg.widths[l] + if self.cfg.skip == Some(l) { self.cfg.widths[0] } else { 0 }
    }

    fn layer_name(&self, l: usize) -> String {
        format!("{}.l{l}", self.prefix)
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(&self, rng: &mut impl Rng, params: &mut Params) {
        for l in 0..self.layers() {
            init_linear(rng, params, &self.layer_name(l), self.fan_in(l), self.cfg.widths[l + 1]);
        }
    }

    /// Initialization for a ReLU network that makes the output approximate
    /// `c‖x‖ − radius` in the last `coords` inputs, ignoring the others.
    pub fn init_geometric(&self, rng: &mut impl Rng, params: &mut Params, radius: f64, coords: usize) {
        let n_in = self.cfg.widths[0];
        let leading = n_in.saturating_sub(coords);
        let last = self.layers() - 1;
        for l in 0..self.layers() {
            let (fi, fo) = (self.fan_in(l), self.cfg.widths[l + 1]);
            let mut w = Tensor::zeros(alloc::vec![fi, fo]);
            let mut b = Tensor::zeros(alloc::vec![1, fo]);
            if l == last {
                let mean = core::f64::consts::PI.sqrt() / (fi as f64).sqrt();
                let d = Normal::new(mean, 1e-5).expect("finite");
                w.data_mut().iter_mut().for_each(|x| *x = d.sample(rng));
                b.data_mut()[0] = -radius;
            } else {
                let mut std = (2.0 / fo as f64).sqrt();
                if self.cfg.skip == Some(l) {
                    std /= core::f64::consts::SQRT_2;
                }
                let d = Normal::new(0.0, std).expect("finite");
                // Rows fed by the network input: the first `n_in` rows at
                // layer 0, the trailing `n_in` rows at the skip layer.
                let input_rows = if l == 0 {
                    Some(0)
                } else if self.cfg.skip == Some(l) {
                    Some(fi - n_in)
                } else {
                    None
                };
                for r in 0..fi {
                    let latent = input_rows.is_some_and(|s| r >= s && r < s + leading);
                    for c in 0..fo {
                        w.data_mut()[r * fo + c] = if latent { 0.0 } else { d.sample(rng) };
                    }
                }
            }
            let name = self.layer_name(l);
            params.insert(format!("{name}.w"), w);
            params.insert(format!("{name}.b"), b);
        }
    }

    /// Applies the network to each row of `x`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        self.run(tape, p, &[Input::Rows(x)])
    }

    /// Applies the network to rows `[shared[i / block], x[i]]` without
    /// materializing the repeated shared part.
    pub fn forward_blocked(&self, tape: &mut Tape, p: &Bound, shared: Var, x: Var, block: usize) -> Result<Var> {
        let (g, _) = tape.dims(shared);
        if g * block != tape.dims(x).0 {
            return Err(Error::shape(
                "mlp forward_blocked",
                format!("{g} shared rows × {block} ≠ {} rows", tape.dims(x).0),
            ));
        }
        self.run(tape, p, &[Input::Shared(shared, block), Input::Rows(x)])
    }

    fn run(&self, tape: &mut Tape, p: &Bound, input: &[Input]) -> Result<Var> {
        let mut h = affine(tape, p, &self.layer_name(0), input)?;
        for l in 1..self.layers() {
            h = self.cfg.activation.apply(tape, h);
            let mut parts = alloc::vec![Input::Rows(h)];
            if self.cfg.skip == Some(l) {
                parts.extend_from_slice(input);
            }
            h = affine(tape, p, &self.layer_name(l), &parts)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PointNetConfig {
    /// Per-point width; must be even.
    pub hidden: usize,
    /// Number of `[FC(h, h/2), max-pool]` blocks.
    pub blocks: usize,
    pub out: usize,
}

/// Set encoder: per-point layers interleaved with max-pooled context, then
/// a global max-pool and a linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct PointNet {
    cfg: PointNetConfig,
    prefix: String,
}

impl PointNet {
    pub fn new(prefix: impl Into<String>, cfg: PointNetConfig) -> Result<Self> {
        if cfg.hidden < 2 || cfg.hidden % 2 != 0 || cfg.out == 0 {
            return Err(Error::Config(format!(
                "pointnet hidden width must be even and ≥ 2, out > 0 (got {cfg:?})"
            )));
        }
        Ok(Self {
            cfg,
            prefix: prefix.into(),
        })
    }

    pub fn config(&self) -> &PointNetConfig {
        &self.cfg
    }

    pub fn init(&self, rng: &mut impl Rng, params: &mut Params) {
        let h = self.cfg.hidden;
        init_linear(rng, params, &format!("{}.in", self.prefix), 3, h);
        for i in 0..self.cfg.blocks {
            init_linear(rng, params, &format!("{}.b{i}", self.prefix), h, h / 2);
        }
        init_linear(rng, params, &format!("{}.head", self.prefix), h, self.cfg.out);
    }

    /// `x` stacks `G` clouds of `n` points each: `(G·n)×3 → G×out`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(Error::EmptyCloud);
        }
        let pre = affine(tape, p, &format!("{}.in", self.prefix), &[Input::Rows(x)])?;
        let mut h = tape.relu(pre);
        for i in 0..self.cfg.blocks {
            let pre = affine(tape, p, &format!("{}.b{i}", self.prefix), &[Input::Rows(h)])?;
            let y = tape.relu(pre);
            let pooled = tape.segment_max(y, n)?;
            let ctx = tape.repeat_rows(pooled, n);
            h = tape.concat_cols(&[y, ctx])?;
        }
        let pooled = tape.segment_max(h, n)?;
        affine(tape, p, &format!("{}.head", self.prefix), &[Input::Rows(pooled)])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshInput {
    /// Per-vertex coordinates, `(G·n)×3`.
    Vertices,
    /// One code per graph, `G×width`, lifted linearly to `n×hidden`.
    Latent { width: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshHead {
    /// Linear map per vertex.
    PerVertex { out: usize },
    /// Mean over vertices, then linear.
    Pooled { out: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MeshNetConfig {
    pub rounds: usize,
    pub hidden: usize,
    pub input: MeshInput,
    pub head: MeshHead,
    pub activation: Activation,
}

/// Mean-aggregation message passing on a fixed template graph:
/// `h' = σ(h W_self + mean_nbr(h) W_nbr + b)`.
#[derive(Debug, Clone)]
pub struct MeshNet {
    cfg: MeshNetConfig,
    adj: Arc<Adjacency>,
    prefix: String,
}

impl MeshNet {
    pub fn new(prefix: impl Into<String>, cfg: MeshNetConfig, adj: Arc<Adjacency>) -> Result<Self> {
        if cfg.hidden == 0 || adj.is_empty() {
            return Err(Error::Config("meshnet needs hidden > 0 and a nonempty graph".into()));
        }
        if let MeshInput::Latent { width: 0 } = cfg.input {
            return Err(Error::Config("meshnet latent width must be > 0".into()));
        }
        Ok(Self {
            cfg,
            adj,
            prefix: prefix.into(),
        })
    }

    pub fn config(&self) -> &MeshNetConfig {
        &self.cfg
    }

    pub fn adjacency(&self) -> &Arc<Adjacency> {
        &self.adj
    }

    pub fn vertices(&self) -> usize {
        self.adj.len()
    }

    fn in_width(&self) -> usize {
        match self.cfg.input {
            MeshInput::Vertices => 3,
            MeshInput::Latent { .. } => self.cfg.hidden,
        }
    }

    pub fn init(&self, rng: &mut impl Rng, params: &mut Params) {
        let h = self.cfg.hidden;
        let n = self.vertices();
        if let MeshInput::Latent { width } = self.cfg.input {
            init_linear(rng, params, &format!("{}.lift", self.prefix), width, n * h);
        }
        let mut width = self.in_width();
        for r in 0..self.cfg.rounds {
            let name = format!("{}.r{r}", self.prefix);
            params.insert(format!("{name}.ws"), glorot_uniform(rng, width, h));
            params.insert(format!("{name}.wn"), glorot_uniform(rng, width, h));
            params.insert(format!("{name}.b"), Tensor::zeros(alloc::vec![1, h]));
            width = h;
        }
        let out = match self.cfg.head {
            MeshHead::PerVertex { out } | MeshHead::Pooled { out } => out,
        };
        init_linear(rng, params, &format!("{}.head", self.prefix), width, out);
    }

    /// Returns `(G·n)×out` for a per-vertex head, `G×out` for a pooled head.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let n = self.vertices();
        let mut h = match self.cfg.input {
            MeshInput::Vertices => {
                let (r, c) = tape.dims(x);
                if c != 3 || r % n != 0 {
                    return Err(Error::shape("meshnet", format!("{r}x{c} is not a stack of {n}x3 meshes")));
                }
                x
            }
            MeshInput::Latent { .. } => {
                let g = tape.dims(x).0;
                let lifted = affine(tape, p, &format!("{}.lift", self.prefix), &[Input::Rows(x)])?;
                tape.reshape(lifted, g * n, self.cfg.hidden)?
            }
        };
        for r in 0..self.cfg.rounds {
            let name = format!("{}.r{r}", self.prefix);
            let ws = p.var(&format!("{name}.ws"))?;
            let wn = p.var(&format!("{name}.wn"))?;
            let b = p.var(&format!("{name}.b"))?;
            let own = tape.matmul(h, ws)?;
            let nb = tape.graph_mean(h, &self.adj)?;
            let nb = tape.matmul(nb, wn)?;
            let s = tape.add(own, nb)?;
            let s = tape.add_row(s, b)?;
            h = self.cfg.activation.apply(tape, s);
        }
        let head = format!("{}.head", self.prefix);
        match self.cfg.head {
            MeshHead::PerVertex { .. } => affine(tape, p, &head, &[Input::Rows(h)]),
            MeshHead::Pooled { .. } => {
                let pooled = tape.segment_mean(h, n)?;
                affine(tape, p, &head, &[Input::Rows(pooled)])
            }
        }
    }
}
