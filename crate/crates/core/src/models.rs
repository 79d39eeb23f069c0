//! Shape autoencoders, their losses, and the training loop.
//!
//! Three models share the same construction: a backbone wrapped in frame
//! averaging, with every frame element stacked into one backbone call.
//!
//! - [`GlobalMeshAE`]: mesh → latent → mesh, equivariant to one global
//!   motion. With `fa = false` the frame is `{identity}` and the model is
//!   the plain backbone (the "vanilla" baseline).
//! - [`ImplicitVAE`]: point cloud → latent → implicit function, trained
//!   with the SALD loss plus an L1 regularizer on `(μ, η + 1)`.
//! - [`PiecewiseMeshAE`]: one latent per part, each from the part's own
//!   weighted frame, decoded parts blended by the skinning weights.
//!
//! Frames are computed from plain values and enter the tape as constants.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

// Only needed when std is absent from the build graph.
#[allow(unused_imports)]
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{adam_step, AdamConfig, AdamState, Adjacency, Bound, Params, Tape, Tensor, Var};
use crate::backbones::{Activation, MeshHead, MeshInput, MeshNet, MeshNetConfig, Mlp, MlpConfig, PointNet, PointNetConfig};
use crate::error::{Error, Result};
use crate::eval::nearest;
use crate::fa::{pull_back_points, pull_back_rows, push_forward_rows};
use crate::frames::{pca_frame, pca_frame_uniform, Frame, FrameDiagnostics};
use crate::group::{FeatureMatrix, ScalarField};
use crate::linalg3::{weighted_centroid, Vec3};

pub use crate::data::PartWeights;

/// Bounds applied to a log-std before exponentiation.
pub const LOG_STD_RANGE: (f64, f64) = (-20.0, 5.0);

/// A latent code recorded on a tape: `inv` is `1×m` (absent when `m = 0`),
/// `equi` is `d×3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentVar {
    pub inv: Option<Var>,
    pub equi: Var,
}

impl LatentVar {
    pub fn constant(tape: &mut Tape, z: &FeatureMatrix) -> Self {
        Self::record(tape, z, false)
    }

    pub fn leaf(tape: &mut Tape, z: &FeatureMatrix) -> Self {
        Self::record(tape, z, true)
    }

    fn record(tape: &mut Tape, z: &FeatureMatrix, leaf: bool) -> Self {
        let mut put = |t: Tensor| if leaf { tape.leaf(t) } else { tape.constant(t) };
        let inv = (!z.inv.is_empty()).then(|| put(Tensor::row(z.inv.clone())));
        let equi = put(points_tensor(&z.equi));
        Self { inv, equi }
    }

    pub fn value(&self, tape: &Tape) -> FeatureMatrix {
        FeatureMatrix::new(
            self.inv.map(|v| tape.data(v).to_vec()).unwrap_or_default(),
            tensor_points(tape.data(self.equi)),
        )
    }
}

pub(crate) fn points_tensor(p: &[Vec3]) -> Tensor {
    Tensor::matrix(p.len(), 3, p.iter().flat_map(|q| q.to_array()).collect()).expect("n×3 from n points")
}

pub(crate) fn tensor_points(d: &[f64]) -> Vec<Vec3> {
    d.chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
}

/// Frame average of already transformed terms, summed in the same balanced
/// order as [`crate::fa::fa_apply`].
fn tape_average(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    fn sum(tape: &mut Tape, t: &[Var]) -> Result<Var> {
        match t.len() {
            0 => Err(Error::TooFewPoints { needed: 1, got: 0 }),
            1 => Ok(t[0]),
            n => {
                let a = sum(tape, &t[..n / 2])?;
                let b = sum(tape, &t[n / 2..])?;
                tape.add(a, b)
            }
        }
    }
    let s = sum(tape, terms)?;
    Ok(tape.scale(s, 1.0 / terms.len() as f64))
}

/// Row `[u, vec(ρ(g)⁻¹U)]` fed to a decoder for frame element `g`.
fn code_row(tape: &mut Tape, z: &LatentVar, g: &crate::group::EuclideanMotion) -> Result<Var> {
    let d = tape.dims(z.equi).0;
    let e = pull_back_rows(tape, z.equi, g)?;
    let e = tape.reshape(e, 1, 3 * d)?;
    match z.inv {
        Some(u) => tape.concat_cols(&[u, e]),
        None => Ok(e),
    }
}

/// Frame of the equivariant rows of a recorded code.
fn code_frame(tape: &Tape, z: &LatentVar) -> Result<Frame> {
    Ok(pca_frame_uniform(&tensor_points(tape.data(z.equi)))?.0)
}

/// Splits `G` stacked encoder rows starting at `row0` into a frame-averaged
/// code plus the averaged trailing invariant columns (`extra` wide).
fn average_codes(
    tape: &mut Tape,
    out: Var,
    row0: usize,
    frame: &Frame,
    (m, d, extra): (usize, usize, usize),
) -> Result<(LatentVar, Option<Var>)> {
    let (mut invs, mut equis, mut extras) = (Vec::new(), Vec::new(), Vec::new());
    for (i, g) in frame.motions.iter().enumerate() {
        let row = tape.slice_rows(out, row0 + i, 1)?;
        if m > 0 {
            invs.push(tape.slice_cols(row, 0, m)?);
        }
        let e = tape.slice_cols(row, m, 3 * d)?;
        let e = tape.reshape(e, d, 3)?;
        equis.push(push_forward_rows(tape, e, g)?);
        if extra > 0 {
            extras.push(tape.slice_cols(row, m + 3 * d, extra)?);
        }
    }
    let inv = if m > 0 { Some(tape_average(tape, &invs)?) } else { None };
    let equi = tape_average(tape, &equis)?;
    let extra = if extra > 0 { Some(tape_average(tape, &extras)?) } else { None };
    Ok((LatentVar { inv, equi }, extra))
}

fn check_vertices(op: &'static str, x: &[Vec3], n: usize) -> Result<()> {
    if x.len() != n {
        return Err(Error::shape(op, format!("expected {n} vertices, got {}", x.len())));
    }
    Ok(())
}

fn check_code(op: &'static str, z: &FeatureMatrix, m: usize, d: usize) -> Result<()> {
    if z.inv_dim() != m || z.equi_dim() != d {
        return Err(Error::shape(
            op,
            format!("expected ({m}, {d}) code, got ({}, {})", z.inv_dim(), z.equi_dim()),
        ));
    }
    Ok(())
}

/// `‖Y − X‖_F` on the tape.
fn frobenius_error(tape: &mut Tape, y: Var, x: &[Vec3]) -> Result<Var> {
    let xv = tape.constant(points_tensor(x));
    let diff = tape.sub(y, xv)?;
    let flat = tape.reshape(diff, 1, 3 * x.len())?;
    Ok(tape.norm_rows(flat))
}

/// Plain `‖Y − X‖_F`.
pub fn frobenius_distance(y: &[Vec3], x: &[Vec3]) -> Result<f64> {
    check_vertices("frobenius_distance", y, x.len())?;
    Ok(y.iter().zip(x).map(|(a, b)| (*a - *b).norm_sq()).sum::<f64>().sqrt())
}

// ---------------------------------------------------------------------------
// Mesh autoencoders

/// Sizes of the mesh encoder/decoder. The encoder pools per-vertex features
/// into `m + 3d` numbers; the decoder lifts a code to per-vertex features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshAeConfig {
    pub m: usize,
    pub d: usize,
    pub hidden: usize,
    pub enc_rounds: usize,
    pub dec_rounds: usize,
    pub activation: Activation,
    /// Wrap both backbones in frame averaging.
    pub fa: bool,
}

impl Default for MeshAeConfig {
    fn default() -> Self {
        Self {
            m: 8,
            d: 8,
            hidden: 64,
            enc_rounds: 3,
            dec_rounds: 3,
            activation: Activation::Elu,
            fa: true,
        }
    }
}

impl MeshAeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 3 {
            return Err(Error::Config(format!("need d ≥ 3 equivariant rows for a decoder frame, got {}", self.d)));
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        Ok(())
    }

    fn code_width(&self) -> usize {
        self.m + 3 * self.d
    }
}

/// Encoder and decoder networks shared by the global and piecewise models.
#[derive(Debug, Clone)]
struct MeshPair {
    cfg: MeshAeConfig,
    enc: MeshNet,
    dec: MeshNet,
}

impl MeshPair {
    fn new(cfg: MeshAeConfig, adj: Arc<Adjacency>, rng: &mut impl Rng, params: &mut Params) -> Result<Self> {
        cfg.validate()?;
        let enc = MeshNet::new(
            "enc",
            MeshNetConfig {
                rounds: cfg.enc_rounds,
                hidden: cfg.hidden,
                input: MeshInput::Vertices,
                head: MeshHead::Pooled { out: cfg.code_width() },
                activation: cfg.activation,
            },
            adj.clone(),
        )?;
        let dec = MeshNet::new(
            "dec",
            MeshNetConfig {
                rounds: cfg.dec_rounds,
                hidden: cfg.hidden,
                input: MeshInput::Latent { width: cfg.code_width() },
                head: MeshHead::PerVertex { out: 3 },
                activation: cfg.activation,
            },
            adj,
        )?;
        enc.init(rng, params);
        dec.init(rng, params);
        Ok(Self { cfg, enc, dec })
    }

    fn n(&self) -> usize {
        self.enc.vertices()
    }

    fn frame_of(&self, x: &[Vec3], w: Option<&[f64]>) -> Result<Frame> {
        if !self.cfg.fa {
            return Ok(Frame::trivial());
        }
        Ok(match w {
            Some(w) => pca_frame(x, w)?.0,
            None => pca_frame_uniform(x)?.0,
        })
    }

    fn decoder_frame(&self, tape: &Tape, z: &LatentVar) -> Result<Frame> {
        if self.cfg.fa {
            code_frame(tape, z)
        } else {
            Ok(Frame::trivial())
        }
    }

    /// One encoder call over every input and frame element.
    fn encode(&self, tape: &mut Tape, b: &Bound, inputs: &[(&[Vec3], &Frame)]) -> Result<Vec<LatentVar>> {
        let mut stacked = Vec::new();
        for (x, f) in inputs {
            for g in &f.motions {
                stacked.extend(pull_back_points(g, x));
            }
        }
        let xv = tape.constant(points_tensor(&stacked));
        let out = self.enc.forward(tape, b, xv)?;
        let mut row0 = 0;
        let mut codes = Vec::with_capacity(inputs.len());
        for (_, f) in inputs {
            codes.push(average_codes(tape, out, row0, f, (self.cfg.m, self.cfg.d, 0))?.0);
            row0 += f.len();
        }
        Ok(codes)
    }

    /// One decoder call over every code and frame element; `n×3` per code.
    fn decode(&self, tape: &mut Tape, b: &Bound, codes: &[(LatentVar, &Frame)]) -> Result<Vec<Var>> {
        let mut rows = Vec::new();
        for (z, f) in codes {
            for g in &f.motions {
                rows.push(code_row(tape, z, g)?);
            }
        }
        let shared = tape.concat_rows(&rows)?;
        let y = self.dec.forward(tape, b, shared)?;
        let n = self.n();
        let mut row0 = 0;
        let mut out = Vec::with_capacity(codes.len());
        for (_, f) in codes {
            let mut terms = Vec::with_capacity(f.len());
            for g in &f.motions {
                let yi = tape.slice_rows(y, row0 * n, n)?;
                terms.push(push_forward_rows(tape, yi, g)?);
                row0 += 1;
            }
            out.push(tape_average(tape, &terms)?);
        }
        Ok(out)
    }
}

/// Global Euclidean mesh autoencoder `Ψ ∘ Φ` with `Φ = ⟨φ⟩_F`, `Ψ = ⟨ψ⟩_F`.
#[derive(Debug, Clone)]
pub struct GlobalMeshAE {
    nets: MeshPair,
    pub params: Params,
}

impl GlobalMeshAE {
    pub fn new(cfg: MeshAeConfig, adj: Arc<Adjacency>, rng: &mut impl Rng) -> Result<Self> {
        let mut params = Params::new();
        let nets = MeshPair::new(cfg, adj, rng, &mut params)?;
        Ok(Self { nets, params })
    }

    pub fn config(&self) -> &MeshAeConfig {
        &self.nets.cfg
    }

    pub fn vertices(&self) -> usize {
        self.nets.n()
    }

    pub fn adjacency(&self) -> &Arc<Adjacency> {
        self.nets.enc.adjacency()
    }

    /// `pca_frame(X, 1)`, or `{identity}` without frame averaging.
    pub fn encoder_frame(&self, x: &[Vec3]) -> Result<Frame> {
        self.nets.frame_of(x, None)
    }

    pub fn encode_taped(&self, tape: &mut Tape, b: &Bound, x: &[Vec3]) -> Result<LatentVar> {
        check_vertices("encode_global", x, self.vertices())?;
        let f = self.encoder_frame(x)?;
        Ok(self.nets.encode(tape, b, &[(x, &f)])?[0])
    }

    /// Decodes with the frame of `z`'s rows, or with `frame` when given.
    pub fn decode_taped(&self, tape: &mut Tape, b: &Bound, z: LatentVar, frame: Option<&Frame>) -> Result<(Var, Frame)> {
        let f = match frame {
            Some(f) => f.clone(),
            None => self.nets.decoder_frame(tape, &z)?,
        };
        Ok((self.nets.decode(tape, b, &[(z, &f)])?[0], f))
    }

    /// `‖Ψ(Φ(X)) − X‖_F` on the tape, plus the decoder frame it used.
    pub fn recon_error_taped(
        &self,
        tape: &mut Tape,
        b: &Bound,
        x: &[Vec3],
        decoder_frame: Option<&Frame>,
    ) -> Result<(Var, Frame)> {
        let z = self.encode_taped(tape, b, x)?;
        let (y, f) = self.decode_taped(tape, b, z, decoder_frame)?;
        Ok((frobenius_error(tape, y, x)?, f))
    }

    pub fn encode(&self, x: &[Vec3]) -> Result<FeatureMatrix> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let z = self.encode_taped(&mut tape, &b, x)?;
        Ok(z.value(&tape))
    }

    pub fn decode(&self, z: &FeatureMatrix) -> Result<Vec<Vec3>> {
        let cfg = self.config();
        check_code("decode_global", z, cfg.m, cfg.d)?;
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let zv = LatentVar::constant(&mut tape, z);
        let (y, _) = self.decode_taped(&mut tape, &b, zv, None)?;
        Ok(tensor_points(tape.data(y)))
    }

    pub fn reconstruct(&self, x: &[Vec3]) -> Result<Vec<Vec3>> {
        self.decode(&self.encode(x)?)
    }

    /// Reconstructs several shapes with one encoder and one decoder call.
    pub fn reconstruct_batch(&self, xs: &[Vec<Vec3>]) -> Result<Vec<Vec<Vec3>>> {
        let mut frames = Vec::with_capacity(xs.len());
        for x in xs {
            check_vertices("encode_global", x, self.vertices())?;
            frames.push(self.encoder_frame(x)?);
        }
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let inputs: Vec<(&[Vec3], &Frame)> = xs.iter().map(|x| x.as_slice()).zip(&frames).collect();
        let zs = self.nets.encode(&mut tape, &b, &inputs)?;
        let dec_frames = zs
            .iter()
            .map(|z| self.nets.decoder_frame(&tape, z))
            .collect::<Result<Vec<_>>>()?;
        let codes: Vec<(LatentVar, &Frame)> = zs.into_iter().zip(&dec_frames).collect();
        let ys = self.nets.decode(&mut tape, &b, &codes)?;
        Ok(ys.iter().map(|&y| tensor_points(tape.data(y))).collect())
    }
}

/// Part geometry `X_j = (1 − w_j) c_jᵀ + w_j ⊙ X`, where `c_j` is the
/// `w_j`-weighted centroid: vertices outside the part collapse onto it.
pub fn part_geometry(x: &[Vec3], w: &PartWeights, j: usize) -> Result<Vec<Vec3>> {
    check_vertices("part_geometry", x, w.n())?;
    if j >= w.k() {
        return Err(Error::shape("part_geometry", format!("part {j} of {}", w.k())));
    }
    let wj = w.column(j);
    let c = weighted_centroid(x, &wj).map_err(|e| e.in_part(j))?;
    Ok(x.iter().zip(&wj).map(|(p, &a)| c * (1.0 - a) + *p * a).collect())
}

/// Piecewise Euclidean mesh autoencoder: one code per part, each part
/// encoded from its own geometry and weighted frame, decoded parts blended
/// by the weights.
#[derive(Debug, Clone)]
pub struct PiecewiseMeshAE {
    nets: MeshPair,
    weights: PartWeights,
    pub params: Params,
}

impl PiecewiseMeshAE {
    pub fn new(cfg: MeshAeConfig, adj: Arc<Adjacency>, weights: PartWeights, rng: &mut impl Rng) -> Result<Self> {
        if weights.n() != adj.len() {
            return Err(Error::shape(
                "piecewise model",
                format!("{} weight rows for {} vertices", weights.n(), adj.len()),
            ));
        }
        let mut params = Params::new();
        let nets = MeshPair::new(cfg, adj, rng, &mut params)?;
        Ok(Self { nets, weights, params })
    }

    pub fn config(&self) -> &MeshAeConfig {
        &self.nets.cfg
    }

    pub fn weights(&self) -> &PartWeights {
        &self.weights
    }

    /// Swaps in new weights for the same vertex count.
    pub fn set_weights(&mut self, weights: PartWeights) -> Result<()> {
        if weights.n() != self.vertices() {
            return Err(Error::shape("set_weights", format!("{} rows for {} vertices", weights.n(), self.vertices())));
        }
        self.weights = weights;
        Ok(())
    }

    pub fn vertices(&self) -> usize {
        self.nets.n()
    }

    pub fn adjacency(&self) -> &Arc<Adjacency> {
        self.nets.enc.adjacency()
    }

    pub fn encode_taped(&self, tape: &mut Tape, b: &Bound, x: &[Vec3]) -> Result<Vec<LatentVar>> {
        check_vertices("encode_piecewise", x, self.vertices())?;
        let k = self.weights.k();
        let mut parts = Vec::with_capacity(k);
        let mut frames = Vec::with_capacity(k);
        for j in 0..k {
            parts.push(part_geometry(x, &self.weights, j)?);
            let wj = self.weights.column(j);
            frames.push(self.nets.frame_of(x, Some(&wj)).map_err(|e| e.in_part(j))?);
        }
        let inputs: Vec<(&[Vec3], &Frame)> = parts.iter().map(|p| p.as_slice()).zip(&frames).collect();
        self.nets.encode(tape, b, &inputs)
    }

    /// Per-part decoded meshes `⟨ψ⟩_F(Z_j)`, before blending.
    pub fn decode_parts_taped(
        &self,
        tape: &mut Tape,
        b: &Bound,
        zs: &[LatentVar],
        frames: Option<&[Frame]>,
    ) -> Result<(Vec<Var>, Vec<Frame>)> {
        if zs.len() != self.weights.k() {
            return Err(Error::shape("decode_piecewise", format!("{} codes for {} parts", zs.len(), self.weights.k())));
        }
        let frames = match frames {
            Some(f) => f.to_vec(),
            None => zs
                .iter()
                .enumerate()
                .map(|(j, z)| self.nets.decoder_frame(tape, z).map_err(|e| e.in_part(j)))
                .collect::<Result<Vec<_>>>()?,
        };
        let codes: Vec<(LatentVar, &Frame)> = zs.iter().copied().zip(&frames).collect();
        Ok((self.nets.decode(tape, b, &codes)?, frames))
    }

    /// `Σ_j w_j ⊙ Y_j`.
    pub fn blend_taped(&self, tape: &mut Tape, parts: &[Var]) -> Result<Var> {
        let n = self.vertices();
        let mut acc: Option<Var> = None;
        for (j, &y) in parts.iter().enumerate() {
            let mask: Vec<f64> = self.weights.column(j).iter().flat_map(|&w| [w, w, w]).collect();
            let mv = tape.constant(Tensor::matrix(n, 3, mask)?);
            let t = tape.mul(y, mv)?;
            acc = Some(match acc {
                None => t,
                Some(a) => tape.add(a, t)?,
            });
        }
        acc.ok_or(Error::EmptyBatch)
    }

    pub fn decode_taped(&self, tape: &mut Tape, b: &Bound, zs: &[LatentVar], frames: Option<&[Frame]>) -> Result<(Var, Vec<Frame>)> {
        let (parts, f) = self.decode_parts_taped(tape, b, zs, frames)?;
        Ok((self.blend_taped(tape, &parts)?, f))
    }

    pub fn recon_error_taped(
        &self,
        tape: &mut Tape,
        b: &Bound,
        x: &[Vec3],
        decoder_frames: Option<&[Frame]>,
    ) -> Result<(Var, Vec<Frame>)> {
        let zs = self.encode_taped(tape, b, x)?;
        let (y, f) = self.decode_taped(tape, b, &zs, decoder_frames)?;
        Ok((frobenius_error(tape, y, x)?, f))
    }

    pub fn encode(&self, x: &[Vec3]) -> Result<Vec<FeatureMatrix>> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let zs = self.encode_taped(&mut tape, &b, x)?;
        Ok(zs.iter().map(|z| z.value(&tape)).collect())
    }

    fn record_codes(&self, tape: &mut Tape, zs: &[FeatureMatrix]) -> Result<Vec<LatentVar>> {
        let cfg = self.config();
        zs.iter()
            .enumerate()
            .map(|(j, z)| {
                check_code("decode_piecewise", z, cfg.m, cfg.d).map_err(|e| e.in_part(j))?;
                Ok(LatentVar::constant(tape, z))
            })
            .collect()
    }

    pub fn decode_parts(&self, zs: &[FeatureMatrix]) -> Result<Vec<Vec<Vec3>>> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let zv = self.record_codes(&mut tape, zs)?;
        let (parts, _) = self.decode_parts_taped(&mut tape, &b, &zv, None)?;
        Ok(parts.iter().map(|&p| tensor_points(tape.data(p))).collect())
    }

    pub fn decode(&self, zs: &[FeatureMatrix]) -> Result<Vec<Vec3>> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let zv = self.record_codes(&mut tape, zs)?;
        let (y, _) = self.decode_taped(&mut tape, &b, &zv, None)?;
        Ok(tensor_points(tape.data(y)))
    }

    pub fn reconstruct(&self, x: &[Vec3]) -> Result<Vec<Vec3>> {
        self.decode(&self.encode(x)?)
    }

    /// Reconstructs several shapes with one encoder and one decoder call
    /// covering every part.
    pub fn reconstruct_batch(&self, xs: &[Vec<Vec3>]) -> Result<Vec<Vec<Vec3>>> {
        let k = self.weights.k();
        let mut parts = Vec::with_capacity(xs.len() * k);
        let mut frames = Vec::with_capacity(xs.len() * k);
        for x in xs {
            check_vertices("encode_piecewise", x, self.vertices())?;
            for j in 0..k {
                parts.push(part_geometry(x, &self.weights, j)?);
                let wj = self.weights.column(j);
                frames.push(self.nets.frame_of(x, Some(&wj)).map_err(|e| e.in_part(j))?);
            }
        }
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let inputs: Vec<(&[Vec3], &Frame)> = parts.iter().map(|p| p.as_slice()).zip(&frames).collect();
        let zs = self.nets.encode(&mut tape, &b, &inputs)?;
        let dec_frames = zs
            .iter()
            .enumerate()
            .map(|(i, z)| self.nets.decoder_frame(&tape, z).map_err(|e| e.in_part(i % k)))
            .collect::<Result<Vec<_>>>()?;
        let codes: Vec<(LatentVar, &Frame)> = zs.into_iter().zip(&dec_frames).collect();
        let ys = self.nets.decode(&mut tape, &b, &codes)?;
        let mut out = Vec::with_capacity(xs.len());
        for shape in ys.chunks(k) {
            let y = self.blend_taped(&mut tape, shape)?;
            out.push(tensor_points(tape.data(y)));
        }
        Ok(out)
    }
}

/// Mesh models evaluated by reconstruction error.
pub trait MeshModel {
    fn reconstruct(&self, x: &[Vec3]) -> Result<Vec<Vec3>>;
}

impl MeshModel for GlobalMeshAE {
    fn reconstruct(&self, x: &[Vec3]) -> Result<Vec<Vec3>> {
        GlobalMeshAE::reconstruct(self, x)
    }
}

impl MeshModel for PiecewiseMeshAE {
    fn reconstruct(&self, x: &[Vec3]) -> Result<Vec<Vec3>> {
        PiecewiseMeshAE::reconstruct(self, x)
    }
}

/// `(1/N) Σ ‖Ψ(Φ(X⁽ⁱ⁾)) − X⁽ⁱ⁾‖_F`.
pub fn recon_loss(model: &dyn MeshModel, batch: &[Vec<Vec3>]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut s = 0.0;
    for x in batch {
        s += frobenius_distance(&model.reconstruct(x)?, x)?;
    }
    Ok(s / batch.len() as f64)
}

// ---------------------------------------------------------------------------
// Implicit VAE

/// Sampling for the SALD loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaldConfig {
    /// Axis-aligned box `Ω` for the uniform half of the samples.
    pub domain: (Vec3, Vec3),
    /// Query points per shape per step.
    pub samples: usize,
    /// Central-difference step for `∇f`.
    pub fd_step: f64,
    /// Std of the near-surface half, as a fraction of the box diagonal.
    pub sigma_frac: f64,
}

impl SaldConfig {
    /// Defaults for a domain: 512 samples, step `1e-4 · diag`, σ `0.05 · diag`.
    pub fn for_domain(domain: (Vec3, Vec3)) -> Self {
        Self {
            domain,
            samples: 512,
            fd_step: 1e-4 * (domain.1 - domain.0).norm(),
            sigma_frac: 0.05,
        }
    }

    pub fn diagonal(&self) -> f64 {
        (self.domain.1 - self.domain.0).norm()
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.domain;
        if !(lo.x < hi.x && lo.y < hi.y && lo.z < hi.z) {
            return Err(Error::Config("SALD domain must be a nonempty box".into()));
        }
        if self.samples == 0 || !(self.fd_step > 0.0) || !(self.sigma_frac >= 0.0) {
            return Err(Error::Config("SALD needs samples > 0, fd step > 0 and σ ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitConfig {
    /// Wrap encoder and decoder in frame averaging.
    pub fa: bool,
    pub m: usize,
    pub d: usize,
    pub encoder_hidden: usize,
    pub encoder_blocks: usize,
    pub decoder_hidden: usize,
    /// Hidden layers of the decoder MLP.
    pub decoder_layers: usize,
    pub decoder_skip: Option<usize>,
    pub activation: Activation,
    /// Also sample the invariant part, with `m` extra log-stds.
    pub noisy_invariants: bool,
    /// Radius of the sphere the decoder starts as.
    pub init_radius: f64,
    pub vae_weight: f64,
    pub sald: SaldConfig,
}

impl ImplicitConfig {
    pub fn for_domain(domain: (Vec3, Vec3)) -> Self {
        Self {
            fa: true,
            m: 0,
            d: 8,
            encoder_hidden: 64,
            encoder_blocks: 2,
            decoder_hidden: 64,
            decoder_layers: 4,
            decoder_skip: Some(2),
            activation: Activation::Relu,
            noisy_invariants: false,
            init_radius: 0.5,
            vae_weight: 0.001,
            sald: SaldConfig::for_domain(domain),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 3 {
            return Err(Error::Config(format!("need d ≥ 3 equivariant rows, got {}", self.d)));
        }
        if self.decoder_layers == 0 || !(self.vae_weight >= 0.0) {
            return Err(Error::Config("decoder needs a hidden layer; vae weight must be ≥ 0".into()));
        }
        self.sald.validate()
    }

    /// Number of log-stds.
    pub fn eta_dim(&self) -> usize {
        self.d + if self.noisy_invariants { self.m } else { 0 }
    }
}

/// Output of [`ImplicitVAE::encode`].
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub mu: FeatureMatrix,
    pub eta: Vec<f64>,
    /// The input's covariance spectrum was degenerate, so its frame is not
    /// unique and equivariance is not guaranteed for this input.
    pub degenerate: bool,
    pub diagnostics: FrameDiagnostics,
}

/// Point cloud → `(μ, η)` → implicit function `Ψ̂(Z, ·)`.
#[derive(Debug, Clone)]
pub struct ImplicitVAE {
    cfg: ImplicitConfig,
    enc: PointNet,
    dec: Mlp,
    pub params: Params,
}

impl ImplicitVAE {
    pub fn new(cfg: ImplicitConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let enc = PointNet::new(
            "enc",
            PointNetConfig {
                hidden: cfg.encoder_hidden,
                blocks: cfg.encoder_blocks,
                out: cfg.m + 3 * cfg.d + cfg.eta_dim(),
            },
        )?;
        let mut widths = vec![cfg.m + 3 * cfg.d + 3];
        widths.extend(core::iter::repeat_n(cfg.decoder_hidden, cfg.decoder_layers));
        widths.push(1);
        let dec = Mlp::new(
            "dec",
            MlpConfig {
                widths,
                activation: cfg.activation,
                skip: cfg.decoder_skip,
            },
        )?;
        let mut params = Params::new();
        enc.init(rng, &mut params);
        dec.init_geometric(rng, &mut params, cfg.init_radius, 3);
        Ok(Self { cfg, enc, dec, params })
    }

    pub fn config(&self) -> &ImplicitConfig {
        &self.cfg
    }

    /// Frame-averaged PointNet: `μ` equivariant, `η` invariant (`1×e`).
    pub fn encode_taped(&self, tape: &mut Tape, b: &Bound, p: &[Vec3]) -> Result<(LatentVar, Var, Frame, FrameDiagnostics)> {
        if p.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let (mut frame, diag) = pca_frame_uniform(p)?;
        if !self.cfg.fa {
            frame = Frame::trivial();
        }
        let mut stacked = Vec::with_capacity(frame.len() * p.len());
        for g in &frame.motions {
            stacked.extend(pull_back_points(g, p));
        }
        let xv = tape.constant(points_tensor(&stacked));
        let out = self.enc.forward(tape, b, xv, p.len())?;
        let (mu, eta) = average_codes(tape, out, 0, &frame, (self.cfg.m, self.cfg.d, self.cfg.eta_dim()))?;
        Ok((mu, eta.expect("eta width is d + extra > 0"), frame, diag))
    }

    pub fn encode(&self, p: &[Vec3]) -> Result<Encoded> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let (mu, eta, frame, diagnostics) = self.encode_taped(&mut tape, &b, p)?;
        Ok(Encoded {
            mu: mu.value(&tape),
            eta: tape.data(eta).to_vec(),
            degenerate: frame.source_degenerate,
            diagnostics,
        })
    }

    /// `Ψ̂(Z, x)` at every point of `xs` as a `K×1` column, averaged over
    /// the frame of `Z`'s equivariant rows.
    pub fn decode_points_taped(&self, tape: &mut Tape, b: &Bound, z: &LatentVar, xs: &[Vec3]) -> Result<Var> {
        let frame = if self.cfg.fa { code_frame(tape, z)? } else { Frame::trivial() };
        let k = xs.len();
        let mut rows = Vec::with_capacity(frame.len());
        let mut pts = Vec::with_capacity(frame.len() * k);
        for g in &frame.motions {
            rows.push(code_row(tape, z, g)?);
            pts.extend(pull_back_points(g, xs));
        }
        let shared = tape.concat_rows(&rows)?;
        let xv = tape.constant(points_tensor(&pts));
        let y = self.dec.forward_blocked(tape, b, shared, xv, k)?;
        let y = tape.reshape(y, frame.len(), k)?;
        let y = tape.col_mean(y);
        Ok(tape.transpose(y))
    }

    /// Values of `Ψ̂(Z, ·)` at many points.
    pub fn decode_many(&self, z: &FeatureMatrix, xs: &[Vec3]) -> Result<Vec<f64>> {
        const CHUNK: usize = 4096;
        check_code("decode_implicit", z, self.cfg.m, self.cfg.d)?;
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(CHUNK) {
            let mut tape = Tape::new();
            let b = self.params.bind(&mut tape);
            let zv = LatentVar::constant(&mut tape, z);
            let y = self.decode_points_taped(&mut tape, &b, &zv, chunk)?;
            out.extend_from_slice(tape.data(y));
        }
        Ok(out)
    }

    pub fn decode_implicit(&self, z: &FeatureMatrix, x: Vec3) -> Result<f64> {
        Ok(self.decode_many(z, &[x])?[0])
    }

    /// `Ψ̂(Z, ·)` as a field with a finite-difference gradient. Evaluation
    /// errors (only possible for a degenerate `Z`) surface as NaN.
    pub fn field(&self, z: &FeatureMatrix) -> Result<ScalarField> {
        check_code("decode_implicit", z, self.cfg.m, self.cfg.d)?;
        if self.cfg.fa {
            pca_frame_uniform(&z.equi)?;
        }
        let model = Arc::new(self.clone());
        let z = z.clone();
        let step = self.cfg.sald.fd_step;
        Ok(ScalarField::with_fd_gradient(
            move |x| model.decode_implicit(&z, x).unwrap_or(f64::NAN),
            step,
        ))
    }

    /// SALD and VAE terms for one cloud: encode, sample a code, decode at
    /// fresh SALD samples.
    pub fn sample_terms_taped(
        &self,
        tape: &mut Tape,
        b: &Bound,
        cloud: &[Vec3],
        rng: &mut impl Rng,
    ) -> Result<(Var, Var)> {
        let (mu, eta, _, _) = self.encode_taped(tape, b, cloud)?;
        let vae = vae_term_taped(tape, &mu, eta);
        let z = sample_latent_taped(tape, &mu, eta, rng)?;
        let samples = sald_samples(cloud, &self.cfg.sald, rng)?;
        let sald = sald_loss_at(tape, &samples, cloud, self.cfg.sald.fd_step, &mut |t: &mut Tape, xs: &[Vec3]| {
            self.decode_points_taped(t, b, &z, xs)
        })?;
        Ok((sald, vae))
    }
}

/// Reparameterized sample: row `j` of `U` gets isotropic noise with std
/// `exp(η_j)`; with `d + m` log-stds the invariant part gets per-entry
/// noise from the trailing `m`. Noise is drawn rows first, then invariants.
pub fn sample_latent(mu: &FeatureMatrix, eta: &[f64], rng: &mut impl Rng) -> Result<FeatureMatrix> {
    let (m, d) = (mu.inv_dim(), mu.equi_dim());
    let noisy_inv = check_eta("sample_latent", eta.len(), m, d)?;
    let std = |e: f64| e.clamp(LOG_STD_RANGE.0, LOG_STD_RANGE.1).exp();
    let equi = mu
        .equi
        .iter()
        .zip(eta)
        .map(|(u, &e)| {
            let n = Vec3::from_array([(); 3].map(|_| StandardNormal.sample(rng)));
            *u + n * std(e)
        })
        .collect();
    let inv = if noisy_inv {
        mu.inv
            .iter()
            .zip(&eta[d..])
            .map(|(u, &e)| {
                let n: f64 = StandardNormal.sample(rng);
                u + n * std(e)
            })
            .collect()
    } else {
        mu.inv.clone()
    };
    Ok(FeatureMatrix::new(inv, equi))
}

fn check_eta(op: &'static str, len: usize, m: usize, d: usize) -> Result<bool> {
    if len == d {
        Ok(false)
    } else if m > 0 && len == d + m {
        Ok(true)
    } else {
        Err(Error::shape(op, format!("{len} log-stds for m = {m}, d = {d}")))
    }
}

/// Taped [`sample_latent`]; draws the same noise in the same order.
pub fn sample_latent_taped(tape: &mut Tape, mu: &LatentVar, eta: Var, rng: &mut impl Rng) -> Result<LatentVar> {
    let d = tape.dims(mu.equi).0;
    let m = mu.inv.map(|u| tape.dims(u).1).unwrap_or(0);
    let noisy_inv = check_eta("sample_latent", tape.dims(eta).1, m, d)?;
    let noise: Vec<f64> = (0..3 * d).map(|_| StandardNormal.sample(rng)).collect();
    let eps = tape.constant(Tensor::matrix(d, 3, noise)?);
    let e = tape.slice_cols(eta, 0, d)?;
    let e = tape.clamp(e, LOG_STD_RANGE.0, LOG_STD_RANGE.1);
    let s = tape.exp(e);
    let s = tape.transpose(s);
    let ones = tape.constant(Tensor::full(1, 3, 1.0));
    let s = tape.matmul(s, ones)?;
    let n = tape.mul(s, eps)?;
    let equi = tape.add(mu.equi, n)?;
    let inv = match (mu.inv, noisy_inv) {
        (Some(u), true) => {
            let noise: Vec<f64> = (0..m).map(|_| StandardNormal.sample(rng)).collect();
            let eps = tape.constant(Tensor::row(noise));
            let e = tape.slice_cols(eta, d, m)?;
            let e = tape.clamp(e, LOG_STD_RANGE.0, LOG_STD_RANGE.1);
            let s = tape.exp(e);
            let n = tape.mul(s, eps)?;
            Some(tape.add(u, n)?)
        }
        (u, _) => u,
    };
    Ok(LatentVar { inv, equi })
}

/// `‖μ‖₁ + ‖η + 1‖₁` for one sample.
fn vae_term_taped(tape: &mut Tape, mu: &LatentVar, eta: Var) -> Var {
    let a = tape.abs(mu.equi);
    let mut s = tape.sum(a);
    if let Some(u) = mu.inv {
        let a = tape.abs(u);
        let t = tape.sum(a);
        s = tape.add(s, t).expect("scalars");
    }
    let e = tape.add_scalar(eta, 1.0);
    let e = tape.abs(e);
    let t = tape.sum(e);
    tape.add(s, t).expect("scalars")
}

/// `Σᵢ ‖μ⁽ⁱ⁾‖₁ + ‖η⁽ⁱ⁾ + 1‖₁`.
pub fn vae_loss(batch: &[(FeatureMatrix, Vec<f64>)]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(batch
        .iter()
        .map(|(mu, eta)| {
            mu.flatten().iter().map(|x| x.abs()).sum::<f64>() + eta.iter().map(|e| (e + 1.0).abs()).sum::<f64>()
        })
        .sum())
}

/// Unsigned distance to a cloud and its gradient, the unit vector from the
/// nearest point (lowest index on ties; zero on the point itself).
pub fn unsigned_distance(x: Vec3, cloud: &[Vec3]) -> (f64, Vec3) {
    let (i, d2) = nearest(x, cloud);
    let d = d2.sqrt();
    let g = if d > 0.0 { (x - cloud[i]) / d } else { Vec3::ZERO };
    (d, g)
}

/// Half uniform in `Ω`, half Gaussian around random cloud points.
pub fn sald_samples(cloud: &[Vec3], cfg: &SaldConfig, rng: &mut impl Rng) -> Result<Vec<Vec3>> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let (lo, hi) = cfg.domain;
    let near = cfg.samples / 2;
    let sigma = cfg.sigma_frac * cfg.diagonal();
    let mut out = Vec::with_capacity(cfg.samples);
    for _ in 0..cfg.samples - near {
        out.push(Vec3::new(
            rng.random_range(lo.x..=hi.x),
            rng.random_range(lo.y..=hi.y),
            rng.random_range(lo.z..=hi.z),
        ));
    }
    for _ in 0..near {
        let c = cloud[rng.random_range(0..cloud.len())];
        let n = Vec3::from_array([(); 3].map(|_| StandardNormal.sample(rng)));
        out.push(c + n * sigma);
    }
    Ok(out)
}

/// Seven-point stencil per sample: `x`, then `x ± h eᵢ` for each axis.
pub fn fd_stencil(samples: &[Vec3], h: f64) -> Vec<Vec3> {
    let e = [Vec3::new(h, 0.0, 0.0), Vec3::new(0.0, h, 0.0), Vec3::new(0.0, 0.0, h)];
    let mut out = Vec::with_capacity(7 * samples.len());
    for &x in samples {
        out.push(x);
        for d in e {
            out.push(x + d);
            out.push(x - d);
        }
    }
    out
}

/// Mean of `τ(f, h)(x) = ||f(x)| − h(x)| + min(‖∇f − ∇h‖, ‖∇f + ∇h‖)` over
/// `samples`, where `decode` evaluates `f` at a list of points as a column.
pub fn sald_loss_at(
    tape: &mut Tape,
    samples: &[Vec3],
    cloud: &[Vec3],
    h: f64,
    decode: &mut dyn FnMut(&mut Tape, &[Vec3]) -> Result<Var>,
) -> Result<Var> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let k = samples.len();
    if k == 0 {
        return Err(Error::EmptySample);
    }
    let f = decode(tape, &fd_stencil(samples, h))?;
    let f = tape.reshape(f, k, 7)?;
    let f0 = tape.slice_cols(f, 0, 1)?;
    let mut partials = Vec::with_capacity(3);
    for i in 0..3 {
        let p = tape.slice_cols(f, 1 + 2 * i, 1)?;
        let q = tape.slice_cols(f, 2 + 2 * i, 1)?;
        let diff = tape.sub(p, q)?;
        partials.push(tape.scale(diff, 0.5 / h));
    }
    let grad = tape.concat_cols(&partials)?;
    let (hv, hg): (Vec<f64>, Vec<Vec3>) = samples.iter().map(|&x| unsigned_distance(x, cloud)).unzip();
    let hv = tape.constant(Tensor::matrix(k, 1, hv)?);
    let hg = tape.constant(points_tensor(&hg));
    let a = tape.abs(f0);
    let t1 = tape.sub(a, hv)?;
    let t1 = tape.abs(t1);
    let gm = tape.sub(grad, hg)?;
    let gm = tape.norm_rows(gm);
    let gp = tape.add(grad, hg)?;
    let gp = tape.norm_rows(gp);
    let t2 = tape.minimum(gm, gp)?;
    let tau = tape.add(t1, t2)?;
    Ok(tape.mean(tau))
}

/// `(1/N) Σ` SALD over a batch, each cloud with a fresh code sample.
pub fn sald_loss(model: &ImplicitVAE, batch: &[Vec<Vec3>], rng: &mut impl Rng) -> Result<f64> {
    Ok(implicit_losses(model, batch, rng)?.0)
}

/// `sald_loss + w · vae_loss` with `w` from the model config.
pub fn combined_implicit_loss(model: &ImplicitVAE, batch: &[Vec<Vec3>], rng: &mut impl Rng) -> Result<f64> {
    let (s, v) = implicit_losses(model, batch, rng)?;
    Ok(s + model.cfg.vae_weight * v)
}

fn implicit_losses(model: &ImplicitVAE, batch: &[Vec<Vec3>], rng: &mut impl Rng) -> Result<(f64, f64)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (mut s, mut v) = (0.0, 0.0);
    for cloud in batch {
        let mut tape = Tape::new();
        let b = model.params.bind(&mut tape);
        let (sv, vv) = model.sample_terms_taped(&mut tape, &b, cloud, rng)?;
        s += tape.scalar_value(sv);
        v += tape.scalar_value(vv);
    }
    Ok((s / batch.len() as f64, v))
}

// ---------------------------------------------------------------------------
// Training

/// A model trained by minibatch Adam.
pub trait Trainable {
    fn params(&self) -> &Params;
    fn params_mut(&mut self) -> &mut Params;
    /// One sample's share of the batch loss; shares sum to the batch loss.
    fn sample_loss(
        &self,
        tape: &mut Tape,
        b: &Bound,
        sample: &[Vec3],
        batch_len: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var>;
}

impl Trainable for GlobalMeshAE {
    fn params(&self) -> &Params {
        &self.params
    }
    fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }
    fn sample_loss(&self, tape: &mut Tape, b: &Bound, x: &[Vec3], n: usize, _: &mut ChaCha8Rng) -> Result<Var> {
        let (e, _) = self.recon_error_taped(tape, b, x, None)?;
        Ok(tape.scale(e, 1.0 / n as f64))
    }
}

impl Trainable for PiecewiseMeshAE {
    fn params(&self) -> &Params {
        &self.params
    }
    fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }
    fn sample_loss(&self, tape: &mut Tape, b: &Bound, x: &[Vec3], n: usize, _: &mut ChaCha8Rng) -> Result<Var> {
        let (e, _) = self.recon_error_taped(tape, b, x, None)?;
        Ok(tape.scale(e, 1.0 / n as f64))
    }
}

impl Trainable for ImplicitVAE {
    fn params(&self) -> &Params {
        &self.params
    }
    fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }
    fn sample_loss(&self, tape: &mut Tape, b: &Bound, cloud: &[Vec3], n: usize, rng: &mut ChaCha8Rng) -> Result<Var> {
        let (s, v) = self.sample_terms_taped(tape, b, cloud, rng)?;
        let s = tape.scale(s, 1.0 / n as f64);
        let v = tape.scale(v, self.cfg.vae_weight);
        tape.add(s, v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Epochs completed.
    pub epoch: usize,
    pub adam: AdamState,
    /// Mean batch loss per completed epoch.
    pub history: Vec<f64>,
}

impl TrainState {
    pub fn new(params: &Params) -> Self {
        Self {
            epoch: 0,
            adam: AdamState::new(params),
            history: Vec::new(),
        }
    }
}

/// Randomness for one epoch, independent of how earlier epochs ran.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Loss and summed gradients of one minibatch.
pub fn batch_gradients<M: Trainable + ?Sized>(
    model: &M,
    batch: &[&[Vec3]],
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total: Vec<Vec<f64>> = model.params().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
    let mut loss = 0.0;
    for x in batch {
        let mut tape = Tape::new();
        let b = model.params().bind(&mut tape);
        let l = model.sample_loss(&mut tape, &b, x, batch.len(), rng)?;
        let g = tape.backward(l)?;
        loss += tape.scalar_value(l);
        for (acc, g) in total.iter_mut().zip(b.grads(&tape, &g)) {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
    }
    Ok((loss, total))
}

/// Runs epochs `state.epoch .. cfg.epochs`, calling `on_epoch(epoch, loss)`
/// after each. Shuffling and sampling depend only on `(seed, epoch)`.
pub fn train<M: Trainable + ?Sized>(
    model: &mut M,
    data: &[Vec<Vec3>],
    cfg: &TrainConfig,
    state: &mut TrainState,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if cfg.batch_size == 0 || !(cfg.adam.lr > 0.0) {
        return Err(Error::Config("batch size and learning rate must be positive".into()));
    }
    while state.epoch < cfg.epochs {
        let mut rng = epoch_rng(cfg.seed, state.epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let (mut sum, mut batches) = (0.0, 0);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&[Vec3]> = idx.iter().map(|&i| data[i].as_slice()).collect();
            let (loss, grads) = batch_gradients(&*model, &batch, &mut rng)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch: state.epoch });
            }
            adam_step(model.params_mut(), &grads, &mut state.adam, &cfg.adam)?;
            sum += loss;
            batches += 1;
        }
        let mean = sum / batches as f64;
        state.history.push(mean);
        on_epoch(state.epoch, mean);
        state.epoch += 1;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
