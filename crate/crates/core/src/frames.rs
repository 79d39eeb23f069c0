//! Weighted-PCA frames.
//!
//! The frame of a weighted point set `V` is the set of eight motions that
//! move the origin to the weighted centroid and the coordinate axes onto the
//! principal directions, with every choice of axis sign. Transforming `V` by
//! any `g ∈ E(3)` transforms this set to `g·F(V)`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::group::EuclideanMotion;
use crate::linalg3::{sym_eig3, weighted_centroid, weighted_covariance, Mat3, Vec3};

/// Sign patterns in enumeration order `+++, ++−, +−+, …, −−−`.
pub const SIGN_PATTERNS: [[f64; 3]; 8] = [
    [1.0, 1.0, 1.0],
    [1.0, 1.0, -1.0],
    [1.0, -1.0, 1.0],
    [1.0, -1.0, -1.0],
    [-1.0, 1.0, 1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [-1.0, -1.0, -1.0],
];

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub motions: Vec<EuclideanMotion>,
    /// The covariance spectrum had a repeated eigenvalue; the eigenbasis is
    /// then arbitrary (but deterministic) and equivariance is not guaranteed.
    pub source_degenerate: bool,
}

impl Frame {
    /// The one-element frame `{identity}`. Averaging over it is a no-op,
    /// which turns a frame-averaged model back into its plain backbone.
    pub fn trivial() -> Self {
        Self {
            motions: vec![EuclideanMotion::IDENTITY],
            source_degenerate: false,
        }
    }

    pub fn len(&self) -> usize {
        self.motions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.motions.is_empty()
    }

    /// `{compose(g, h) : h ∈ self}`, preserving order.
    pub fn left_mul(&self, g: &EuclideanMotion) -> Frame {
        Frame {
            motions: self
                .motions
                .iter()
                .map(|h| crate::group::compose(g, h))
                .collect(),
            source_degenerate: self.source_degenerate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameDiagnostics {
    /// Ascending.
    pub eigenvalues: [f64; 3],
    pub min_gap: f64,
    pub centroid: Vec3,
}

/// Weighted-PCA frame of the rows of `points`.
///
/// A degenerate spectrum is not an error: the flag is set and the eight
/// motions are still built from the solver's eigenbasis.
pub fn pca_frame(points: &[Vec3], w: &[f64]) -> Result<(Frame, FrameDiagnostics)> {
    if points.len() < 3 {
        return Err(Error::TooFewPoints {
            needed: 3,
            got: points.len(),
        });
    }
    let t = weighted_centroid(points, w)?;
    let c = weighted_covariance(points, w)?;
    let eig = sym_eig3(&c);
    let basis = eig.eigenvectors;
    let motions = SIGN_PATTERNS
        .iter()
        .map(|s| {
            let r = Mat3::from_cols(basis.col(0) * s[0], basis.col(1) * s[1], basis.col(2) * s[2]);
            EuclideanMotion::new(r, t)
        })
        .collect();
    let l = eig.eigenvalues;
    Ok((
        Frame {
            motions,
            source_degenerate: eig.degenerate,
        },
        FrameDiagnostics {
            eigenvalues: l,
            min_gap: eig.min_gap().max(0.0),
            centroid: t,
        },
    ))
}

/// [`pca_frame`] with unit weights.
pub fn pca_frame_uniform(points: &[Vec3]) -> Result<(Frame, FrameDiagnostics)> {
    pca_frame(points, &vec![1.0; points.len()])
}

/// Set equality of two frames under the motion distance
/// `max(‖R − R'‖_F, ‖t − t'‖)`, using greedy nearest matching.
pub fn frames_equal_as_sets(a: &Frame, b: &Frame, tol: f64) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let mut used = vec![false; b.len()];
    for m in &a.motions {
        let best = b
            .motions
            .iter()
            .enumerate()
            .filter(|(j, _)| !used[*j])
            .map(|(j, n)| (j, m.distance(n)))
            .min_by(|x, y| x.1.total_cmp(&y.1));
        match best {
            Some((j, d)) if d <= tol => used[j] = true,
            _ => return false,
        }
    }
    true
}

/// Largest matched distance between two frames (greedy), or `None` when the
/// sizes differ. Used for residual reporting.
pub fn frame_set_distance(a: &Frame, b: &Frame) -> Option<f64> {
    if a.len() != b.len() {
        return None;
    }
    let mut used = vec![false; b.len()];
    let mut worst: f64 = 0.0;
    for m in &a.motions {
        let (j, d) = b
            .motions
            .iter()
            .enumerate()
            .filter(|(j, _)| !used[*j])
            .map(|(j, n)| (j, m.distance(n)))
            .min_by(|x, y| x.1.total_cmp(&y.1))?;
        used[j] = true;
        worst = worst.max(d);
    }
    Some(worst)
}
