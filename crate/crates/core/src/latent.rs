//! Equivariant interpolation between latent codes.
//!
//! The equivariant rows are split into a centroid and a centered part. The
//! centered parts are aligned by the optimal rotation `R` (`R q̂⁰ ≈ q̂¹`),
//! and the path rotates by `slerp(t, R)` while blending the residual
//! `D = Q̂¹R − Q̂⁰` (row form) and the centroids linearly:
//!
//! `Q_t = (Q̂⁰ + tD) R_tᵀ + (1 − t) c⁰ + t c¹`,  `q_t = (1 − t) q⁰ + t q¹`.
//!
//! Both endpoints are reproduced, and moving both codes by the same proper
//! motion moves the whole path by it.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::group::FeatureMatrix;
use crate::linalg3::{procrustes_rotation, slerp_rotation, Mat3, Vec3};

fn centroid(rows: &[Vec3]) -> Vec3 {
    rows.iter().fold(Vec3::ZERO, |a, b| a + *b) / rows.len() as f64
}

/// Precomputed path between two codes; evaluate with [`Path::at`].
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    q0: Vec<f64>,
    q1: Vec<f64>,
    c0: Vec3,
    c1: Vec3,
    centered0: Vec<Vec3>,
    residual: Vec<Vec3>,
    rot: Mat3,
}

impl Path {
    pub fn new(z0: &FeatureMatrix, z1: &FeatureMatrix) -> Result<Self> {
        if z0.inv_dim() != z1.inv_dim() || z0.equi_dim() != z1.equi_dim() {
            return Err(Error::shape(
                "interpolate",
                alloc::format!(
                    "({}, {}) vs ({}, {})",
                    z0.inv_dim(),
                    z0.equi_dim(),
                    z1.inv_dim(),
                    z1.equi_dim()
                ),
            ));
        }
        if z0.equi_dim() == 0 {
            return Err(Error::TooFewPoints { needed: 1, got: 0 });
        }
        let (c0, c1) = (centroid(&z0.equi), centroid(&z1.equi));
        let a: Vec<Vec3> = z0.equi.iter().map(|p| *p - c0).collect();
        let b: Vec<Vec3> = z1.equi.iter().map(|p| *p - c1).collect();
        let rot = procrustes_rotation(&a, &b)?;
        // Fail early on a near-π alignment instead of at the first `at`.
        slerp_rotation(0.5, &rot)?;
        let rt = rot.transpose();
        let residual = a.iter().zip(&b).map(|(p, q)| rt * *q - *p).collect();
        Ok(Self {
            q0: z0.inv.clone(),
            q1: z1.inv.clone(),
            c0,
            c1,
            centered0: a,
            residual,
            rot,
        })
    }

    /// The optimal rotation between the centered codes.
    pub fn rotation(&self) -> Mat3 {
        self.rot
    }

    pub fn at(&self, t: f64) -> Result<FeatureMatrix> {
        let inv = self
            .q0
            .iter()
            .zip(&self.q1)
            .map(|(a, b)| (1.0 - t) * a + t * b)
            .collect();
        if t == 0.0 {
            let equi = self.centered0.iter().map(|p| *p + self.c0).collect();
            return Ok(FeatureMatrix::new(inv, equi));
        }
        let rt = slerp_rotation(t, &self.rot)?;
        let shift = self.c0 * (1.0 - t) + self.c1 * t;
        let equi = self
            .centered0
            .iter()
            .zip(&self.residual)
            .map(|(p, d)| rt * (*p + *d * t) + shift)
            .collect();
        Ok(FeatureMatrix::new(inv, equi))
    }
}

/// Point at `t ∈ [0, 1]` on the path from `z0` to `z1`.
pub fn interpolate(z0: &FeatureMatrix, z1: &FeatureMatrix, t: f64) -> Result<FeatureMatrix> {
    Path::new(z0, z1)?.at(t)
}

/// Part-wise interpolation for piecewise codes.
pub fn interpolate_parts(z0: &[FeatureMatrix], z1: &[FeatureMatrix], t: f64) -> Result<Vec<FeatureMatrix>> {
    if z0.len() != z1.len() {
        return Err(Error::shape("interpolate_parts", alloc::format!("{} vs {} parts", z0.len(), z1.len())));
    }
    z0.iter()
        .zip(z1)
        .enumerate()
        .map(|(j, (a, b))| interpolate(a, b, t).map_err(|e| e.in_part(j)))
        .collect()
}
