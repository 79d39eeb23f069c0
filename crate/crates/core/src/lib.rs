#![no_std]

//! Frame-averaged shape autoencoders that are equivariant to the Euclidean
//! group E(3).
//!
//! The crate is organized bottom-up:
//!
//! - [`linalg3`]: 3D linear algebra (symmetric eigensolver, weighted
//!   statistics, Procrustes, rotation slerp).
//! - [`group`]: Euclidean motions and their actions on feature matrices,
//!   point sets and scalar fields.
//! - [`frames`]: weighted-PCA frames.
//! - [`fa`]: the frame-averaging operator.
//! - [`autodiff`]: a small reverse-mode tape over dense matrices, plus Adam.
//! - [`backbones`]: MLP, PointNet and mesh message-passing networks.
//! - [`models`]: global mesh, implicit VAE and piecewise mesh autoencoders
//!   together with their losses and training loop.
//! - [`latent`]: equivariant latent interpolation.
//! - [`eval`]: evaluation metrics and zero-crossing extraction.
//! - [`data`]: synthetic articulated chains, splits and random motions.
//!
//! Everything works on `f64`. No I/O lives here; file formats and the CLI
//! are in the companion `eqshape` crate.

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod backbones;
pub mod data;
pub mod error;
pub mod eval;
pub mod fa;
pub mod frames;
pub mod group;
pub mod latent;
pub mod linalg3;
pub mod models;

pub use error::{Error, Result};
pub use frames::{pca_frame, Frame, FrameDiagnostics};
pub use group::{EuclideanMotion, FeatureMatrix, ScalarField};
pub use linalg3::{Mat3, Vec3};
