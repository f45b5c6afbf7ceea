//! Multilevel correlation balanced optimization (MCBO) for deformable
//! multimodal 3D registration.
//!
//! The pipeline maps both images into MIND-SSC feature space, registers the
//! features at several average-pooled resolutions with a dense SSD
//! correlation search followed by coupled convex regularization and an
//! inverse-consistency step, refines the full-resolution level with Adam
//! instance optimization, and fuses the per-level displacement fields with
//! fixed weights. Fields from several moving modalities can be combined by
//! voxelwise maximum-norm selection.
//!
//! Displacements are stored in voxel units of the grid they live on, ordered
//! `(dh, dw, dd)`. A field `phi` on the fixed grid maps voxel `v` to the
//! moving-image coordinate `v + phi(v)`.

// index loops over the three vector components read better than zips
#![allow(clippy::needless_range_loop)]

pub mod corr;
pub mod cvxopt;
pub mod error;
pub mod evalkit;
pub mod fusion;
pub mod instopt;
pub mod mindssc;
pub mod pyramid;
pub mod volgrid;

pub use error::{Error, Result};
pub use volgrid::{DisplacementField, FeatureVolume, Grid, Volume3};
