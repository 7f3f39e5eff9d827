//! Tools for training 3D segmentation models from noisy label maps.
//!
//! The pipeline this crate implements:
//!
//! 1. [`smoothing`] turns hard labels into soft targets whose softness at each
//!    voxel follows the boundary uncertainty of the tissues meeting there,
//!    and marks the altered voxels in a binary mask.
//! 2. [`transition`] estimates a left-stochastic label transition matrix from
//!    the altered voxels and caches its regularized transposed inverse.
//! 3. [`loss`] evaluates a cross-entropy that is plain on unaltered voxels and
//!    transition-corrected on altered ones, with analytic score gradients.
//! 4. [`metrics`] scores predictions with Dice, HD95 and ASSD on top of an
//!    exact Euclidean distance transform.
//!
//! [`phantom`] and [`trainer`] build a small synthetic experiment around
//! these pieces, and [`pipeline`] / [`cli`] chain everything with checksummed
//! outputs. Volumes live in [`volume`], which also owns the on-disk format.

pub mod cli;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod smoothing;
pub mod trainer;
pub mod transition;
pub mod volume;

mod sum;

pub use error::{Error, Result};

/// Version of the volume header / manifest formats written by this crate.
pub const FORMAT_VERSION: u32 = 1;
