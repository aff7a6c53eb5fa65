//! Hyperspherical latent compression for VAE-based anomaly detection.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: reverse-mode differentiation over [`DenseMatrix`] values.
//! - [`hypersphere`]: Cartesian ↔ hyperspherical conversions, including the
//!   differentiable batch transform to angle cosines.
//! - [`geometry`]: hypervolume element, volume-reduction schedules and
//!   Monte-Carlo concentration-of-measure experiments.
//! - [`losses`]: Cartesian and hyperspherical KLD objectives, compression
//!   priors, the per-index gain ladder and β annealing.
//! - [`model`]: a small MLP VAE with radius normalisation, roll
//!   reorientation, Adam training and binary checkpoints.
//! - [`anomaly`]: k-NN scoring, ROC/AUROC/FPR95 and replica angles.
//! - [`datasets`]: synthetic benchmarks and CSV ingestion.

// `!(v > 0.0)` style guards reject NaN along with the out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anomaly;
pub mod autodiff;
pub mod datasets;
pub mod error;
pub mod geometry;
pub mod hypersphere;
pub mod losses;
pub mod matrix;
pub mod model;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
pub use matrix::DenseMatrix;
