//! Importance-protected truncated-SVD compression for layered linear models.
//!
//! Weights are compressed by truncating the SVD of `W·S`, where `S` whitens a
//! channel-rescaled calibration Gram matrix, so the output error of each
//! truncation equals the dropped singular values. Per-layer preservation
//! ratios come from a Fisher/effective-rank heuristic or from Bayesian
//! optimization under a mean-budget constraint.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allocator;
pub mod calibration;
pub mod compressor;
pub mod error;
pub mod io;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod whitening;

pub use allocator::CompressionPlan;
pub use error::{Error, Result};
pub use linalg::Matrix;
pub use model::{Network, ToyModel};
