//! Latent uncertainty representation (LUR) heads over frozen latent features,
//! repulsive particle training, last-layer probabilistic baselines, and the
//! calibration / out-of-distribution evaluation protocol around them.

// `!(x > 0.0)` style checks are used on purpose to reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod cli;
pub mod data;
pub mod error;
pub mod heads;
pub mod metrics;
pub mod numerics;
pub mod repulsion;

pub use error::{Error, Result};
