//! Multi-resolution statistical debiasing and downscaling of spherical fields.
//!
//! The crate is organised around the coefficient pyramid produced by a tight
//! spherical wavelet frame:
//!
//! - [`sphere`]: grids, spherical harmonic transforms, the wavelet frame,
//!   analysis/synthesis and cone-of-influence queries.
//! - [`losses`]: quantile and cross-spectrum losses with exact gradients.
//! - [`nn`]: a small reverse-mode tape, the LSTM debiasing model, the TCN
//!   downscaling model and the Adam optimizer.
//! - [`training`]: the divide-and-conquer trainers for both steps.
//! - [`synth`]: synthetic truth and biased ensembles with known distortions.

pub mod error;
pub mod losses;
pub mod nn;
pub mod sphere;
pub mod synth;
pub mod training;

pub use error::{Error, Result};

use serde::{Deserialize, Serialize};

/// Identifies one wavelet center: a (level, index) pair. Levels start at 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CenterId {
    pub level: usize,
    pub index: usize,
}

impl CenterId {
    pub fn new(level: usize, index: usize) -> Self {
        CenterId { level, index }
    }
}

impl core::fmt::Display for CenterId {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "L{}:{}", self.level, self.index)
    }
}
