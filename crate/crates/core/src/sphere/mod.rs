//! Spherical grids, harmonic transforms and the tight wavelet frame.
//!
//! Bandlimits are exclusive throughout: a field with bandlimit `L` has
//! harmonic content only at degrees `ℓ < L`.

mod cone;
mod frame;
mod grid;
pub mod legendre;
mod pyramid;
mod sht;

pub use cone::{cone_of_influence, great_circle_distance, ConeOfInfluence, ConeParams};
pub use frame::{build_frame, KernelParams, LevelLayout, WaveletFrame};
pub use grid::SphericalGrid;
pub use pyramid::{
    analyze, synthesize, CoefficientPyramid, FieldStack, FrameTransform, LevelSeries, TimeAxis,
};
pub use sht::{sht_forward, sht_inverse, HarmonicCoeffs, ShtPlan, ShtScratch};
