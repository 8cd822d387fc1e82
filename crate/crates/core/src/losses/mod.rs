//! Statistical losses between model output and observed coefficient series,
//! with exact gradients with respect to the output series.

mod composite;
mod quantile;
mod spectrum;

pub use composite::{composite_loss, composite_loss_against, CompositeLoss, LossSpec, ObservedStats};
pub use quantile::{quantile_loss, quantile_loss_grad, quantiles, QuantileVector, TAIL_QUANTILES};
pub use spectrum::{
    cross_spectrum, cross_spectrum_loss, cross_spectrum_loss_grad, SpectrumEstimate, SpectrumGrad, SpectrumRepresentation, SpectrumScaling,
    SpectrumSettings, Taper,
};
