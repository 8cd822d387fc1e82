use thiserror::Error;

use crate::CenterId;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("bandlimit {bandlimit} is too small for {levels} levels (need at least {required})")]
    BandlimitTooSmall {
        bandlimit: usize,
        levels: usize,
        required: usize,
    },
    #[error("bandlimit {bandlimit} exceeds what {levels} levels can carry (at most {max})")]
    BandlimitTooLarge {
        bandlimit: usize,
        levels: usize,
        max: usize,
    },
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("grid {n_lat}x{n_lon} cannot resolve bandlimit {bandlimit}")]
    GridMismatch {
        n_lat: usize,
        n_lon: usize,
        bandlimit: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid index: {0}")]
    InvalidIndex(String),
    #[error("series too short: need at least {needed} samples, got {got}")]
    SeriesTooShort { needed: usize, got: usize },
    #[error("non-finite value at sample {index}")]
    NonFinite { index: usize },
    #[error("invalid quantile vector: {0}")]
    InvalidQuantiles(String),
    #[error("invalid loss spec: {0}")]
    InvalidLossSpec(String),
    #[error("non-finite gradient{}", match .center { Some(c) => format!(" for center {c}"), None => String::new() })]
    NonFiniteGradient { center: Option<CenterId> },
    #[error("non-finite loss for center {center} at step {step}")]
    NonFiniteLoss { center: CenterId, step: usize },
    #[error("missing model for center {0}")]
    MissingModel(CenterId),
    #[error("missing trained models for level {0}")]
    MissingLevel(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid process spec: {0}")]
    InvalidSpec(String),
}
