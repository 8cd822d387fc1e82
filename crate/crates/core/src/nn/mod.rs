//! Reverse-mode tape, per-center model families and the optimizer.

mod adam;
mod lstm;
mod tape;
mod tcn;

pub use adam::{Adam, AdamState};
pub use lstm::{DebiasModel, DebiasShape};
pub use tape::{Tape, TapeMonitor, Var};
pub use tcn::{DownscaleModel, DownscaleShape};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{CenterId, Error, Result};

pub(crate) fn uniform<R: Rng>(rng: &mut R, bound: f64) -> f64 {
    if bound == 0.0 {
        0.0
    } else {
        rng.random_range(-bound..bound)
    }
}

pub(crate) fn check_inputs(inputs: &[f64], steps: usize, width: usize) -> Result<()> {
    if steps == 0 {
        return Err(Error::SeriesTooShort { needed: 1, got: 0 });
    }
    if inputs.len() != steps * width {
        return Err(Error::ShapeMismatch(format!(
            "{} input values for {steps} steps of width {width}",
            inputs.len()
        )));
    }
    Ok(())
}

/// A model forward pass recorded on a tape.
#[derive(Debug, Clone)]
pub struct Recorded {
    pub output: Var,
    /// Parameter leaves in storage order.
    pub params: Vec<Var>,
}

impl Recorded {
    /// Flat parameter gradient after a backward pass.
    pub fn gradient(&self, tape: &Tape) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| {
                let g = tape.grad(*p);
                if g.is_empty() {
                    vec![0.0; tape.dim(*p)]
                } else {
                    g.to_vec()
                }
            })
            .collect()
    }
}

/// One of the two model families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum CenterModel {
    Debias(DebiasModel),
    Downscale(DownscaleModel),
}

impl CenterModel {
    pub fn params(&self) -> &[f64] {
        match self {
            CenterModel::Debias(m) => &m.params,
            CenterModel::Downscale(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut Vec<f64> {
        match self {
            CenterModel::Debias(m) => &mut m.params,
            CenterModel::Downscale(m) => &mut m.params,
        }
    }

    pub fn input_width(&self) -> usize {
        match self {
            CenterModel::Debias(m) => m.shape.input_width,
            CenterModel::Downscale(m) => m.shape.input_width,
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            CenterModel::Debias(_) => "debias",
            CenterModel::Downscale(_) => "downscale",
        }
    }

    pub fn forward(&self, inputs: &[f64], steps: usize) -> Result<Vec<f64>> {
        match self {
            CenterModel::Debias(m) => m.forward(inputs, steps),
            CenterModel::Downscale(m) => m.forward(inputs, steps),
        }
    }

    pub fn record(&self, tape: &mut Tape, inputs: &[f64], steps: usize) -> Result<Recorded> {
        match self {
            CenterModel::Debias(m) => m.record(tape, inputs, steps),
            CenterModel::Downscale(m) => m.record(tape, inputs, steps),
        }
    }
}

/// A center's model together with its optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub center: CenterId,
    pub model: CenterModel,
    pub optimizer: AdamState,
    pub seed: u64,
}

impl ModelBundle {
    pub fn new(center: CenterId, model: CenterModel, seed: u64) -> Self {
        let n = model.params().len();
        ModelBundle {
            center,
            model,
            optimizer: AdamState::new(n),
            seed,
        }
    }

    /// Applies one optimizer update with gradient `grads`.
    pub fn update(&mut self, adam: &Adam, grads: &[f64]) -> Result<()> {
        let center = self.center;
        adam.step(self.model.params_mut(), grads, &mut self.optimizer, Some(center))
    }
}
