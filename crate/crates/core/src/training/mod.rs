//! Divide-and-conquer training of the per-center models.
//!
//! Step 1 corrects the coarse levels of a biased ensemble with statistical
//! losses against observations; Step 2 predicts finer levels from coarser
//! ones. Every center owns a small model and exactly one gradient tape is
//! alive at any time.

mod data;
mod debias;
mod downscale;

pub use data::{check_split_hygiene, AccessRecord, DataView, Dataset, Phase, SampleRange, Splits};
pub use debias::{debias_step, evaluate_outputs, global_pass, train_debias, DebiasData, GlobalSnapshot};
pub use downscale::{downscale_step, evaluate_downscale, sequential_level_training, train_level, InputMode, Sample};

use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::losses::{LossSpec, ObservedStats};
use crate::nn::{
    Adam, CenterModel, DebiasModel, DebiasShape, DownscaleModel, DownscaleShape, ModelBundle, TapeMonitor,
};
use crate::sphere::{cone_of_influence, CoefficientPyramid, ConeParams, LevelSeries, WaveletFrame};
use crate::{CenterId, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Debias,
    Downscale,
}

/// Step budget and early stopping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub max_steps: usize,
    /// Validation cadence in steps.
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            max_steps: 200,
            eval_every: 1,
            patience: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DebiasOptions {
    pub hidden: usize,
    pub residual_width: usize,
}

impl Default for DebiasOptions {
    fn default() -> Self {
        DebiasOptions {
            hidden: 8,
            residual_width: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownscaleOptions {
    pub channels: usize,
    pub layers: usize,
    pub kernel: usize,
    /// Weight of the statistical regularizer added to the MSE.
    pub lambda: f64,
    /// Length of the regularizer windows in years.
    pub window_years: f64,
}

impl Default for DownscaleOptions {
    fn default() -> Self {
        DownscaleOptions {
            channels: 8,
            layers: 4,
            kernel: 2,
            lambda: 0.1,
            window_years: 1.0,
        }
    }
}

/// Everything that defines a training run apart from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub kind: StepKind,
    /// First and last level (inclusive) owned by this run.
    pub levels: [usize; 2],
    pub cone: ConeParams,
    pub loss: LossSpec,
    pub optimizer: Adam,
    pub schedule: Schedule,
    pub debias: DebiasOptions,
    pub downscale: DownscaleOptions,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            kind: StepKind::Debias,
            levels: [1, 4],
            cone: ConeParams::default(),
            loss: LossSpec::default(),
            optimizer: Adam::default(),
            schedule: Schedule::default(),
            debias: DebiasOptions::default(),
            downscale: DownscaleOptions::default(),
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn level_range(&self) -> RangeInclusive<usize> {
        self.levels[0]..=self.levels[1]
    }

    pub fn validate(&self, frame: &WaveletFrame) -> Result<()> {
        let [lo, hi] = self.levels;
        if lo == 0 || lo > hi || hi > frame.n_levels() {
            return Err(Error::InvalidConfig(format!(
                "levels {lo}..={hi} outside the frame's 1..={}",
                frame.n_levels()
            )));
        }
        if self.kind == StepKind::Downscale && lo < 2 {
            return Err(Error::InvalidConfig("downscaling needs at least one coarser input level".into()));
        }
        self.loss.validate()?;
        self.optimizer.validate()?;
        if self.schedule.eval_every == 0 {
            return Err(Error::InvalidConfig("eval_every must be positive".into()));
        }
        let d = &self.downscale;
        if d.kernel == 0 || !(d.lambda >= 0.0) || !d.lambda.is_finite() || !(d.window_years > 0.0) {
            return Err(Error::InvalidConfig("invalid downscaling options".into()));
        }
        if !(self.cone.radius_scale >= 0.0) {
            return Err(Error::InvalidConfig("cone radius must be non-negative".into()));
        }
        Ok(())
    }
}

/// Series a center model reads, and the neighbors its spectral loss pairs
/// it with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CenterInputs {
    pub center: CenterId,
    /// Input features in column order.
    pub features: Vec<CenterId>,
    /// Same-level neighbors, target excluded.
    pub neighbors: Vec<CenterId>,
}

impl CenterInputs {
    /// Step 1: the target's cone (target first, then neighbors, then
    /// ancestors).
    pub fn debias(frame: &WaveletFrame, center: CenterId, params: &ConeParams) -> Result<Self> {
        let cone = cone_of_influence(frame, center, params)?;
        let mut features = cone.neighbors.clone();
        features.extend(&cone.ancestors);
        Ok(CenterInputs {
            center,
            features,
            neighbors: cone.neighbors[1..].to_vec(),
        })
    }

    /// Step 2: the parent's same-level cone plus the remaining ancestors;
    /// nothing at the target's own level.
    pub fn downscale(frame: &WaveletFrame, center: CenterId, params: &ConeParams) -> Result<Self> {
        let cone = cone_of_influence(frame, center, params)?;
        let parent = *cone
            .ancestors
            .first()
            .ok_or_else(|| Error::InvalidConfig(format!("center {center} has no coarser level")))?;
        let parent_cone = cone_of_influence(frame, parent, params)?;
        let mut features = parent_cone.neighbors;
        features.extend(&cone.ancestors[1..]);
        Ok(CenterInputs {
            center,
            features,
            neighbors: cone.neighbors[1..].to_vec(),
        })
    }

    /// Row-major `steps × features` input matrix from `view`.
    pub fn gather(&self, view: &DataView<'_>) -> Result<Vec<f64>> {
        let cols: Vec<&[f64]> = self
            .features
            .iter()
            .map(|f| view.series(f.level, f.index))
            .collect::<Result<_>>()?;
        let (n, steps) = (cols.len(), view.len());
        let mut out = vec![0.0; n * steps];
        for (i, col) in cols.iter().enumerate() {
            for (t, v) in col.iter().enumerate() {
                out[t * n + i] = *v;
            }
        }
        Ok(out)
    }
}

/// Per-center seed derived from the run seed.
pub fn center_seed(seed: u64, center: CenterId) -> u64 {
    let mut z = seed ^ ((center.level as u64) << 48) ^ (center.index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One optimization step's aggregate losses (means over centers).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub level: Option<usize>,
    pub loss: f64,
    pub quantile: f64,
    pub spectrum: f64,
    pub mse: f64,
    pub validation: Option<f64>,
}

/// Mean losses of a set of outputs against the run's targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub loss: f64,
    pub quantile: f64,
    pub spectrum: f64,
    pub mse: f64,
    /// Per-center loss in center order, averaged over members.
    pub per_center: Vec<f64>,
}

/// A training run: configuration, frame, and one model per center.
pub struct TrainingRun<'a> {
    pub config: TrainingConfig,
    frame: &'a WaveletFrame,
    pub registry: BTreeMap<CenterId, ModelBundle>,
    inputs: BTreeMap<CenterId, CenterInputs>,
    targets: BTreeMap<CenterId, ObservedStats>,
    /// Completed optimization steps.
    pub step: usize,
    /// Levels in the order their models finished training.
    pub training_order: Vec<usize>,
    monitor: TapeMonitor,
}

impl<'a> TrainingRun<'a> {
    /// Fresh run with seeded, unit-scaled models for every center.
    pub fn new(frame: &'a WaveletFrame, config: TrainingConfig) -> Result<Self> {
        let mut run = Self::from_registry(frame, config, BTreeMap::new())?;
        let centers: Vec<CenterId> = run.inputs.keys().copied().collect();
        for c in centers {
            let width = run.inputs[&c].features.len();
            let seed = center_seed(run.config.seed, c);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = match run.config.kind {
                StepKind::Debias => {
                    let o = run.config.debias;
                    CenterModel::Debias(DebiasModel::init(
                        DebiasShape {
                            input_width: width,
                            hidden: o.hidden,
                            residual_width: o.residual_width,
                        },
                        &mut rng,
                    ))
                }
                StepKind::Downscale => {
                    let o = run.config.downscale;
                    CenterModel::Downscale(DownscaleModel::init(
                        DownscaleShape {
                            input_width: width,
                            channels: o.channels,
                            layers: o.layers,
                            kernel: o.kernel,
                        },
                        &mut rng,
                    ))
                }
            };
            run.registry.insert(c, ModelBundle::new(c, model, seed));
        }
        Ok(run)
    }

    /// Run around an existing registry (for example loaded from a
    /// checkpoint). Missing centers surface when they are used.
    pub fn from_registry(
        frame: &'a WaveletFrame,
        config: TrainingConfig,
        registry: BTreeMap<CenterId, ModelBundle>,
    ) -> Result<Self> {
        config.validate(frame)?;
        let mut inputs = BTreeMap::new();
        for c in frame.centers_in(config.level_range()) {
            let ci = match config.kind {
                StepKind::Debias => CenterInputs::debias(frame, c, &config.cone)?,
                StepKind::Downscale => CenterInputs::downscale(frame, c, &config.cone)?,
            };
            inputs.insert(c, ci);
        }
        for (c, b) in &registry {
            let want = inputs.get(c).ok_or_else(|| Error::InvalidConfig(format!("model for {c} outside the run")))?;
            if b.model.input_width() != want.features.len() {
                return Err(Error::ShapeMismatch(format!(
                    "model for {c} reads {} inputs, cone has {}",
                    b.model.input_width(),
                    want.features.len()
                )));
            }
            let family_ok = matches!(
                (&b.model, config.kind),
                (CenterModel::Debias(_), StepKind::Debias) | (CenterModel::Downscale(_), StepKind::Downscale)
            );
            if !family_ok {
                return Err(Error::InvalidConfig(format!("model family of {c} does not match the run")));
            }
        }
        Ok(TrainingRun {
            config,
            frame,
            registry,
            inputs,
            targets: BTreeMap::new(),
            step: 0,
            training_order: Vec::new(),
            monitor: TapeMonitor::new(),
        })
    }

    pub fn frame(&self) -> &'a WaveletFrame {
        self.frame
    }

    pub fn levels(&self) -> RangeInclusive<usize> {
        self.config.level_range()
    }

    /// Centers of the run in (level, ring, index) order.
    pub fn centers(&self) -> impl Iterator<Item = CenterId> + '_ {
        self.inputs.keys().copied()
    }

    pub fn inputs(&self, center: CenterId) -> Result<&CenterInputs> {
        self.inputs
            .get(&center)
            .ok_or_else(|| Error::InvalidIndex(format!("center {center} outside the run")))
    }

    pub fn bundle(&self, center: CenterId) -> Result<&ModelBundle> {
        self.registry.get(&center).ok_or(Error::MissingModel(center))
    }

    fn bundle_mut(&mut self, center: CenterId) -> Result<&mut ModelBundle> {
        self.registry.get_mut(&center).ok_or(Error::MissingModel(center))
    }

    /// Tape-liveness counter shared by every tape this run creates.
    pub fn monitor(&self) -> &TapeMonitor {
        &self.monitor
    }

    /// Gradient-free model output for one center.
    pub fn predict(&self, center: CenterId, view: &DataView<'_>) -> Result<Vec<f64>> {
        let x = self.inputs(center)?.gather(view)?;
        self.bundle(center)?.model.forward(&x, view.len())
    }

    /// Fixes every model's input normalisation and output scale from
    /// training data. Input scales are inverse feature deviations pooled
    /// over `inputs`; the output scale is the deviation of each center's
    /// series pooled over `outputs`.
    pub fn calibrate(&mut self, inputs: &[DataView<'_>], outputs: &[DataView<'_>]) -> Result<()> {
        let centers: Vec<CenterId> = self.centers().collect();
        self.calibrate_centers(&centers, inputs, outputs)
    }

    /// [`TrainingRun::calibrate`] restricted to one level.
    pub fn calibrate_level(&mut self, level: usize, inputs: &[DataView<'_>], outputs: &[DataView<'_>]) -> Result<()> {
        let centers: Vec<CenterId> = self.centers().filter(|c| c.level == level).collect();
        self.calibrate_centers(&centers, inputs, outputs)
    }

    fn calibrate_centers(&mut self, centers: &[CenterId], inputs: &[DataView<'_>], outputs: &[DataView<'_>]) -> Result<()> {
        for &c in centers {
            let feats = self.inputs[&c].features.clone();
            let scales: Vec<f64> = feats
                .iter()
                .map(|f| pooled_std(inputs, *f).map(|s| if s > 0.0 { 1.0 / s } else { 1.0 }))
                .collect::<Result<_>>()?;
            let sigma = pooled_std(outputs, c)?;
            let sigma = if sigma > 0.0 { sigma } else { 1.0 };
            match &mut self.bundle_mut(c)?.model {
                CenterModel::Debias(m) => {
                    m.input_scale = scales;
                    m.output_scale = sigma;
                }
                CenterModel::Downscale(m) => {
                    m.input_scale = scales;
                    m.output_scale = sigma;
                }
            }
        }
        Ok(())
    }

    /// Observation statistics per center (center with its neighbors).
    pub fn set_targets(&mut self, obs: &DataView<'_>) -> Result<()> {
        let mut targets = BTreeMap::new();
        for (c, ci) in &self.inputs {
            let center = obs.series(c.level, c.index)?;
            let nbrs: Vec<&[f64]> = ci
                .neighbors
                .iter()
                .map(|n| obs.series(n.level, n.index))
                .collect::<Result<_>>()?;
            targets.insert(*c, ObservedStats::compute(center, &nbrs, &self.config.loss)?);
        }
        self.targets = targets;
        Ok(())
    }

    /// Observation statistics the center is trained towards.
    pub fn target(&self, center: CenterId) -> Result<&ObservedStats> {
        self.targets
            .get(&center)
            .ok_or_else(|| Error::InvalidConfig(format!("no observation statistics for {center}")))
    }

    /// Runs all models of the run over `input`; Step-1 levels replace the
    /// input's, Step-2 levels are appended coarse-to-fine.
    pub fn apply(&self, input: &CoefficientPyramid) -> Result<CoefficientPyramid> {
        for c in self.centers() {
            self.bundle(c)?;
        }
        let mut out = input.clone();
        match self.config.kind {
            StepKind::Debias => {
                let view = DataView::whole(input);
                for j in self.levels() {
                    out.insert_level(predict_level(self, j, &view)?)?;
                }
            }
            StepKind::Downscale => {
                for j in self.levels() {
                    let series = predict_level(self, j, &DataView::whole(&out))?;
                    out.insert_level(series)?;
                }
            }
        }
        Ok(out)
    }
}

/// Gradient-free outputs of every level-`level` model of the run.
pub fn predict_level(run: &TrainingRun<'_>, level: usize, view: &DataView<'_>) -> Result<LevelSeries> {
    if !run.levels().contains(&level) {
        return Err(Error::InvalidIndex(format!("level {level} is not trained by this run")));
    }
    let n = run.frame().center_count(level);
    let outputs = (0..n)
        .into_par_iter()
        .map(|i| run.predict(CenterId::new(level, i), view))
        .collect::<Result<Vec<_>>>()?;
    let mut out = LevelSeries::zeros(level, n, view.len());
    for (i, y) in outputs.iter().enumerate() {
        out.series_mut(i).copy_from_slice(y);
    }
    Ok(out)
}

fn pooled_std(views: &[DataView<'_>], c: CenterId) -> Result<f64> {
    let (mut n, mut s, mut s2) = (0.0, 0.0, 0.0);
    for v in views {
        for x in v.series(c.level, c.index)? {
            n += 1.0;
            s += x;
            s2 += x * x;
        }
    }
    if n < 2.0 {
        return Ok(0.0);
    }
    let mean = s / n;
    Ok(((s2 / n - mean * mean).max(0.0) * n / (n - 1.0)).sqrt())
}
