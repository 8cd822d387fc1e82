use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::losses::{composite_loss_against, LossSpec, ObservedStats};
use crate::nn::{ModelBundle, Tape};
use crate::sphere::{CoefficientPyramid, LevelSeries};
use crate::{CenterId, Error, Result};

use super::data::{DataView, Dataset, Phase, SampleRange, Splits};
use super::{predict_level, EvalReport, StepKind, StepReport, TrainingRun};

/// One supervised window: coarse inputs and the observed fine target over
/// the same time steps.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'d> {
    pub inputs: DataView<'d>,
    pub target: DataView<'d>,
}

/// Where coarser fine-level inputs come from while training a level.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// Predictions of the already trained coarser models.
    #[default]
    Sequential,
    /// Observed coefficients.
    GroundTruth,
}

#[derive(Default)]
struct Score {
    total: f64,
    mse: f64,
    quantile: f64,
    spectrum: f64,
}

impl Score {
    fn add(&mut self, o: &Score) {
        self.total += o.total;
        self.mse += o.mse;
        self.quantile += o.quantile;
        self.spectrum += o.spectrum;
    }

    fn scaled(&self, f: f64) -> Score {
        Score {
            total: self.total * f,
            mse: self.mse * f,
            quantile: self.quantile * f,
            spectrum: self.spectrum * f,
        }
    }
}

fn regularizer_spec(run: &TrainingRun<'_>) -> LossSpec {
    LossSpec {
        include_auto_spectrum: true,
        ..run.config.loss.clone()
    }
}

/// Consecutive windows of about `window_years`, the last one absorbing the
/// remainder; a record shorter than one window is used whole.
fn windows(n: usize, steps_per_year: f64, window_years: f64) -> Vec<(usize, usize)> {
    let len = ((steps_per_year * window_years).round() as usize).max(1);
    let k = (n / len).max(1);
    (0..k)
        .map(|i| (i * len, if i + 1 == k { n } else { (i + 1) * len }))
        .collect()
}

/// MSE plus `λ ·` the mean windowed composite loss of `out` against
/// `target`; adds `∂/∂out` into `grad` when given.
fn score(run: &TrainingRun<'_>, out: &[f64], target: &DataView<'_>, c: CenterId, grad: Option<&mut [f64]>) -> Result<Score> {
    let y = target.series(c.level, c.index)?;
    let n = y.len() as f64;
    let mut s = Score::default();
    let mut g = vec![0.0; out.len()];
    for ((o, t), gi) in out.iter().zip(y).zip(g.iter_mut()) {
        s.mse += (o - t) * (o - t) / n;
        *gi = 2.0 * (o - t) / n;
    }
    let lambda = run.config.downscale.lambda;
    if lambda > 0.0 {
        let spec = regularizer_spec(run);
        let w = windows(y.len(), target.time().steps_per_year(), run.config.downscale.window_years);
        let k = w.len() as f64;
        for (a, b) in w {
            let stats = ObservedStats::compute(&y[a..b], &[], &spec)?;
            let cl = composite_loss_against(&out[a..b], &[], &stats, &spec, false)?;
            s.quantile += cl.quantile / k;
            s.spectrum += cl.spectrum / k;
            for (gi, d) in g[a..b].iter_mut().zip(&cl.grad_center) {
                *gi += lambda * d / k;
            }
        }
    }
    let spec = &run.config.loss;
    s.total = s.mse + lambda * (spec.quantile_weight * s.quantile + spec.spectrum_weight * s.spectrum);
    if let Some(grad) = grad {
        grad.copy_from_slice(&g);
    }
    Ok(s)
}

fn check_level(run: &TrainingRun<'_>, level: usize) -> Result<()> {
    if run.config.kind != StepKind::Downscale {
        return Err(Error::InvalidConfig("downscaling step on a debiasing run".into()));
    }
    if !run.levels().contains(&level) {
        return Err(Error::InvalidIndex(format!("level {level} is not trained by this run")));
    }
    Ok(())
}

/// Sample-averaged gradient and scores of one center's Step-2 loss.
fn center_gradient(run: &TrainingRun<'_>, c: CenterId, samples: &[Sample<'_>]) -> Result<(Vec<f64>, Score)> {
    let k = samples.len() as f64;
    let ci = run.inputs(c)?;
    let model = &run.bundle(c)?.model;
    let mut grads = vec![0.0; model.params().len()];
    let mut acc = Score::default();
    for sample in samples {
        let steps = sample.inputs.len();
        let x = ci.gather(&sample.inputs)?;
        let mut tape = Tape::monitored(run.monitor());
        let rec = model.record(&mut tape, &x, steps)?;
        let mut seed = vec![0.0; steps];
        let s = score(run, tape.value(rec.output), &sample.target, c, Some(&mut seed))?;
        if !s.total.is_finite() {
            return Err(Error::NonFiniteLoss { center: c, step: run.step });
        }
        tape.backward_with(rec.output, &seed)?;
        for (g, d) in grads.iter_mut().zip(rec.gradient(&tape)) {
            *g += d / k;
        }
        acc.add(&s.scaled(1.0 / k));
    }
    Ok((grads, acc))
}

/// One supervised Step-2 step over every center of `level`: MSE plus the
/// weighted statistical regularizer, averaged over the samples, one tape per
/// center and sample. Centers run on the rayon pool; updates are applied in
/// center order.
pub fn downscale_step(run: &mut TrainingRun<'_>, level: usize, samples: &[Sample<'_>]) -> Result<StepReport> {
    check_level(run, level)?;
    if samples.is_empty() {
        return Err(Error::InvalidConfig("no training samples".into()));
    }
    let centers: Vec<CenterId> = run.centers().filter(|c| c.level == level).collect();
    let run_ref = &*run;
    let results = centers
        .par_iter()
        .map(|&c| center_gradient(run_ref, c, samples))
        .collect::<Vec<_>>();
    let mut agg = Score::default();
    let adam = run.config.optimizer;
    for (&c, r) in centers.iter().zip(results) {
        let (grads, s) = r?;
        agg.add(&s);
        run.bundle_mut(c)?.update(&adam, &grads)?;
    }
    let n = centers.len() as f64;
    let report = StepReport {
        step: run.step,
        level: Some(level),
        loss: agg.total / n,
        quantile: agg.quantile / n,
        spectrum: agg.spectrum / n,
        mse: agg.mse / n,
        validation: None,
    };
    run.step += 1;
    Ok(report)
}

/// Gradient-free Step-2 losses of `level` on `samples`.
pub fn evaluate_downscale(run: &TrainingRun<'_>, level: usize, samples: &[Sample<'_>]) -> Result<EvalReport> {
    check_level(run, level)?;
    if samples.is_empty() {
        return Err(Error::InvalidConfig("nothing to evaluate".into()));
    }
    let k = samples.len() as f64;
    let centers: Vec<CenterId> = run.centers().filter(|c| c.level == level).collect();
    let scores = centers
        .par_iter()
        .map(|&c| {
            let mut acc = Score::default();
            for sample in samples {
                let out = run.predict(c, &sample.inputs)?;
                let s = score(run, &out, &sample.target, c, None)?;
                acc.add(&s.scaled(1.0 / k));
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut agg = Score::default();
    scores.iter().for_each(|s| agg.add(s));
    let per_center: Vec<f64> = scores.iter().map(|s| s.total).collect();
    let n = per_center.len() as f64;
    Ok(EvalReport {
        loss: per_center.iter().sum::<f64>() / n,
        quantile: agg.quantile / n,
        spectrum: agg.spectrum / n,
        mse: agg.mse / n,
        per_center,
    })
}

/// Trains one level with early stopping on the validation samples; the best
/// evaluated models of the level are kept. Levels of the run must be trained
/// in increasing order.
pub fn train_level(
    run: &mut TrainingRun<'_>,
    level: usize,
    train: &[Sample<'_>],
    validation: &[Sample<'_>],
    mut on_step: impl FnMut(&StepReport),
) -> Result<Vec<StepReport>> {
    check_level(run, level)?;
    if level > *run.levels().start() && !run.training_order.contains(&(level - 1)) {
        return Err(Error::MissingLevel(level - 1));
    }
    if run.training_order.contains(&level) {
        return Err(Error::InvalidConfig(format!("level {level} is already trained")));
    }
    let inputs: Vec<DataView<'_>> = train.iter().map(|s| s.inputs).collect();
    let targets: Vec<DataView<'_>> = train.iter().map(|s| s.target).collect();
    run.calibrate_level(level, &inputs, &targets)?;
    let schedule = run.config.schedule;
    let mut reports = Vec::new();
    let mut best: Option<(f64, BTreeMap<CenterId, ModelBundle>)> = None;
    let mut stale = 0;
    for s in 0..schedule.max_steps {
        let mut report = downscale_step(run, level, train)?;
        if !validation.is_empty() && (s + 1) % schedule.eval_every == 0 {
            let val = evaluate_downscale(run, level, validation)?.loss;
            report.validation = Some(val);
            if best.as_ref().is_none_or(|(b, _)| val < *b) {
                let snapshot = run
                    .registry
                    .iter()
                    .filter(|(c, _)| c.level == level)
                    .map(|(c, b)| (*c, b.clone()))
                    .collect();
                best = Some((val, snapshot));
                stale = 0;
            } else {
                stale += 1;
            }
        }
        on_step(&report);
        reports.push(report);
        if stale >= schedule.patience {
            break;
        }
    }
    if let Some((_, kept)) = best {
        run.registry.extend(kept);
    }
    run.training_order.push(level);
    Ok(reports)
}

/// Coarse-to-fine training of every level of a Step-2 run on `source`.
///
/// Levels below the run's first level are read from the observations. While
/// a level is trained, the coarser levels of the run are the predictions of
/// the models trained before it ([`InputMode::Sequential`], passed through
/// `hook` first) or observed coefficients ([`InputMode::GroundTruth`]).
pub fn sequential_level_training(
    run: &mut TrainingRun<'_>,
    dataset: &Dataset,
    splits: &Splits,
    mode: InputMode,
    mut hook: Option<&mut dyn FnMut(usize, &mut LevelSeries)>,
    mut on_step: impl FnMut(&StepReport),
) -> Result<Vec<StepReport>> {
    splits.validate()?;
    let first = *run.levels().start();
    let load = |ranges: &[SampleRange], phase: Phase| -> Result<(Vec<CoefficientPyramid>, Vec<DataView<'_>>)> {
        let views: Vec<DataView<'_>> = ranges.iter().map(|r| dataset.view(r, phase)).collect::<Result<_>>()?;
        Ok((views.iter().map(|v| v.extract(1..=first - 1)).collect(), views))
    };
    let (mut train_in, train_views) = load(&splits.train, Phase::Train)?;
    let (mut val_in, val_views) = load(&splits.validation, Phase::Validation)?;
    let mut reports = Vec::new();
    for level in run.levels() {
        let tr = make_samples(&train_in, &train_views);
        let va = make_samples(&val_in, &val_views);
        let r = train_level(run, level, &tr, &va, &mut on_step)?;
        reports.extend(r);
        drop((tr, va));
        for (inputs, views) in [(&mut train_in, &train_views), (&mut val_in, &val_views)] {
            for (p, v) in inputs.iter_mut().zip(views) {
                let series = match mode {
                    InputMode::Sequential => {
                        let mut s = predict_level(run, level, &DataView::whole(p))?;
                        if let Some(h) = hook.as_mut() {
                            h(level, &mut s);
                        }
                        s
                    }
                    InputMode::GroundTruth => v
                        .extract(level..=level)
                        .remove_level(level)
                        .ok_or(Error::MissingLevel(level))?,
                };
                p.insert_level(series)?;
            }
        }
    }
    Ok(reports)
}

fn make_samples<'a>(inputs: &'a [CoefficientPyramid], targets: &[DataView<'a>]) -> Vec<Sample<'a>> {
    inputs
        .iter()
        .zip(targets)
        .map(|(i, t)| Sample {
            inputs: DataView::whole(i),
            target: *t,
        })
        .collect()
}
