use crate::losses::composite_loss_against;
use crate::nn::Tape;
use crate::sphere::CoefficientPyramid;
use rayon::prelude::*;

use crate::{CenterId, Error, Result};

use super::data::{DataView, Dataset, Phase, SampleRange, Splits};
use super::{predict_level, EvalReport, StepKind, StepReport, TrainingRun};

/// Outputs of every center model for every member, from one gradient-free
/// pass. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalSnapshot {
    step: usize,
    members: Vec<CoefficientPyramid>,
}

impl GlobalSnapshot {
    /// Optimization step at which the snapshot was taken.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn members(&self) -> &[CoefficientPyramid] {
        &self.members
    }

    pub fn views(&self) -> Vec<DataView<'_>> {
        self.members.iter().map(DataView::whole).collect()
    }
}

/// Training, validation and target views of a Step-1 run.
pub struct DebiasData<'d> {
    pub train: Vec<DataView<'d>>,
    pub validation: Vec<DataView<'d>>,
    pub target: DataView<'d>,
}

impl<'d> DebiasData<'d> {
    /// Views for every manifest entry; each read is logged under its phase.
    pub fn load(dataset: &'d Dataset, splits: &Splits, target: &SampleRange) -> Result<Self> {
        splits.validate()?;
        let train = splits
            .train
            .iter()
            .map(|r| dataset.view(r, Phase::Train))
            .collect::<Result<_>>()?;
        let target = dataset.view(target, Phase::Target)?;
        let validation = splits
            .validation
            .iter()
            .map(|r| dataset.view(r, Phase::Validation))
            .collect::<Result<_>>()?;
        Ok(DebiasData {
            train,
            validation,
            target,
        })
    }
}

/// Phase (a): every model over every member, without gradients.
pub fn global_pass(run: &TrainingRun<'_>, views: &[DataView<'_>]) -> Result<GlobalSnapshot> {
    if run.config.kind != StepKind::Debias {
        return Err(Error::InvalidConfig("global pass needs a debiasing run".into()));
    }
    let members = views
        .iter()
        .map(|v| {
            let mut p = CoefficientPyramid::new(v.time());
            for j in run.levels() {
                p.insert_level(predict_level(run, j, v)?)?;
            }
            Ok(p)
        })
        .collect::<Result<_>>()?;
    Ok(GlobalSnapshot {
        step: run.step,
        members,
    })
}

/// One Step-1 optimization step.
///
/// After the global pass, every center records its model on a fresh tape
/// per member, scores the output against the observation statistics with
/// neighbor outputs read from the snapshot, and backpropagates. Centers run
/// on the rayon pool (one live tape per worker); optimizer steps on the
/// member-averaged gradients are then applied in (level, ring, index) order.
/// The snapshot is returned alongside the report.
pub fn debias_step(run: &mut TrainingRun<'_>, train: &[DataView<'_>]) -> Result<(StepReport, GlobalSnapshot)> {
    if train.is_empty() {
        return Err(Error::InvalidConfig("no training members".into()));
    }
    let snapshot = global_pass(run, train)?;
    let members = snapshot.views();
    let m = train.len() as f64;
    let centers: Vec<CenterId> = run.centers().collect();
    let run_ref = &*run;
    // Centers only read the snapshot, so their gradients are independent.
    let results = centers
        .par_iter()
        .map(|&c| center_gradient(run_ref, c, train, &members))
        .collect::<Vec<_>>();
    let (mut loss, mut quantile, mut spectrum) = (0.0, 0.0, 0.0);
    let adam = run.config.optimizer;
    for (&c, r) in centers.iter().zip(results) {
        let (grads, parts) = r?;
        loss += parts[0] / m;
        quantile += parts[1] / m;
        spectrum += parts[2] / m;
        run.bundle_mut(c)?.update(&adam, &grads)?;
    }
    let k = centers.len() as f64;
    let report = StepReport {
        step: run.step,
        level: None,
        loss: loss / k,
        quantile: quantile / k,
        spectrum: spectrum / k,
        mse: 0.0,
        validation: None,
    };
    run.step += 1;
    Ok((report, snapshot))
}

/// Member-averaged gradient of one center's composite loss, plus the summed
/// total, quantile and spectrum terms.
fn center_gradient(
    run: &TrainingRun<'_>,
    c: CenterId,
    train: &[DataView<'_>],
    members: &[DataView<'_>],
) -> Result<(Vec<f64>, [f64; 3])> {
    let m = train.len() as f64;
    let ci = run.inputs(c)?;
    let stats = run.target(c)?;
    let model = &run.bundle(c)?.model;
    let mut grads = vec![0.0; model.params().len()];
    let mut parts = [0.0; 3];
    for (view, snap) in train.iter().zip(members) {
        let x = ci.gather(view)?;
        let mut tape = Tape::monitored(run.monitor());
        let rec = model.record(&mut tape, &x, view.len())?;
        let nbrs: Vec<&[f64]> = ci
            .neighbors
            .iter()
            .map(|n| snap.series(n.level, n.index))
            .collect::<Result<_>>()?;
        let cl = composite_loss_against(tape.value(rec.output), &nbrs, stats, &run.config.loss, false)?;
        if !cl.total.is_finite() {
            return Err(Error::NonFiniteLoss { center: c, step: run.step });
        }
        tape.backward_with(rec.output, &cl.grad_center)?;
        for (g, d) in grads.iter_mut().zip(rec.gradient(&tape)) {
            *g += d / m;
        }
        parts[0] += cl.total;
        parts[1] += cl.quantile;
        parts[2] += cl.spectrum;
    }
    Ok((grads, parts))
}

/// Mean composite loss of given output pyramids (one per member) against
/// the run's observation statistics, scored per member and then averaged.
pub fn evaluate_outputs(run: &TrainingRun<'_>, outputs: &[DataView<'_>]) -> Result<EvalReport> {
    if outputs.is_empty() {
        return Err(Error::InvalidConfig("nothing to evaluate".into()));
    }
    let m = outputs.len() as f64;
    let centers: Vec<CenterId> = run.centers().collect();
    let scores = centers
        .par_iter()
        .map(|&c| {
            let ci = run.inputs(c)?;
            let stats = run.target(c)?;
            let mut parts = [0.0; 3];
            for v in outputs {
                let out = v.series(c.level, c.index)?;
                let nbrs: Vec<&[f64]> = ci
                    .neighbors
                    .iter()
                    .map(|n| v.series(n.level, n.index))
                    .collect::<Result<_>>()?;
                let cl = composite_loss_against(out, &nbrs, stats, &run.config.loss, false)?;
                parts[0] += cl.total / m;
                parts[1] += cl.quantile / m;
                parts[2] += cl.spectrum / m;
            }
            Ok(parts)
        })
        .collect::<Result<Vec<_>>>()?;
    let per_center: Vec<f64> = scores.iter().map(|p| p[0]).collect();
    let quantile: f64 = scores.iter().map(|p| p[1]).sum();
    let spectrum: f64 = scores.iter().map(|p| p[2]).sum();
    let k = per_center.len() as f64;
    Ok(EvalReport {
        loss: per_center.iter().sum::<f64>() / k,
        quantile: quantile / k,
        spectrum: spectrum / k,
        mse: 0.0,
        per_center,
    })
}

/// Step-1 training loop: calibration, targets, steps, and early stopping on
/// the validation members' composite loss. The best evaluated models are
/// kept. `on_step` sees every report as it is produced.
pub fn train_debias(
    run: &mut TrainingRun<'_>,
    data: &DebiasData<'_>,
    mut on_step: impl FnMut(&StepReport),
) -> Result<Vec<StepReport>> {
    run.calibrate(&data.train, &data.train)?;
    run.set_targets(&data.target)?;
    let schedule = run.config.schedule;
    let mut reports = Vec::new();
    let mut best: Option<(f64, std::collections::BTreeMap<CenterId, crate::nn::ModelBundle>)> = None;
    let mut stale = 0;
    for s in 0..schedule.max_steps {
        let (mut report, _) = debias_step(run, &data.train)?;
        if !data.validation.is_empty() && (s + 1) % schedule.eval_every == 0 {
            let snap = global_pass(run, &data.validation)?;
            let val = evaluate_outputs(run, &snap.views())?.loss;
            report.validation = Some(val);
            if best.as_ref().is_none_or(|(b, _)| val < *b) {
                best = Some((val, run.registry.clone()));
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
    if let Some((_, registry)) = best {
        run.registry = registry;
    }
    run.training_order.extend(run.levels());
    Ok(reports)
}
