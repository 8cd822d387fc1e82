//! Command implementations. Each returns a JSON summary for stdout.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use wavescale_core::sphere::{cone_of_influence, FieldStack, FrameTransform, SphericalGrid, TimeAxis, WaveletFrame};
use wavescale_core::synth::{apply_bias, apply_bias_pyramids, generate_pyramid, generate_with_time};
use wavescale_core::training::{
    check_split_hygiene, sequential_level_training, train_debias, Dataset, DebiasData, StepKind, StepReport, TrainingRun,
};
use wavescale_core::CenterId;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::formats::{
    data_files, read_checkpoint, read_json, read_pyramid, read_stack, sha256_file, sniff, write_checkpoint, write_json,
    write_pyramid, write_stack, DataKind, TrainingLog,
};
use crate::report::{build_report, render, InputDigest, MetricReport, REPORT_FORMAT};

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn relative_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

fn synth_time(cfg: &RunConfig) -> Result<TimeAxis> {
    let steps = TimeAxis::steps_for_years(cfg.synth.years, TimeAxis::THREE_HOURS);
    if steps < 2 {
        return Err(CliError::config("synth.years", format!("{} years give fewer than 2 steps", cfg.synth.years)));
    }
    Ok(TimeAxis::three_hourly(TimeAxis::DEFAULT_START, steps))
}

/// Writes the truth and every biased member as pyramids (`<name>.json`)
/// and, when enabled, field stacks (`<name>.stack.json`).
pub fn synth(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let frame = cfg.frame.build()?;
    let s = &cfg.synth;
    let time = synth_time(cfg)?;
    let levels = s.levels.map(|[a, b]| a..=b).unwrap_or(1..=frame.n_levels());
    let mut written = Vec::new();
    let mut emit = |name: &str, stack: Option<&FieldStack>, pyr: &wavescale_core::sphere::CoefficientPyramid| -> Result<()> {
        if let Some(st) = stack {
            let p = out.join(format!("{name}.stack.json"));
            write_stack(&p, st, &s.variable, frame.bandlimit())?;
            written.push(display(&p));
        }
        let p = out.join(format!("{name}.json"));
        write_pyramid(&p, pyr, &frame, &s.variable)?;
        written.push(display(&p));
        Ok(())
    };
    if s.write_fields {
        let (stack, pyr) = generate_with_time(&s.truth, None, &frame, time)?;
        emit("truth", Some(&stack), &pyr.retain_levels(levels.clone()))?;
        drop(stack);
        for (k, &seed) in s.members.iter().enumerate() {
            let stack = apply_bias(&s.truth, &s.bias, &frame, time, &[seed])?.remove(0);
            let pyr = FrameTransform::new(&frame, stack.grid())?.analyze_levels(&stack, levels.clone())?;
            emit(&format!("member-{k:02}"), Some(&stack), &pyr)?;
        }
    } else {
        let pyr = generate_pyramid(&s.truth, None, &frame, levels.clone(), time)?;
        emit("truth", None, &pyr)?;
        for (k, &seed) in s.members.iter().enumerate() {
            let pyr = apply_bias_pyramids(&s.truth, &s.bias, &frame, levels.clone(), time, &[seed])?.remove(0);
            emit(&format!("member-{k:02}"), None, &pyr)?;
        }
    }
    Ok(json!({"command": "synth", "time_steps": time.count, "written": written}))
}

/// Forward: field stack to pyramid, reporting the round-trip error of
/// synthesising the pyramid back. Inverse: pyramid to field stack on the
/// smallest grid resolving the frame bandlimit.
pub fn transform(cfg: &RunConfig, input: &Path, out: &Path, inverse: bool) -> Result<Value> {
    let frame = cfg.frame.build()?;
    if inverse {
        let (h, pyr) = read_pyramid(input, &frame)?;
        let grid = SphericalGrid::for_bandlimit(frame.bandlimit());
        let stack = FrameTransform::new(&frame, &grid)?.synthesize(&pyr)?;
        write_stack(out, &stack, &h.variable, frame.bandlimit())?;
        return Ok(json!({"command": "transform", "direction": "inverse", "output": display(out)}));
    }
    let (h, stack) = read_stack(input)?;
    let mut tr = FrameTransform::new(&frame, stack.grid())?;
    let pyr = tr.analyze_levels(&stack, 1..=frame.n_levels())?;
    write_pyramid(out, &pyr, &frame, &h.variable)?;
    let back = tr.synthesize(&pyr)?;
    let err = relative_l2(back.as_slice(), stack.as_slice());
    Ok(json!({
        "command": "transform",
        "direction": "forward",
        "output": display(out),
        "round_trip_relative_error": err,
    }))
}

pub fn coi(cfg: &RunConfig, level: usize, index: usize) -> Result<Value> {
    let frame = cfg.frame.build()?;
    let cone = cone_of_influence(&frame, CenterId::new(level, index), &cfg.training.cone)?;
    let (lat0, lon0) = frame.center_latlon(cone.target);
    let describe = |c: &CenterId| {
        let (lat, lon) = frame.center_latlon(*c);
        json!({
            "level": c.level,
            "index": c.index,
            "lat": lat.to_degrees(),
            "lon": lon.to_degrees(),
            "distance_deg": wavescale_core::sphere::great_circle_distance(lat0, lon0, lat, lon).to_degrees(),
        })
    };
    Ok(json!({
        "command": "coi",
        "target": describe(&cone.target),
        "neighbors": cone.neighbors.iter().map(describe).collect::<Vec<_>>(),
        "ancestors": cone.ancestors.iter().map(describe).collect::<Vec<_>>(),
    }))
}

fn require_kind(cfg: &RunConfig, kind: StepKind) -> Result<()> {
    if cfg.training.kind != kind {
        let want = serde_json::to_value(kind).expect("serialisable");
        return Err(CliError::config("training.kind", format!("this command needs kind {want}")));
    }
    Ok(())
}

fn load_dataset(cfg: &RunConfig, frame: &WaveletFrame, dir: &Path) -> Result<Dataset> {
    let splits = &cfg.data.splits;
    let names: BTreeSet<&str> = splits
        .train
        .iter()
        .chain(&splits.validation)
        .chain(&splits.test)
        .chain(cfg.data.target.iter())
        .map(|r| r.source.as_str())
        .collect();
    if names.is_empty() {
        return Err(CliError::config("data.splits", "no training data"));
    }
    let mut ds = Dataset::new();
    for name in names {
        let (_, pyr) = read_pyramid(&dir.join(format!("{name}.json")), frame)?;
        ds.insert(name, pyr);
    }
    Ok(ds)
}

fn log_path(out: &Path, log: Option<&Path>) -> PathBuf {
    log.map(Path::to_path_buf).unwrap_or_else(|| out.join("training_log.csv"))
}

fn train_summary(command: &str, run: &TrainingRun<'_>, reports: &[StepReport], out: &Path) -> Value {
    let best = reports.iter().filter_map(|r| r.validation).fold(f64::INFINITY, f64::min);
    json!({
        "command": command,
        "checkpoint": display(out),
        "steps": reports.len(),
        "final_loss": reports.last().map(|r| r.loss),
        "best_validation": best.is_finite().then_some(best),
        "centers": run.registry.len(),
        "levels": run.training_order,
    })
}

/// Runs `body` with a step callback that appends to the training log and
/// surfaces the first logging failure afterwards.
fn with_log<T>(path: &Path, body: impl FnOnce(&mut dyn FnMut(&StepReport)) -> Result<T>) -> Result<T> {
    let mut log = TrainingLog::create(path)?;
    let mut failure = None;
    let result = body(&mut |r: &StepReport| {
        if failure.is_none() {
            failure = log.record(r).err();
        }
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(result),
    }
}

pub fn train_debias_cmd(cfg: &RunConfig, data: &Path, out: &Path, log: Option<&Path>) -> Result<Value> {
    require_kind(cfg, StepKind::Debias)?;
    let target = cfg
        .data
        .target
        .as_ref()
        .ok_or_else(|| CliError::config("data.target", "debiasing needs an observation target"))?;
    let frame = cfg.frame.build()?;
    let dataset = load_dataset(cfg, &frame, data)?;
    let mut run = TrainingRun::new(&frame, cfg.training.clone())?;
    let splits = &cfg.data.splits;
    let reports = with_log(&log_path(out, log), |on_step| {
        let d = DebiasData::load(&dataset, splits, target)?;
        Ok(train_debias(&mut run, &d, on_step)?)
    })?;
    check_split_hygiene(&dataset.access_log(), splits)?;
    write_checkpoint(out, &frame, &run.config, &cfg.hash(), run.step, &run.training_order, &run.registry)?;
    Ok(train_summary("train-debias", &run, &reports, out))
}

pub fn train_downscale_cmd(cfg: &RunConfig, data: &Path, out: &Path, log: Option<&Path>) -> Result<Value> {
    require_kind(cfg, StepKind::Downscale)?;
    let frame = cfg.frame.build()?;
    let dataset = load_dataset(cfg, &frame, data)?;
    let mut run = TrainingRun::new(&frame, cfg.training.clone())?;
    let splits = &cfg.data.splits;
    let reports = with_log(&log_path(out, log), |on_step| {
        Ok(sequential_level_training(
            &mut run,
            &dataset,
            splits,
            cfg.data.input_mode,
            None,
            on_step,
        )?)
    })?;
    check_split_hygiene(&dataset.access_log(), splits)?;
    write_checkpoint(out, &frame, &run.config, &cfg.hash(), run.step, &run.training_order, &run.registry)?;
    Ok(train_summary("train-downscale", &run, &reports, out))
}

pub fn apply(cfg: &RunConfig, checkpoint: &Path, input: &Path, out: &Path) -> Result<Value> {
    let frame = cfg.frame.build()?;
    let (manifest, registry) = read_checkpoint(checkpoint)?;
    if manifest.frame != cfg.frame {
        return Err(CliError::Data(format!(
            "checkpoint frame {:?} differs from the configured {:?}",
            manifest.frame, cfg.frame
        )));
    }
    let run = TrainingRun::from_registry(&frame, manifest.training.clone(), registry)?;
    let (h, pyr) = read_pyramid(input, &frame)?;
    let result = run.apply(&pyr)?;
    write_pyramid(out, &result, &frame, &h.variable)?;
    Ok(json!({"command": "apply", "output": display(out), "levels": result.level_indices()}))
}

/// Loads a field stack, or synthesises a pyramid on the frame's grid.
pub fn load_fields(path: &Path, frame: &WaveletFrame) -> Result<(String, FieldStack)> {
    match sniff(path)? {
        DataKind::FieldStack => {
            let (h, s) = read_stack(path)?;
            Ok((h.variable, s))
        }
        DataKind::Pyramid => {
            let (h, pyr) = read_pyramid(path, frame)?;
            let grid = SphericalGrid::for_bandlimit(frame.bandlimit());
            Ok((h.variable, FrameTransform::new(frame, &grid)?.synthesize(&pyr)?))
        }
    }
}

fn digests(role: &str, path: &Path) -> Result<Vec<InputDigest>> {
    data_files(path)?
        .iter()
        .map(|f| {
            Ok(InputDigest {
                role: role.into(),
                file: f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
                sha256: sha256_file(f)?,
            })
        })
        .collect()
}

pub fn validate(cfg: &RunConfig, truth: &Path, candidate: Option<&Path>, out: &Path) -> Result<Value> {
    if cfg.metrics.locations.is_empty() {
        return Err(CliError::config("metrics.locations", "validation needs at least one location"));
    }
    let frame = cfg.frame.build()?;
    let (variable, t) = load_fields(truth, &frame)?;
    let mut inputs = digests("truth", truth)?;
    let c = match candidate {
        Some(p) => {
            inputs.extend(digests("candidate", p)?);
            Some(load_fields(p, &frame)?.1)
        }
        None => None,
    };
    let report = build_report(&cfg.metrics, &cfg.hash(), &variable, &t, c.as_ref(), inputs)?;
    write_json(out, &report)?;
    let distances: Vec<Value> = report
        .locations
        .iter()
        .filter_map(|l| l.distances.map(|d| json!({"location": l.location.name, "distances": d})))
        .collect();
    Ok(json!({"command": "validate", "report": display(out), "distances": distances}))
}

pub fn report(input: &Path, out: &Path) -> Result<Value> {
    let r: MetricReport = read_json(input)?;
    if r.format != REPORT_FORMAT {
        return Err(CliError::Data(format!("{}: not a metric report", input.display())));
    }
    let files = render(&r, out)?;
    Ok(json!({"command": "report", "written": files.iter().map(|p| display(p)).collect::<Vec<_>>()}))
}
