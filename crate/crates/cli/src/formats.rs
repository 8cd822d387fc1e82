//! On-disk formats.
//!
//! Every binary payload is a flat array of little-endian `f64` described by
//! a JSON sidecar. Relative file names inside a sidecar are resolved
//! against the sidecar's directory.
//!
//! - Field stack: one `.bin` in time-major order `[t][ring][lon]`.
//! - Pyramid: one `.bin` per level in center-major order `[center][t]`,
//!   center coordinates (degrees) listed in the sidecar.
//! - Checkpoint: a directory with `manifest.json` and one `.bin` per center
//!   holding `params | input_scale | output_scale | adam.m | adam.v`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use wavescale_core::nn::{AdamState, CenterModel, DebiasModel, DebiasShape, DownscaleModel, DownscaleShape, ModelBundle};
use wavescale_core::sphere::{CoefficientPyramid, FieldStack, LevelSeries, SphericalGrid, TimeAxis, WaveletFrame};
use wavescale_core::training::{StepKind, StepReport, TrainingConfig};
use wavescale_core::CenterId;

use crate::config::FrameConfig;
use crate::error::{CliError, Result};

pub const FORMAT_VERSION: u32 = 1;
const STACK_FORMAT: &str = "wavescale-field-stack";
const PYRAMID_FORMAT: &str = "wavescale-pyramid";
const CHECKPOINT_FORMAT: &str = "wavescale-checkpoint";

pub fn write_f64s(path: &Path, values: &[f64]) -> Result<()> {
    let file = File::create(path).map_err(|e| CliError::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    for v in values {
        w.write_all(&v.to_le_bytes())
            .map_err(|e| CliError::io(format!("writing {}", path.display()), e))?;
    }
    w.flush().map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

/// Reads exactly `count` values.
pub fn read_f64s(path: &Path, count: usize) -> Result<Vec<f64>> {
    let file = File::open(path).map_err(|e| CliError::io(format!("opening {}", path.display()), e))?;
    let len = file
        .metadata()
        .map_err(|e| CliError::io(format!("reading {}", path.display()), e))?
        .len();
    if len != 8 * count as u64 {
        return Err(CliError::Data(format!(
            "{} holds {len} bytes, expected {} ({count} values)",
            path.display(),
            8 * count
        )));
    }
    let mut r = BufReader::with_capacity(1 << 16, file);
    let mut out = Vec::with_capacity(count);
    let mut buf = vec![0u8; 1 << 16];
    while out.len() < count {
        let n = (count - out.len()).min(buf.len() / 8);
        r.read_exact(&mut buf[..8 * n])
            .map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
        out.extend(
            buf[..8 * n]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))),
        );
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serialisable");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    let mut de = serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(&mut de)
        .map_err(|e| CliError::Data(format!("{}: invalid field {}: {}", path.display(), e.path(), e.inner())))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = File::open(path).map_err(|e| CliError::io(format!("opening {}", path.display()), e))?;
    let mut hasher = Sha256::new();
    std::io::copy(&mut file, &mut hasher).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    Ok(hex::encode(hasher.finalize()))
}

fn sibling(sidecar: &Path, name: &str) -> PathBuf {
    sidecar.parent().unwrap_or(Path::new(".")).join(name)
}

fn stem(sidecar: &Path) -> String {
    sidecar
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
    }
    Ok(())
}

fn check_format(path: &Path, found: &str, want: &str, version: u32) -> Result<()> {
    if found != want {
        return Err(CliError::Data(format!("{}: expected a {want} sidecar, found {found:?}", path.display())));
    }
    if version != FORMAT_VERSION {
        return Err(CliError::Data(format!("{}: unsupported format version {version}", path.display())));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackHeader {
    pub format: String,
    pub version: u32,
    pub variable: String,
    pub n_lat: usize,
    pub n_lon: usize,
    pub n_times: usize,
    pub start_seconds: i64,
    pub time_step_seconds: i64,
    pub bandlimit: usize,
    pub data_file: String,
}

impl StackHeader {
    pub fn time(&self) -> TimeAxis {
        TimeAxis {
            start_seconds: self.start_seconds,
            step_seconds: self.time_step_seconds,
            count: self.n_times,
        }
    }
}

/// Writes `<path>` and the payload `<stem>.bin` next to it.
pub fn write_stack(path: &Path, stack: &FieldStack, variable: &str, bandlimit: usize) -> Result<StackHeader> {
    ensure_parent(path)?;
    let time = stack.time();
    let header = StackHeader {
        format: STACK_FORMAT.into(),
        version: FORMAT_VERSION,
        variable: variable.into(),
        n_lat: stack.grid().n_lat(),
        n_lon: stack.grid().n_lon(),
        n_times: time.count,
        start_seconds: time.start_seconds,
        time_step_seconds: time.step_seconds,
        bandlimit,
        data_file: format!("{}.bin", stem(path)),
    };
    write_f64s(&sibling(path, &header.data_file), stack.as_slice())?;
    write_json(path, &header)?;
    Ok(header)
}

pub fn read_stack(path: &Path) -> Result<(StackHeader, FieldStack)> {
    let header: StackHeader = read_json(path)?;
    check_format(path, &header.format, STACK_FORMAT, header.version)?;
    let grid = SphericalGrid::equiangular(header.n_lat, header.n_lon)?;
    let data = read_f64s(&sibling(path, &header.data_file), header.n_lat * header.n_lon * header.n_times)?;
    let stack = FieldStack::new(grid, header.time(), data)?;
    Ok((header, stack))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelEntry {
    pub level: usize,
    pub n_centers: usize,
    pub data_file: String,
    /// `[lat, lon]` of every center, degrees.
    pub centers: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PyramidHeader {
    pub format: String,
    pub version: u32,
    pub variable: String,
    pub frame: FrameConfig,
    pub n_times: usize,
    pub start_seconds: i64,
    pub time_step_seconds: i64,
    pub levels: Vec<LevelEntry>,
}

impl PyramidHeader {
    pub fn time(&self) -> TimeAxis {
        TimeAxis {
            start_seconds: self.start_seconds,
            step_seconds: self.time_step_seconds,
            count: self.n_times,
        }
    }
}

pub fn frame_config(frame: &WaveletFrame) -> FrameConfig {
    FrameConfig {
        bandlimit: frame.bandlimit(),
        levels: frame.n_levels(),
        transition_start: frame.params().transition_start,
    }
}

/// Writes `<path>` and one payload `<stem>.L<j>.bin` per level.
pub fn write_pyramid(path: &Path, pyramid: &CoefficientPyramid, frame: &WaveletFrame, variable: &str) -> Result<PyramidHeader> {
    pyramid.check_frame(frame)?;
    ensure_parent(path)?;
    let time = pyramid.time();
    let base = stem(path);
    let mut levels = Vec::new();
    for lvl in pyramid.levels() {
        let j = lvl.level();
        let data_file = format!("{base}.L{j}.bin");
        write_f64s(&sibling(path, &data_file), lvl.as_slice())?;
        let centers = (0..lvl.n_centers())
            .map(|i| {
                let (lat, lon) = frame.center_latlon(CenterId::new(j, i));
                [lat.to_degrees(), lon.to_degrees()]
            })
            .collect();
        levels.push(LevelEntry {
            level: j,
            n_centers: lvl.n_centers(),
            data_file,
            centers,
        });
    }
    let header = PyramidHeader {
        format: PYRAMID_FORMAT.into(),
        version: FORMAT_VERSION,
        variable: variable.into(),
        frame: frame_config(frame),
        n_times: time.count,
        start_seconds: time.start_seconds,
        time_step_seconds: time.step_seconds,
        levels,
    };
    write_json(path, &header)?;
    Ok(header)
}

pub fn read_pyramid_header(path: &Path) -> Result<PyramidHeader> {
    let header: PyramidHeader = read_json(path)?;
    check_format(path, &header.format, PYRAMID_FORMAT, header.version)?;
    Ok(header)
}

/// Reads a pyramid and checks it against `frame`.
pub fn read_pyramid(path: &Path, frame: &WaveletFrame) -> Result<(PyramidHeader, CoefficientPyramid)> {
    let header = read_pyramid_header(path)?;
    if header.frame != frame_config(frame) {
        return Err(CliError::Data(format!(
            "{} was written for frame {:?}, the run uses {:?}",
            path.display(),
            header.frame,
            frame_config(frame)
        )));
    }
    let mut pyramid = CoefficientPyramid::new(header.time());
    for entry in &header.levels {
        if entry.level == 0 || entry.level > frame.n_levels() || entry.n_centers != frame.center_count(entry.level) {
            return Err(CliError::Data(format!(
                "{}: level {} with {} centers does not fit the frame",
                path.display(),
                entry.level,
                entry.n_centers
            )));
        }
        let data = read_f64s(&sibling(path, &entry.data_file), entry.n_centers * header.n_times)?;
        pyramid.insert_level(LevelSeries::from_center_major(entry.level, entry.n_centers, header.n_times, data)?)?;
    }
    Ok((header, pyramid))
}

/// Kind of a data sidecar, read from its `format` field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    FieldStack,
    Pyramid,
}

pub fn sniff(path: &Path) -> Result<DataKind> {
    #[derive(Deserialize)]
    struct Probe {
        format: String,
    }
    let probe: Probe = read_json(path)?;
    match probe.format.as_str() {
        STACK_FORMAT => Ok(DataKind::FieldStack),
        PYRAMID_FORMAT => Ok(DataKind::Pyramid),
        other => Err(CliError::Data(format!("{}: unknown format {other:?}", path.display()))),
    }
}

/// Files a sidecar refers to, sidecar first.
pub fn data_files(path: &Path) -> Result<Vec<PathBuf>> {
    let mut files = vec![path.to_path_buf()];
    match sniff(path)? {
        DataKind::FieldStack => {
            let h: StackHeader = read_json(path)?;
            files.push(sibling(path, &h.data_file));
        }
        DataKind::Pyramid => {
            let h = read_pyramid_header(path)?;
            files.extend(h.levels.iter().map(|l| sibling(path, &l.data_file)));
        }
    }
    Ok(files)
}

/// Shapes of a center model, tagged by family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelShape {
    Debias(DebiasShape),
    Downscale(DownscaleShape),
}

impl ModelShape {
    fn n_params(&self) -> usize {
        match self {
            ModelShape::Debias(s) => s.n_params(),
            ModelShape::Downscale(s) => s.n_params(),
        }
    }

    fn input_width(&self) -> usize {
        match self {
            ModelShape::Debias(s) => s.input_width,
            ModelShape::Downscale(s) => s.input_width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CenterEntry {
    pub level: usize,
    pub index: usize,
    pub file: String,
    pub shape: ModelShape,
    pub seed: u64,
    /// Optimizer updates applied to this center.
    pub steps: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub kind: StepKind,
    pub frame: FrameConfig,
    pub training: TrainingConfig,
    pub config_hash: String,
    /// Training steps taken by the run.
    pub step: usize,
    pub training_order: Vec<usize>,
    pub centers: Vec<CenterEntry>,
}

fn center_file(c: CenterId) -> String {
    format!("L{}-{:06}.bin", c.level, c.index)
}

fn center_payload(b: &ModelBundle) -> (ModelShape, Vec<f64>) {
    let (shape, params, input_scale, output_scale) = match &b.model {
        CenterModel::Debias(m) => (ModelShape::Debias(m.shape), &m.params, &m.input_scale, m.output_scale),
        CenterModel::Downscale(m) => (ModelShape::Downscale(m.shape), &m.params, &m.input_scale, m.output_scale),
    };
    let mut data = Vec::with_capacity(3 * params.len() + input_scale.len() + 1);
    data.extend_from_slice(params);
    data.extend_from_slice(input_scale);
    data.push(output_scale);
    data.extend_from_slice(&b.optimizer.m);
    data.extend_from_slice(&b.optimizer.v);
    (shape, data)
}

/// Writes a checkpoint directory. Stale center files of an earlier
/// checkpoint in the same directory are not removed.
pub fn write_checkpoint(
    dir: &Path,
    frame: &WaveletFrame,
    training: &TrainingConfig,
    config_hash: &str,
    step: usize,
    training_order: &[usize],
    registry: &BTreeMap<CenterId, ModelBundle>,
) -> Result<CheckpointManifest> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
    let mut centers = Vec::with_capacity(registry.len());
    for (c, b) in registry {
        let (shape, data) = center_payload(b);
        let file = center_file(*c);
        let path = dir.join(&file);
        write_f64s(&path, &data)?;
        centers.push(CenterEntry {
            level: c.level,
            index: c.index,
            file,
            shape,
            seed: b.seed,
            steps: b.optimizer.steps,
            sha256: sha256_file(&path)?,
        });
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: FORMAT_VERSION,
        kind: training.kind,
        frame: frame_config(frame),
        training: training.clone(),
        config_hash: config_hash.into(),
        step,
        training_order: training_order.to_vec(),
        centers,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn read_checkpoint(dir: &Path) -> Result<(CheckpointManifest, BTreeMap<CenterId, ModelBundle>)> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(CliError::Data(format!("no checkpoint manifest at {}", path.display())));
    }
    let manifest: CheckpointManifest = read_json(&path)?;
    check_format(&path, &manifest.format, CHECKPOINT_FORMAT, manifest.version)?;
    let mut registry = BTreeMap::new();
    for e in &manifest.centers {
        let c = CenterId::new(e.level, e.index);
        let n = e.shape.n_params();
        let w = e.shape.input_width();
        let file = dir.join(&e.file);
        if !file.exists() {
            return Err(CliError::Data(format!("missing checkpoint file {} for center {c}", file.display())));
        }
        let data = read_f64s(&file, 3 * n + w + 1)?;
        let params = data[..n].to_vec();
        let input_scale = data[n..n + w].to_vec();
        let output_scale = data[n + w];
        let optimizer = AdamState {
            m: data[n + w + 1..2 * n + w + 1].to_vec(),
            v: data[2 * n + w + 1..].to_vec(),
            steps: e.steps,
        };
        let model = match e.shape {
            ModelShape::Debias(shape) => CenterModel::Debias(DebiasModel {
                shape,
                params,
                input_scale,
                output_scale,
            }),
            ModelShape::Downscale(shape) => CenterModel::Downscale(DownscaleModel {
                shape,
                params,
                input_scale,
                output_scale,
            }),
        };
        registry.insert(
            c,
            ModelBundle {
                center: c,
                model,
                optimizer,
                seed: e.seed,
            },
        );
    }
    Ok((manifest, registry))
}

/// Training log with a fixed column order.
pub struct TrainingLog {
    writer: csv::Writer<File>,
    started: std::time::Instant,
}

impl TrainingLog {
    pub const HEADER: [&'static str; 8] = ["step", "level", "loss", "quantile", "spectrum", "mse", "validation", "wall_seconds"];

    pub fn create(path: &Path) -> Result<Self> {
        ensure_parent(path)?;
        let file = File::create(path).map_err(|e| CliError::io(format!("creating {}", path.display()), e))?;
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record(Self::HEADER).map_err(csv_err)?;
        Ok(TrainingLog {
            writer,
            started: std::time::Instant::now(),
        })
    }

    pub fn record(&mut self, r: &StepReport) -> Result<()> {
        let opt = |v: Option<String>| v.unwrap_or_default();
        self.writer
            .write_record([
                r.step.to_string(),
                opt(r.level.map(|l| l.to_string())),
                r.loss.to_string(),
                r.quantile.to_string(),
                r.spectrum.to_string(),
                r.mse.to_string(),
                opt(r.validation.map(|v| v.to_string())),
                format!("{:.3}", self.started.elapsed().as_secs_f64()),
            ])
            .map_err(csv_err)?;
        self.writer.flush().map_err(|e| CliError::io("writing training log", e))
    }
}

pub fn csv_err(e: csv::Error) -> CliError {
    CliError::Data(format!("csv: {e}"))
}
