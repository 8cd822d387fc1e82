//! Versioned JSON run configuration.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use wavescale_core::sphere::{build_frame, KernelParams, WaveletFrame};
use wavescale_core::synth::{BiasSpec, ProcessSpec};
use wavescale_core::training::{InputMode, SampleRange, Splits, TrainingConfig};

use crate::error::{CliError, FieldError, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameConfig {
    pub bandlimit: usize,
    pub levels: usize,
    pub transition_start: f64,
}

impl Default for FrameConfig {
    fn default() -> Self {
        FrameConfig {
            bandlimit: 64,
            levels: 6,
            transition_start: KernelParams::default().transition_start,
        }
    }
}

impl FrameConfig {
    pub fn build(&self) -> Result<WaveletFrame> {
        Ok(build_frame(
            self.bandlimit,
            self.levels,
            KernelParams {
                transition_start: self.transition_start,
            },
        )?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub truth: ProcessSpec,
    pub bias: BiasSpec,
    pub years: f64,
    /// Seeds of the biased ensemble members; empty writes the truth only.
    pub members: Vec<u64>,
    /// Levels stored in the written pyramids; `None` stores all of them.
    pub levels: Option<[usize; 2]>,
    /// Also write grid-space field stacks next to the pyramids.
    pub write_fields: bool,
    pub variable: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            truth: ProcessSpec::default(),
            bias: BiasSpec::default(),
            years: 1.0,
            members: Vec::new(),
            levels: None,
            write_fields: true,
            variable: "z".into(),
        }
    }
}

/// Training data manifest. Source names refer to pyramids in the data
/// directory (`<dir>/<source>.json`).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub splits: Splits,
    /// Observations whose statistics the debiasing models are trained to.
    pub target: Option<SampleRange>,
    /// Where fine-level inputs come from during sequential downscaling.
    pub input_mode: InputMode,
}

/// A named point, degrees north and east.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Location {
    pub name: String,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub locations: Vec<Location>,
    /// Welch segment length of the point spectra, in time steps.
    pub psd_segment: usize,
    pub kde_points: usize,
    /// Time indices of the snapshot pairs.
    pub snapshots: Vec<usize>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            locations: Vec::new(),
            psd_segment: 256,
            kde_points: 512,
            snapshots: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub frame: FrameConfig,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            frame: FrameConfig::default(),
            synth: SynthConfig::default(),
            data: DataConfig::default(),
            training: TrainingConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

const SECTIONS: [&str; 6] = ["version", "frame", "synth", "data", "training", "metrics"];

fn section<T: DeserializeOwned + Default>(
    obj: &serde_json::Map<String, serde_json::Value>,
    key: &str,
    errors: &mut Vec<FieldError>,
) -> T {
    let Some(v) = obj.get(key) else {
        return T::default();
    };
    match serde_path_to_error::deserialize::<_, T>(v.clone()) {
        Ok(t) => t,
        Err(e) => {
            let inner = e.path().to_string();
            let path = if inner == "." { key.to_string() } else { format!("{key}.{inner}") };
            errors.push(FieldError {
                path,
                message: e.into_inner().to_string(),
            });
            T::default()
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text)
    }

    /// Parses and validates a document, reporting every violation found.
    pub fn parse(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CliError::config(".", format!("malformed JSON: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| CliError::config(".", "expected a JSON object"))?;
        let mut errors = Vec::new();
        for key in obj.keys() {
            if !SECTIONS.contains(&key.as_str()) {
                errors.push(FieldError {
                    path: key.clone(),
                    message: format!("unknown field, expected one of {}", SECTIONS.join(", ")),
                });
            }
        }
        let version = match obj.get("version") {
            None => {
                errors.push(FieldError {
                    path: "version".into(),
                    message: "missing field".into(),
                });
                0
            }
            Some(v) => match v.as_u64() {
                Some(n) if n == CONFIG_VERSION as u64 => CONFIG_VERSION,
                _ => {
                    errors.push(FieldError {
                        path: "version".into(),
                        message: format!("unsupported version {v}, expected {CONFIG_VERSION}"),
                    });
                    0
                }
            },
        };
        let config = RunConfig {
            version,
            frame: section(obj, "frame", &mut errors),
            synth: section(obj, "synth", &mut errors),
            data: section(obj, "data", &mut errors),
            training: section(obj, "training", &mut errors),
            metrics: section(obj, "metrics", &mut errors),
        };
        if errors.is_empty() {
            config.check(&mut errors);
        }
        if errors.is_empty() {
            Ok(config)
        } else {
            Err(CliError::Config(errors))
        }
    }

    fn check(&self, errors: &mut Vec<FieldError>) {
        let mut push = |path: &str, message: String| {
            errors.push(FieldError {
                path: path.into(),
                message,
            })
        };
        let frame = match self.frame.build() {
            Ok(f) => Some(f),
            Err(e) => {
                push("frame", e.to_string());
                None
            }
        };
        if !(self.synth.years > 0.0 && self.synth.years.is_finite()) {
            push("synth.years", format!("must be positive, got {}", self.synth.years));
        }
        if let Err(e) = self.synth.truth.validate() {
            push("synth.truth", e.to_string());
        }
        if let Err(e) = self.synth.bias.validate() {
            push("synth.bias", e.to_string());
        }
        if let (Some([lo, hi]), Some(f)) = (self.synth.levels, &frame) {
            if lo == 0 || lo > hi || hi > f.n_levels() {
                push("synth.levels", format!("[{lo}, {hi}] outside 1..={}", f.n_levels()));
            }
        }
        if let Some(f) = &frame {
            if let Err(e) = self.training.validate(f) {
                push("training", e.to_string());
            }
        }
        let splits = &self.data.splits;
        if !(splits.train.is_empty() && splits.validation.is_empty() && splits.test.is_empty()) {
            if let Err(e) = splits.validate() {
                push("data.splits", e.to_string());
            }
        }
        if let Some(t) = &self.data.target {
            if t.is_empty() {
                push("data.target", "empty range".into());
            }
        }
        for (i, loc) in self.metrics.locations.iter().enumerate() {
            if let Err(m) = check_location(loc) {
                push(&format!("metrics.locations[{i}]"), m);
            }
            if self.metrics.locations[..i].iter().any(|o| o.name == loc.name) {
                push(&format!("metrics.locations[{i}].name"), format!("duplicate name {:?}", loc.name));
            }
        }
        if self.metrics.psd_segment < 2 {
            push("metrics.psd_segment", "must be at least 2".into());
        }
        if self.metrics.kde_points < 2 {
            push("metrics.kde_points", "must be at least 2".into());
        }
    }

    /// SHA-256 of the canonical serialisation, independent of formatting
    /// and key order of the source document.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(bytes))
    }
}

/// Latitude within `[-90, 90]`, longitude within `[-180, 360]`.
pub fn check_location(loc: &Location) -> core::result::Result<(), String> {
    if !(loc.lat.is_finite() && (-90.0..=90.0).contains(&loc.lat)) {
        return Err(format!("latitude {} of {:?} outside [-90, 90]", loc.lat, loc.name));
    }
    if !(loc.lon.is_finite() && (-180.0..=360.0).contains(&loc.lon)) {
        return Err(format!("longitude {} of {:?} outside [-180, 360]", loc.lon, loc.name));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fields(err: CliError) -> Vec<FieldError> {
        match err {
            CliError::Config(f) => f,
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn minimal_document_uses_defaults() {
        let c = RunConfig::parse(r#"{"version": 1}"#).unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn every_violation_is_listed() {
        let err = RunConfig::parse(
            r#"{"version": 2, "frame": {"bandlimit": "big"}, "metrics": {"kde_pts": 3}, "extra": 1}"#,
        )
        .unwrap_err();
        let f = fields(err);
        let paths: Vec<&str> = f.iter().map(|e| e.path.as_str()).collect();
        assert_eq!(paths, ["extra", "version", "frame.bandlimit", "metrics.kde_pts"]);
        assert!(f[3].message.contains("kde_pts"));
    }

    #[test]
    fn semantic_checks_name_the_field() {
        let err = RunConfig::parse(
            r#"{"version": 1, "synth": {"years": 0},
                "metrics": {"locations": [{"name": "a", "lat": 91, "lon": 0}, {"name": "a", "lat": 0, "lon": 0}]}}"#,
        )
        .unwrap_err();
        let paths: Vec<String> = fields(err).into_iter().map(|e| e.path).collect();
        assert_eq!(paths, ["synth.years", "metrics.locations[0]", "metrics.locations[1].name"]);
    }

    #[test]
    fn malformed_json_is_a_config_error() {
        let err = RunConfig::parse("{").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn hash_ignores_formatting() {
        let a = RunConfig::parse(r#"{"version": 1, "frame": {"levels": 6, "bandlimit": 64}}"#).unwrap();
        let b = RunConfig::parse("{\n  \"frame\": {\"bandlimit\": 64},\n  \"version\": 1\n}").unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig::parse(r#"{"version": 1, "frame": {"bandlimit": 32}}"#).unwrap();
        assert_ne!(a.hash(), c.hash());
    }
}
