//! End-to-end runs of the `wavescale` binary on a small frame.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_wavescale"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Value {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("JSON summary")
}

fn fail(args: &[&str]) -> (i32, Value) {
    let out = run(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let record: Value = serde_json::from_slice(&out.stderr).expect("JSON error record");
    (out.status.code().unwrap(), record["error"].clone())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const BASE: &str = r#"{
  "version": 1,
  "frame": {"bandlimit": 8, "levels": 3},
  "synth": {"years": 0.25, "members": [11, 12], "bias": {"level_variance": [2.0, 2.0, 2.0]}},
  "data": {
    "splits": {
      "train": [{"source": "member-00", "start": 0, "end": 730}],
      "validation": [{"source": "member-01", "start": 0, "end": 730}]
    },
    "target": {"source": "truth", "start": 0, "end": 730}
  },
  "training": {"kind": "debias", "levels": [1, 3], "schedule": {"max_steps": 3},
               "debias": {"hidden": 2, "residual_width": 2}},
  "metrics": {"locations": [{"name": "a", "lat": 45.0, "lon": 10.0}, {"name": "b", "lat": -30.0, "lon": 200.0}],
              "snapshots": [0, 5]}
}"#;

const DOWNSCALE: &str = r#"{
  "version": 1,
  "frame": {"bandlimit": 8, "levels": 3},
  "data": {
    "splits": {
      "train": [{"source": "truth", "start": 0, "end": 500}],
      "validation": [{"source": "truth", "start": 500, "end": 730}]
    },
    "input_mode": "sequential"
  },
  "training": {"kind": "downscale", "levels": [2, 3], "schedule": {"max_steps": 3},
               "downscale": {"channels": 2, "layers": 1, "kernel": 2, "lambda": 0.1, "window_years": 0.05}}
}"#;

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("run.json");
        std::fs::write(&config, BASE).unwrap();
        let data = root.join("data");
        ok(&["synth", "--config", s(&config), "--out", s(&data)]);
        Fixture {
            _dir: dir,
            root,
            config,
            data,
        }
    }

    fn write(&self, name: &str, text: &str) -> PathBuf {
        let p = self.root.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }
}

#[test]
fn synth_and_transform_round_trip() {
    let f = Fixture::new();
    for name in ["truth", "member-00", "member-01"] {
        assert!(f.data.join(format!("{name}.json")).exists());
        assert!(f.data.join(format!("{name}.stack.json")).exists());
        assert!(f.data.join(format!("{name}.L3.bin")).exists());
    }
    let pyr = f.root.join("t.json");
    let summary = ok(&[
        "transform",
        "--config",
        s(&f.config),
        "--input",
        s(&f.data.join("truth.stack.json")),
        "--out",
        s(&pyr),
    ]);
    let err = summary["round_trip_relative_error"].as_f64().unwrap();
    assert!(err <= 1e-6, "round trip {err}");
    let back = f.root.join("back.json");
    ok(&["transform", "--config", s(&f.config), "--input", s(&pyr), "--out", s(&back), "--inverse"]);
    let (_, a) = wavescale::formats::read_stack(&f.data.join("truth.stack.json")).unwrap();
    let (_, b) = wavescale::formats::read_stack(&back).unwrap();
    let num: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = a.as_slice().iter().map(|x| x * x).sum();
    assert!((num / den).sqrt() <= 1e-6);
}

#[test]
fn coi_lists_the_target_first() {
    let f = Fixture::new();
    let v = ok(&["coi", "--config", s(&f.config), "--level", "3", "--index", "40"]);
    assert_eq!(v["neighbors"][0]["index"], 40);
    assert_eq!(v["neighbors"][0]["distance_deg"], 0.0);
    assert_eq!(v["ancestors"].as_array().unwrap().len(), 2);
    let (code, e) = fail(&["coi", "--config", s(&f.config), "--level", "3", "--index", "4000"]);
    assert_eq!((code, e["kind"].as_str().unwrap()), (3, "data"));
}

#[test]
fn validate_truth_against_itself_and_render() {
    let f = Fixture::new();
    let report = f.root.join("report.json");
    let truth = f.data.join("truth.stack.json");
    let v = ok(&[
        "validate",
        "--config",
        s(&f.config),
        "--truth",
        s(&truth),
        "--candidate",
        s(&truth),
        "--out",
        s(&report),
    ]);
    for d in v["distances"].as_array().unwrap() {
        for key in ["pdf_l1", "psd_log10", "monthly_max_abs", "seasonal_max_abs"] {
            assert_eq!(d["distances"][key].as_f64().unwrap(), 0.0, "{key}");
        }
    }
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["inputs"].as_array().unwrap().len(), 4);
    assert_eq!(r["inputs"][0]["file"], "truth.stack.json");
    assert_eq!(r["config_hash"].as_str().unwrap().len(), 64);

    let (a, b) = (f.root.join("fig-a"), f.root.join("fig-b"));
    ok(&["report", "--report", s(&report), "--out", s(&a)]);
    ok(&["report", "--report", s(&report), "--out", s(&b)]);
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 5 + 3 * 2 + 2 * 2);
    for n in names {
        assert_eq!(std::fs::read(a.join(&n)).unwrap(), std::fs::read(b.join(&n)).unwrap());
    }

    // a pyramid candidate is synthesised onto the grid first
    let v = ok(&[
        "validate",
        "--config",
        s(&f.config),
        "--truth",
        s(&truth),
        "--candidate",
        s(&f.data.join("truth.json")),
        "--out",
        s(&f.root.join("r2.json")),
    ]);
    for d in v["distances"].as_array().unwrap() {
        assert!(d["distances"]["seasonal_max_abs"].as_f64().unwrap() < 1e-9);
    }
}

#[test]
fn debias_train_and_apply() {
    let f = Fixture::new();
    let ckpt = f.root.join("ckpt");
    let v = ok(&["train-debias", "--config", s(&f.config), "--data", s(&f.data), "--out", s(&ckpt)]);
    assert_eq!(v["steps"], 3);
    assert_eq!(v["centers"], 6 + 26 + 114);
    let log = std::fs::read_to_string(ckpt.join("training_log.csv")).unwrap();
    assert!(log.starts_with("step,level,loss,quantile,spectrum,mse,validation,wall_seconds\n"));
    assert_eq!(log.lines().count(), 4);
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(ckpt.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["centers"].as_array().unwrap().len(), 146);
    assert_eq!(manifest["centers"][0]["shape"]["family"], "debias");
    assert_eq!(manifest["centers"][0]["steps"], 3);

    let out = f.root.join("debiased.json");
    let v = ok(&[
        "apply",
        "--config",
        s(&f.config),
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&f.data.join("member-01.json")),
        "--out",
        s(&out),
    ]);
    assert_eq!(v["levels"], serde_json::json!([1, 2, 3]));

    // a missing center file is a data error
    std::fs::remove_file(ckpt.join("L2-000003.bin")).unwrap();
    let (code, e) = fail(&[
        "apply",
        "--config",
        s(&f.config),
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&f.data.join("member-01.json")),
        "--out",
        s(&out),
    ]);
    assert_eq!(code, 3);
    assert!(e["message"].as_str().unwrap().contains("L2-000003.bin"));
}

#[test]
fn downscale_train_and_apply() {
    let f = Fixture::new();
    let config = f.write("down.json", DOWNSCALE);
    let ckpt = f.root.join("down");
    let v = ok(&["train-downscale", "--config", s(&config), "--data", s(&f.data), "--out", s(&ckpt)]);
    assert_eq!(v["levels"], serde_json::json!([2, 3]));
    let coarse = f.root.join("coarse.json");
    {
        let frame = wavescale::RunConfig::load(&config).unwrap().frame.build().unwrap();
        let (_, p) = wavescale::formats::read_pyramid(&f.data.join("truth.json"), &frame).unwrap();
        wavescale::formats::write_pyramid(&coarse, &p.retain_levels(1..=1), &frame, "z").unwrap();
    }
    let out = f.root.join("fine.json");
    let v = ok(&[
        "apply",
        "--config",
        s(&config),
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&coarse),
        "--out",
        s(&out),
    ]);
    assert_eq!(v["levels"], serde_json::json!([1, 2, 3]));
}

#[test]
fn config_errors_are_listed_field_by_field() {
    let f = Fixture::new();
    let bad = f.write(
        "bad.json",
        r#"{"version": 1, "frame": {"bandlimit": -3}, "metrics": {"psd_segment": 256, "colour": 1}}"#,
    );
    let (code, e) = fail(&["coi", "--config", s(&bad), "--level", "1", "--index", "0"]);
    assert_eq!(code, 2);
    assert_eq!(e["kind"], "config");
    let paths: Vec<&str> = e["fields"].as_array().unwrap().iter().map(|f| f["path"].as_str().unwrap()).collect();
    assert_eq!(paths, ["frame.bandlimit", "metrics.colour"]);

    let bad = f.write(
        "bad2.json",
        r#"{"version": 1, "metrics": {"locations": [{"name": "x", "lat": 95.0, "lon": 0.0}]}}"#,
    );
    let (code, e) = fail(&["coi", "--config", s(&bad), "--level", "1", "--index", "0"]);
    assert_eq!(code, 2);
    assert_eq!(e["fields"][0]["path"], "metrics.locations[0]");

    let (code, _) = fail(&["coi", "--config", s(&f.root.join("absent.json")), "--level", "1", "--index", "0"]);
    assert_eq!(code, 3);

    let wrong_kind = f.write("dk.json", &BASE.replace("\"kind\": \"debias\"", "\"kind\": \"downscale\", \"levels_unused\": 0"));
    let (code, e) = fail(&["train-debias", "--config", s(&wrong_kind), "--data", s(&f.data), "--out", s(&f.root.join("x"))]);
    assert_eq!(code, 2);
    assert!(e["fields"][0]["path"].as_str().unwrap().starts_with("training"));
}

#[test]
fn missing_checkpoint_and_dimension_mismatch() {
    let f = Fixture::new();
    let (code, e) = fail(&[
        "apply",
        "--config",
        s(&f.config),
        "--checkpoint",
        s(&f.root.join("nowhere")),
        "--input",
        s(&f.data.join("truth.json")),
        "--out",
        s(&f.root.join("o.json")),
    ]);
    assert_eq!((code, e["kind"].as_str().unwrap()), (3, "data"));

    // a pyramid written for another frame
    let other = f.write("other.json", &BASE.replace("\"levels\": 3}", "\"levels\": 4}").replace("\"bandlimit\": 8", "\"bandlimit\": 16"));
    let (code, e) = fail(&[
        "transform",
        "--config",
        s(&other),
        "--input",
        s(&f.data.join("truth.json")),
        "--out",
        s(&f.root.join("o.json")),
        "--inverse",
    ]);
    assert_eq!(code, 3);
    assert!(e["message"].as_str().unwrap().contains("frame"));

    // a truncated payload
    let bin = f.data.join("member-00.L2.bin");
    let bytes = std::fs::read(&bin).unwrap();
    std::fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
    let (code, _) = fail(&["train-debias", "--config", s(&f.config), "--data", s(&f.data), "--out", s(&f.root.join("c"))]);
    assert_eq!(code, 3);
}

#[test]
fn overflowing_training_data_is_a_numerical_failure() {
    let f = Fixture::new();
    for j in 1..=3 {
        let bin = f.data.join(format!("member-00.L{j}.bin"));
        let bytes = std::fs::read(&bin).unwrap();
        let scaled: Vec<u8> = bytes
            .chunks_exact(8)
            .flat_map(|b| (f64::from_le_bytes(b.try_into().unwrap()) * 1e160).to_le_bytes())
            .collect();
        std::fs::write(&bin, scaled).unwrap();
    }
    let (code, e) = fail(&["train-debias", "--config", s(&f.config), "--data", s(&f.data), "--out", s(&f.root.join("c"))]);
    assert_eq!((code, e["kind"].as_str().unwrap()), (4, "numerical"), "{e}");
}
