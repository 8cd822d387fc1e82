//! Metric reports and their CSV/SVG rendering.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use wavescale_core::sphere::{FieldStack, TimeAxis};

use crate::config::{Location, MetricsConfig};
use crate::error::{CliError, Result};
use crate::formats::csv_err;
use crate::metrics::{compare_series, location_series, series_statistics, Distances, PointStatistics};
use crate::svg::{heatmap, Band, Chart, Scale, Series, PALETTE};

pub const REPORT_FORMAT: &str = "wavescale-metric-report";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub role: String,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationReport {
    pub location: Location,
    pub truth: PointStatistics,
    pub candidate: Option<PointStatistics>,
    pub distances: Option<Distances>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotPair {
    pub time_index: usize,
    pub timestamp: i64,
    pub n_lat: usize,
    pub n_lon: usize,
    pub truth: Vec<f64>,
    pub candidate: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub variable: String,
    pub time: TimeAxis,
    pub inputs: Vec<InputDigest>,
    pub locations: Vec<LocationReport>,
    pub snapshots: Vec<SnapshotPair>,
}

/// Statistics of `truth` (and `candidate`, when given) at the configured
/// locations and snapshot times.
pub fn build_report(
    settings: &MetricsConfig,
    config_hash: &str,
    variable: &str,
    truth: &FieldStack,
    candidate: Option<&FieldStack>,
    inputs: Vec<InputDigest>,
) -> Result<MetricReport> {
    if let Some(c) = candidate {
        if c.grid() != truth.grid() || c.time() != truth.time() {
            return Err(CliError::Data(format!(
                "candidate ({}x{}, {} steps) does not match truth ({}x{}, {} steps)",
                c.grid().n_lat(),
                c.grid().n_lon(),
                c.time().count,
                truth.grid().n_lat(),
                truth.grid().n_lon(),
                truth.time().count
            )));
        }
    }
    let time = *truth.time();
    let locations = settings
        .locations
        .par_iter()
        .map(|loc| -> Result<LocationReport> {
            let t = location_series(truth, loc)?;
            match candidate {
                None => Ok(LocationReport {
                    location: loc.clone(),
                    truth: series_statistics(&t, &time, settings)?,
                    candidate: None,
                    distances: None,
                }),
                Some(c) => {
                    let cs = location_series(c, loc)?;
                    let (ts, cs, d) = compare_series(&t, &cs, &time, settings)?;
                    Ok(LocationReport {
                        location: loc.clone(),
                        truth: ts,
                        candidate: Some(cs),
                        distances: Some(d),
                    })
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut snapshots = Vec::new();
    for &t in &settings.snapshots {
        if t >= time.count {
            return Err(CliError::Data(format!("snapshot {t} outside the {} time steps", time.count)));
        }
        snapshots.push(SnapshotPair {
            time_index: t,
            timestamp: time.timestamp(t),
            n_lat: truth.grid().n_lat(),
            n_lon: truth.grid().n_lon(),
            truth: truth.snapshot(t).to_vec(),
            candidate: candidate.map(|c| c.snapshot(t).to_vec()),
        });
    }
    Ok(MetricReport {
        format: REPORT_FORMAT.into(),
        version: crate::formats::FORMAT_VERSION,
        config_hash: config_hash.into(),
        variable: variable.into(),
        time,
        inputs,
        locations,
        snapshots,
    })
}

fn file_safe(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

struct Csv {
    path: PathBuf,
    writer: csv::Writer<Vec<u8>>,
}

impl Csv {
    fn new(dir: &Path, name: &str, header: &[&str]) -> Result<Self> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(header).map_err(csv_err)?;
        Ok(Csv {
            path: dir.join(name),
            writer,
        })
    }

    fn row(&mut self, fields: &[String]) -> Result<()> {
        self.writer.write_record(fields).map_err(csv_err)
    }

    fn finish(self) -> Result<PathBuf> {
        let bytes = self.writer.into_inner().map_err(|e| CliError::Data(format!("csv: {e}")))?;
        write_file(&self.path, bytes.as_slice())?;
        Ok(self.path)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn sources(l: &LocationReport) -> Vec<(&'static str, &PointStatistics)> {
    let mut s = vec![("truth", &l.truth)];
    if let Some(c) = &l.candidate {
        s.push(("candidate", c));
    }
    s
}

/// Writes the CSV tables and SVG figures of a report into `dir` and
/// returns the written paths in order.
pub fn render(report: &MetricReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
    let mut written = Vec::new();

    let mut pdf = Csv::new(dir, "pdf.csv", &["location", "source", "x", "density"])?;
    let mut psd = Csv::new(dir, "psd.csv", &["location", "source", "frequency_per_day", "density"])?;
    let mut monthly = Csv::new(dir, "monthly_quantiles.csv", &["location", "source", "month", "count", "q10", "q50", "q90"])?;
    let mut seasonal = Csv::new(dir, "seasonal_means.csv", &["location", "source", "season", "count", "mean"])?;
    let mut dist = Csv::new(
        dir,
        "distances.csv",
        &["location", "pdf_l1", "psd_log10", "monthly_max_abs", "seasonal_max_abs"],
    )?;
    for l in &report.locations {
        let name = &l.location.name;
        for (src, s) in sources(l) {
            for (x, d) in s.pdf.x.iter().zip(&s.pdf.density) {
                pdf.row(&[name.clone(), src.into(), x.to_string(), d.to_string()])?;
            }
            for (f, d) in s.psd.frequency_per_day.iter().zip(&s.psd.density) {
                psd.row(&[name.clone(), src.into(), f.to_string(), d.to_string()])?;
            }
            for m in &s.monthly {
                monthly.row(&[
                    name.clone(),
                    src.into(),
                    m.month.to_string(),
                    m.count.to_string(),
                    m.q10.to_string(),
                    m.q50.to_string(),
                    m.q90.to_string(),
                ])?;
            }
            for m in &s.seasonal {
                seasonal.row(&[name.clone(), src.into(), m.season.clone(), m.count.to_string(), opt(m.mean)])?;
            }
        }
        if let Some(d) = &l.distances {
            dist.row(&[
                name.clone(),
                d.pdf_l1.to_string(),
                d.psd_log10.to_string(),
                d.monthly_max_abs.to_string(),
                d.seasonal_max_abs.to_string(),
            ])?;
        }
    }
    for t in [pdf, psd, monthly, seasonal, dist] {
        written.push(t.finish()?);
    }

    for l in &report.locations {
        let name = file_safe(&l.location.name);
        let srcs = sources(l);
        let series = |f: &dyn Fn(&PointStatistics) -> (&[f64], &[f64])| -> Vec<Series<'_>> {
            srcs.iter()
                .enumerate()
                .map(|(k, (label, s))| {
                    let (x, y) = f(s);
                    Series {
                        label,
                        x,
                        y,
                        color: PALETTE[k],
                        dashed: k > 0,
                    }
                })
                .collect()
        };
        let title_pdf = format!("{}: pdf", l.location.name);
        let chart = Chart {
            title: &title_pdf,
            x_label: &report.variable,
            y_label: "density",
            x_scale: Scale::Linear,
            y_scale: Scale::Linear,
            series: series(&|s| (&s.pdf.x, &s.pdf.density)),
            bands: vec![],
        };
        let path = dir.join(format!("pdf_{name}.svg"));
        write_file(&path, chart.render().as_bytes())?;
        written.push(path);

        let title_psd = format!("{}: spectral density", l.location.name);
        let chart = Chart {
            title: &title_psd,
            x_label: "frequency (cycles/day)",
            y_label: "density",
            x_scale: Scale::Log10,
            y_scale: Scale::Log10,
            series: series(&|s| (&s.psd.frequency_per_day, &s.psd.density)),
            bands: vec![],
        };
        let path = dir.join(format!("psd_{name}.svg"));
        write_file(&path, chart.render().as_bytes())?;
        written.push(path);

        let cols: Vec<[Vec<f64>; 4]> = srcs
            .iter()
            .map(|(_, s)| {
                [
                    s.monthly.iter().map(|m| m.month as f64).collect(),
                    s.monthly.iter().map(|m| m.q10).collect(),
                    s.monthly.iter().map(|m| m.q50).collect(),
                    s.monthly.iter().map(|m| m.q90).collect(),
                ]
            })
            .collect();
        let title_m = format!("{}: monthly 0.1/0.5/0.9 quantiles", l.location.name);
        let chart = Chart {
            title: &title_m,
            x_label: "month",
            y_label: &report.variable,
            x_scale: Scale::Linear,
            y_scale: Scale::Linear,
            series: srcs
                .iter()
                .zip(&cols)
                .enumerate()
                .map(|(k, ((label, _), c))| Series {
                    label,
                    x: &c[0],
                    y: &c[2],
                    color: PALETTE[k],
                    dashed: k > 0,
                })
                .collect(),
            bands: cols
                .iter()
                .enumerate()
                .map(|(k, c)| Band {
                    x: &c[0],
                    lower: &c[1],
                    upper: &c[3],
                    color: PALETTE[k],
                })
                .collect(),
        };
        let path = dir.join(format!("monthly_{name}.svg"));
        write_file(&path, chart.render().as_bytes())?;
        written.push(path);
    }

    for s in &report.snapshots {
        let limit = s
            .truth
            .iter()
            .chain(s.candidate.iter().flatten())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let mut fields = vec![("truth", &s.truth)];
        if let Some(c) = &s.candidate {
            fields.push(("candidate", c));
        }
        for (src, values) in fields {
            let title = format!("{} {src}, step {}", report.variable, s.time_index);
            let path = dir.join(format!("snapshot_{}_{src}.svg", s.time_index));
            write_file(&path, heatmap(&title, values, s.n_lat, s.n_lon, limit).as_bytes())?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use wavescale_core::sphere::SphericalGrid;

    fn stack(scale: f64) -> FieldStack {
        let grid = SphericalGrid::for_bandlimit(4);
        let n = grid.len();
        let time = TimeAxis::three_hourly(TimeAxis::DEFAULT_START, 600);
        let data = (0..n * 600)
            .map(|k| scale * ((k % n) as f64 * 0.3 + (k / n) as f64 * 0.05).sin())
            .collect();
        FieldStack::new(grid, time, data).unwrap()
    }

    fn settings() -> MetricsConfig {
        MetricsConfig {
            locations: vec![
                Location {
                    name: "north west".into(),
                    lat: 51.5,
                    lon: -0.1,
                },
                Location {
                    name: "b".into(),
                    lat: -33.9,
                    lon: 151.2,
                },
            ],
            psd_segment: 64,
            kde_points: 64,
            snapshots: vec![0, 10],
        }
    }

    #[test]
    fn truth_against_itself_has_zero_distances() {
        let t = stack(1.0);
        let r = build_report(&settings(), "h", "z", &t, Some(&t), vec![]).unwrap();
        for l in &r.locations {
            let d = l.distances.unwrap();
            assert_eq!((d.pdf_l1, d.psd_log10, d.monthly_max_abs, d.seasonal_max_abs), (0.0, 0.0, 0.0, 0.0));
        }
        let c = stack(1.5);
        let r = build_report(&settings(), "h", "z", &t, Some(&c), vec![]).unwrap();
        assert!(r.locations.iter().all(|l| l.distances.unwrap().pdf_l1 > 0.0));
    }

    #[test]
    fn rendering_is_bytewise_deterministic() {
        let t = stack(1.0);
        let c = stack(1.2);
        let r = build_report(&settings(), "h", "z", &t, Some(&c), vec![]).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let fa = render(&r, a.path()).unwrap();
        let fb = render(&back, b.path()).unwrap();
        assert_eq!(fa.len(), 5 + 3 * 2 + 2 * 2);
        for (x, y) in fa.iter().zip(&fb) {
            assert_eq!(x.file_name(), y.file_name());
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{}", x.display());
        }
        assert!(a.path().join("pdf_north_west.svg").exists());
        let header = std::fs::read_to_string(a.path().join("monthly_quantiles.csv")).unwrap();
        assert!(header.starts_with("location,source,month,count,q10,q50,q90\n"));
    }

    #[test]
    fn mismatched_candidate_is_a_data_error() {
        let t = stack(1.0);
        let grid = SphericalGrid::for_bandlimit(4);
        let short = FieldStack::zeros(grid, TimeAxis::three_hourly(TimeAxis::DEFAULT_START, 10));
        assert!(matches!(
            build_report(&settings(), "h", "z", &t, Some(&short), vec![]),
            Err(CliError::Data(_))
        ));
        let mut s = settings();
        s.snapshots = vec![600];
        assert!(matches!(build_report(&s, "h", "z", &t, None, vec![]), Err(CliError::Data(_))));
    }
}
