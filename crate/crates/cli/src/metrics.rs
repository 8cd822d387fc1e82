//! Point statistics at fixed locations: kernel-density pdfs, Welch spectra,
//! monthly quantiles and seasonal means.

use chrono::{DateTime, Datelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use wavescale_core::losses::{cross_spectrum, quantiles, QuantileVector, SpectrumSettings};
use wavescale_core::sphere::{FieldStack, TimeAxis};

use crate::config::{check_location, Location, MetricsConfig};
use crate::error::{CliError, Result};

pub const MONTHLY_LEVELS: [f64; 3] = [0.1, 0.5, 0.9];

/// Standard meteorological seasons, each month in exactly one.
pub const SEASONS: [(&str, [u32; 3]); 4] = [
    ("DJF", [12, 1, 2]),
    ("MAM", [3, 4, 5]),
    ("JJA", [6, 7, 8]),
    ("SON", [9, 10, 11]),
];

/// Kernel density estimate on a regular grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pdf {
    pub x: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl Pdf {
    /// Trapezoidal integral of the density.
    pub fn integral(&self) -> f64 {
        trapezoid(&self.x, &self.density)
    }
}

/// Welch power spectral density on non-negative frequencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Psd {
    pub frequency_per_day: Vec<f64>,
    /// Two-sided density, units² per cycle per day.
    pub density: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonthlyQuantiles {
    pub month: u32,
    pub count: usize,
    pub q10: f64,
    pub q50: f64,
    pub q90: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeasonalMean {
    pub season: String,
    pub count: usize,
    /// `None` when the record holds no sample of the season.
    pub mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointStatistics {
    pub pdf: Pdf,
    pub psd: Psd,
    /// Months with at least two samples, in calendar order.
    pub monthly: Vec<MonthlyQuantiles>,
    pub seasonal: Vec<SeasonalMean>,
}

/// Distances between candidate and truth statistics at one location.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distances {
    /// `∫ |p − q| dx` on the shared pdf grid.
    pub pdf_l1: f64,
    /// Mean `|log10(S_a / S_b)|` over nonzero frequencies.
    pub psd_log10: f64,
    pub monthly_max_abs: f64,
    pub seasonal_max_abs: f64,
}

fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2).zip(y.windows(2)).map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1])).sum()
}

/// Bilinear interpolation weights of a point on an equiangular grid whose
/// first ring is the north pole and whose first longitude is 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bilinear {
    pub index: [usize; 4],
    pub weight: [f64; 4],
}

impl Bilinear {
    pub fn new(n_lat: usize, n_lon: usize, loc: &Location) -> Result<Self> {
        check_location(loc).map_err(CliError::Data)?;
        if n_lat < 2 || n_lon < 1 {
            return Err(CliError::Data(format!("grid {n_lat}x{n_lon} too small to interpolate")));
        }
        let r = (90.0 - loc.lat) / 180.0 * (n_lat - 1) as f64;
        let r0 = (r.floor() as usize).min(n_lat - 2);
        let fr = r - r0 as f64;
        let c = loc.lon.rem_euclid(360.0) / 360.0 * n_lon as f64;
        let c0 = (c.floor() as usize) % n_lon;
        let fc = c - c.floor();
        let c1 = (c0 + 1) % n_lon;
        let at = |ring: usize, col: usize| ring * n_lon + col;
        Ok(Bilinear {
            index: [at(r0, c0), at(r0, c1), at(r0 + 1, c0), at(r0 + 1, c1)],
            weight: [(1.0 - fr) * (1.0 - fc), (1.0 - fr) * fc, fr * (1.0 - fc), fr * fc],
        })
    }

    pub fn apply(&self, field: &[f64]) -> f64 {
        self.index.iter().zip(&self.weight).map(|(&i, w)| w * field[i]).sum()
    }
}

/// Time series of the field interpolated to `loc`.
pub fn location_series(stack: &FieldStack, loc: &Location) -> Result<Vec<f64>> {
    let b = Bilinear::new(stack.grid().n_lat(), stack.grid().n_lon(), loc)?;
    Ok((0..stack.time().count).map(|t| b.apply(stack.snapshot(t))).collect())
}

fn finite_series(x: &[f64]) -> Result<()> {
    if x.len() < 2 {
        return Err(CliError::Data(format!("need at least 2 samples, got {}", x.len())));
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(CliError::Numerical(format!("non-finite sample at {i}")));
    }
    Ok(())
}

/// Silverman's rule `0.9 · min(σ, IQR/1.34) · n^(−1/5)`. A degenerate
/// sample gets a tiny bandwidth so its pdf is a unit-mass spike.
pub fn silverman_bandwidth(x: &[f64]) -> Result<f64> {
    finite_series(x)?;
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let q = quantiles(x, &QuantileVector::new(vec![0.25, 0.75]).expect("valid levels"))?;
    let iqr = (q[1] - q[0]) / 1.34;
    let spread = if iqr > 0.0 { sd.min(iqr) } else { sd };
    let h = 0.9 * spread * n.powf(-0.2);
    Ok(if h > 0.0 && h.is_finite() { h } else { 1e-9 * mean.abs().max(1.0) })
}

/// Evaluation grid covering `[min − 6h, max + 6h]` with spacing at most
/// `h_min / 2`, so the trapezoidal integral of each density is 1 to well
/// below 1e-6.
fn kde_grid(lo: f64, hi: f64, h_max: f64, h_min: f64, min_points: usize) -> Vec<f64> {
    let (a, b) = (lo - 6.0 * h_max, hi + 6.0 * h_max);
    let needed = ((b - a) / (0.5 * h_min)).ceil() as usize + 1;
    let n = needed.clamp(min_points.max(2), 1 << 17);
    (0..n).map(|k| a + (b - a) * k as f64 / (n - 1) as f64).collect()
}

fn kde_on(x: &[f64], h: f64, grid: &[f64]) -> Vec<f64> {
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let norm = 1.0 / (sorted.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let reach = 9.0 * h;
    grid.iter()
        .map(|&g| {
            let start = sorted.partition_point(|&v| v < g - reach);
            let end = sorted.partition_point(|&v| v <= g + reach);
            sorted[start..end]
                .iter()
                .map(|&v| {
                    let z = (g - v) / h;
                    (-0.5 * z * z).exp()
                })
                .sum::<f64>()
                * norm
        })
        .collect()
}

fn range(x: &[f64]) -> (f64, f64) {
    x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Gaussian kernel density estimate with Silverman bandwidth.
pub fn kde(x: &[f64], min_points: usize) -> Result<Pdf> {
    let h = silverman_bandwidth(x)?;
    let (lo, hi) = range(x);
    let grid = kde_grid(lo, hi, h, h, min_points);
    Ok(Pdf {
        density: kde_on(x, h, &grid),
        x: grid,
        bandwidth: h,
    })
}

/// Densities of two samples on one shared grid.
pub fn kde_pair(a: &[f64], b: &[f64], min_points: usize) -> Result<(Pdf, Pdf)> {
    let (ha, hb) = (silverman_bandwidth(a)?, silverman_bandwidth(b)?);
    let (lo_a, hi_a) = range(a);
    let (lo_b, hi_b) = range(b);
    let grid = kde_grid(lo_a.min(lo_b), hi_a.max(hi_b), ha.max(hb), ha.min(hb), min_points);
    let pa = Pdf {
        density: kde_on(a, ha, &grid),
        x: grid.clone(),
        bandwidth: ha,
    };
    let pb = Pdf {
        density: kde_on(b, hb, &grid),
        x: grid,
        bandwidth: hb,
    };
    Ok((pa, pb))
}

/// Welch density with a Hann taper, 50% overlap and per-segment mean
/// removal; the segment is `min(segment, N)` steps.
pub fn psd(x: &[f64], step_seconds: i64, segment: usize) -> Result<Psd> {
    finite_series(x)?;
    let settings = SpectrumSettings {
        segment_length: Some(segment.min(x.len())),
        ..SpectrumSettings::default()
    };
    let est = cross_spectrum(x, x, &settings)?;
    let per_day = 86_400.0 / step_seconds as f64;
    Ok(Psd {
        frequency_per_day: est.frequencies.iter().map(|f| f * per_day).collect(),
        density: est.values.iter().map(|v| v.re / per_day).collect(),
    })
}

fn month_of(seconds: i64) -> Result<u32> {
    DateTime::from_timestamp(seconds, 0)
        .map(|d| d.month())
        .ok_or_else(|| CliError::Data(format!("timestamp {seconds} out of range")))
}

fn months(time: &TimeAxis) -> Result<Vec<u32>> {
    (0..time.count).map(|t| month_of(time.timestamp(t))).collect()
}

pub fn monthly_quantiles(x: &[f64], time: &TimeAxis) -> Result<Vec<MonthlyQuantiles>> {
    let m = months(time)?;
    let levels = QuantileVector::new(MONTHLY_LEVELS.to_vec()).expect("valid levels");
    let mut out = Vec::new();
    for month in 1..=12 {
        let sel: Vec<f64> = x.iter().zip(&m).filter(|(_, &mm)| mm == month).map(|(v, _)| *v).collect();
        if sel.len() < 2 {
            continue;
        }
        let q = quantiles(&sel, &levels)?;
        out.push(MonthlyQuantiles {
            month,
            count: sel.len(),
            q10: q[0],
            q50: q[1],
            q90: q[2],
        });
    }
    Ok(out)
}

pub fn seasonal_means(x: &[f64], time: &TimeAxis) -> Result<Vec<SeasonalMean>> {
    let m = months(time)?;
    Ok(SEASONS
        .iter()
        .map(|(name, ms)| {
            let (sum, count) = x
                .iter()
                .zip(&m)
                .filter(|(_, mm)| ms.contains(mm))
                .fold((0.0, 0usize), |(s, c), (v, _)| (s + v, c + 1));
            SeasonalMean {
                season: (*name).into(),
                count,
                mean: (count > 0).then(|| sum / count as f64),
            }
        })
        .collect())
}

fn temporal(x: &[f64], time: &TimeAxis, pdf: Pdf, settings: &MetricsConfig) -> Result<PointStatistics> {
    Ok(PointStatistics {
        pdf,
        psd: psd(x, time.step_seconds, settings.psd_segment)?,
        monthly: monthly_quantiles(x, time)?,
        seasonal: seasonal_means(x, time)?,
    })
}

/// Statistics of one series.
pub fn series_statistics(x: &[f64], time: &TimeAxis, settings: &MetricsConfig) -> Result<PointStatistics> {
    temporal(x, time, kde(x, settings.kde_points)?, settings)
}

/// Statistics of a candidate and a truth series, pdfs on a shared grid,
/// plus their distances.
pub fn compare_series(
    truth: &[f64],
    candidate: &[f64],
    time: &TimeAxis,
    settings: &MetricsConfig,
) -> Result<(PointStatistics, PointStatistics, Distances)> {
    if truth.len() != candidate.len() {
        return Err(CliError::Data(format!("series lengths {} and {}", truth.len(), candidate.len())));
    }
    let (pt, pc) = kde_pair(truth, candidate, settings.kde_points)?;
    let t = temporal(truth, time, pt, settings)?;
    let c = temporal(candidate, time, pc, settings)?;
    let d = distances(&t, &c);
    Ok((t, c, d))
}

/// Distances between two sets of statistics; pdfs must share a grid.
pub fn distances(a: &PointStatistics, b: &PointStatistics) -> Distances {
    let diff: Vec<f64> = a.pdf.density.iter().zip(&b.pdf.density).map(|(p, q)| (p - q).abs()).collect();
    let pdf_l1 = trapezoid(&a.pdf.x, &diff);
    let floor = f64::MIN_POSITIVE;
    let bins: Vec<f64> = a
        .psd
        .density
        .iter()
        .zip(&b.psd.density)
        .skip(1)
        .map(|(&p, &q)| if p == q { 0.0 } else { (p.max(floor) / q.max(floor)).log10().abs() })
        .collect();
    let psd_log10 = if bins.is_empty() { 0.0 } else { bins.iter().sum::<f64>() / bins.len() as f64 };
    let monthly_max_abs = a
        .monthly
        .iter()
        .zip(&b.monthly)
        .flat_map(|(x, y)| [(x.q10 - y.q10).abs(), (x.q50 - y.q50).abs(), (x.q90 - y.q90).abs()])
        .fold(0.0, f64::max);
    let seasonal_max_abs = a
        .seasonal
        .iter()
        .zip(&b.seasonal)
        .filter_map(|(x, y)| Some((x.mean? - y.mean?).abs()))
        .fold(0.0, f64::max);
    Distances {
        pdf_l1,
        psd_log10,
        monthly_max_abs,
        seasonal_max_abs,
    }
}

/// Per-location statistics of a stack; locations are processed in parallel.
pub fn point_statistics(stack: &FieldStack, locations: &[Location], settings: &MetricsConfig) -> Result<Vec<PointStatistics>> {
    locations
        .par_iter()
        .map(|loc| series_statistics(&location_series(stack, loc)?, stack.time(), settings))
        .collect()
}

/// Upper 95% sampling bands of the pdf and spectral distances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bands {
    pub pdf_l1: f64,
    pub psd_log10: f64,
}

/// Circular block-bootstrap bands: the 95th percentile of the distances
/// between `truth` and `n_boot` resamples of itself built from blocks of
/// `block` consecutive steps.
pub fn bootstrap_bands(
    truth: &[f64],
    time: &TimeAxis,
    settings: &MetricsConfig,
    n_boot: usize,
    block: usize,
    seed: u64,
) -> Result<Bands> {
    finite_series(truth)?;
    if n_boot == 0 || block == 0 {
        return Err(CliError::Data("bootstrap needs at least one resample and a positive block".into()));
    }
    let n = truth.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pdf = Vec::with_capacity(n_boot);
    let mut spec = Vec::with_capacity(n_boot);
    for _ in 0..n_boot {
        let mut sample = Vec::with_capacity(n);
        while sample.len() < n {
            let start = rng.random_range(0..n);
            let take = block.min(n - sample.len());
            sample.extend((0..take).map(|k| truth[(start + k) % n]));
        }
        let (pt, pc) = kde_pair(truth, &sample, settings.kde_points)?;
        let a = PointStatistics {
            pdf: pt,
            psd: psd(truth, time.step_seconds, settings.psd_segment)?,
            monthly: Vec::new(),
            seasonal: Vec::new(),
        };
        let b = PointStatistics {
            pdf: pc,
            psd: psd(&sample, time.step_seconds, settings.psd_segment)?,
            monthly: Vec::new(),
            seasonal: Vec::new(),
        };
        let d = distances(&a, &b);
        pdf.push(d.pdf_l1);
        spec.push(d.psd_log10);
    }
    let level = QuantileVector::new(vec![0.0, 0.95]).expect("valid levels");
    let upper = |v: &[f64]| -> Result<f64> {
        if v.len() == 1 {
            return Ok(v[0]);
        }
        Ok(quantiles(v, &level)?[1])
    };
    Ok(Bands {
        pdf_l1: upper(&pdf)?,
        psd_log10: upper(&spec)?,
    })
}
