use serde::{Deserialize, Serialize};

use super::sht::ShtScratch;
use super::{HarmonicCoeffs, ShtPlan, SphericalGrid, WaveletFrame};
use crate::{Error, Result};

/// Regular time axis; timestamps are seconds since the Unix epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeAxis {
    pub start_seconds: i64,
    pub step_seconds: i64,
    pub count: usize,
}

impl TimeAxis {
    pub const THREE_HOURS: i64 = 3 * 3600;
    /// 1990-01-01T00:00:00Z.
    pub const DEFAULT_START: i64 = 631_152_000;

    pub fn three_hourly(start_seconds: i64, count: usize) -> Self {
        TimeAxis {
            start_seconds,
            step_seconds: Self::THREE_HOURS,
            count,
        }
    }

    /// Number of whole steps in `years` Julian years (365.25 days).
    pub fn steps_for_years(years: f64, step_seconds: i64) -> usize {
        (years * 365.25 * 86_400.0 / step_seconds as f64).round() as usize
    }

    pub fn steps_per_year(&self) -> f64 {
        365.25 * 86_400.0 / self.step_seconds as f64
    }

    pub fn timestamp(&self, t: usize) -> i64 {
        self.start_seconds + self.step_seconds * t as i64
    }

    pub fn slice(&self, start: usize, len: usize) -> TimeAxis {
        TimeAxis {
            start_seconds: self.timestamp(start),
            step_seconds: self.step_seconds,
            count: len,
        }
    }
}

/// Coefficient series of one level, center-major: `data[c * n_times + t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSeries {
    level: usize,
    n_centers: usize,
    n_times: usize,
    data: Vec<f64>,
}

impl LevelSeries {
    pub fn zeros(level: usize, n_centers: usize, n_times: usize) -> Self {
        LevelSeries {
            level,
            n_centers,
            n_times,
            data: vec![0.0; n_centers * n_times],
        }
    }

    pub fn from_center_major(level: usize, n_centers: usize, n_times: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_centers * n_times {
            return Err(Error::ShapeMismatch(format!(
                "level {level}: {} values for {n_centers} centers x {n_times} times",
                data.len()
            )));
        }
        Ok(LevelSeries {
            level,
            n_centers,
            n_times,
            data,
        })
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn n_centers(&self) -> usize {
        self.n_centers
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn series(&self, center: usize) -> &[f64] {
        &self.data[center * self.n_times..(center + 1) * self.n_times]
    }

    pub fn series_mut(&mut self, center: usize) -> &mut [f64] {
        &mut self.data[center * self.n_times..(center + 1) * self.n_times]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Values of every center at one time step.
    pub fn snapshot(&self, t: usize, out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate().take(self.n_centers) {
            *o = self.data[c * self.n_times + t];
        }
    }

    pub fn set_snapshot(&mut self, t: usize, values: &[f64]) {
        for (c, v) in values.iter().enumerate().take(self.n_centers) {
            self.data[c * self.n_times + t] = *v;
        }
    }

    pub fn time_slice(&self, start: usize, len: usize) -> LevelSeries {
        let mut out = LevelSeries::zeros(self.level, self.n_centers, len);
        for c in 0..self.n_centers {
            out.series_mut(c).copy_from_slice(&self.series(c)[start..start + len]);
        }
        out
    }
}

/// Time-indexed wavelet coefficients organised by level and center.
///
/// Levels may be a subset of the frame's (missing levels read as zero).
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientPyramid {
    time: TimeAxis,
    levels: Vec<LevelSeries>,
}

impl CoefficientPyramid {
    pub fn new(time: TimeAxis) -> Self {
        CoefficientPyramid {
            time,
            levels: Vec::new(),
        }
    }

    /// Zero pyramid shaped like the frame's levels in `levels`.
    pub fn zeros(frame: &WaveletFrame, levels: core::ops::RangeInclusive<usize>, time: TimeAxis) -> Self {
        let mut p = CoefficientPyramid::new(time);
        for j in levels {
            p.levels.push(LevelSeries::zeros(j, frame.center_count(j), time.count));
        }
        p
    }

    pub fn time(&self) -> &TimeAxis {
        &self.time
    }

    pub fn n_times(&self) -> usize {
        self.time.count
    }

    /// Inserts or replaces a level, keeping levels sorted.
    pub fn insert_level(&mut self, series: LevelSeries) -> Result<()> {
        if series.n_times != self.time.count {
            return Err(Error::ShapeMismatch(format!(
                "level {} has {} times, pyramid has {}",
                series.level, series.n_times, self.time.count
            )));
        }
        match self.levels.binary_search_by_key(&series.level, |l| l.level) {
            Ok(i) => self.levels[i] = series,
            Err(i) => self.levels.insert(i, series),
        }
        Ok(())
    }

    pub fn remove_level(&mut self, level: usize) -> Option<LevelSeries> {
        let i = self.levels.iter().position(|l| l.level == level)?;
        Some(self.levels.remove(i))
    }

    pub fn level(&self, level: usize) -> Option<&LevelSeries> {
        self.levels.iter().find(|l| l.level == level)
    }

    pub fn level_mut(&mut self, level: usize) -> Option<&mut LevelSeries> {
        self.levels.iter_mut().find(|l| l.level == level)
    }

    pub fn levels(&self) -> &[LevelSeries] {
        &self.levels
    }

    pub fn level_indices(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.level).collect()
    }

    pub fn series(&self, level: usize, center: usize) -> Option<&[f64]> {
        self.level(level).map(|l| l.series(center))
    }

    /// Copy keeping only levels inside `range`.
    pub fn retain_levels(&self, range: core::ops::RangeInclusive<usize>) -> Self {
        CoefficientPyramid {
            time: self.time,
            levels: self.levels.iter().filter(|l| range.contains(&l.level)).cloned().collect(),
        }
    }

    pub fn time_slice(&self, start: usize, len: usize) -> Self {
        CoefficientPyramid {
            time: self.time.slice(start, len),
            levels: self.levels.iter().map(|l| l.time_slice(start, len)).collect(),
        }
    }

    /// Checks that every level matches the frame's center counts.
    pub fn check_frame(&self, frame: &WaveletFrame) -> Result<()> {
        for l in &self.levels {
            if l.level == 0 || l.level > frame.n_levels() {
                return Err(Error::ShapeMismatch(format!("level {} not in frame", l.level)));
            }
            if l.n_centers != frame.center_count(l.level) {
                return Err(Error::ShapeMismatch(format!(
                    "level {} has {} centers, frame expects {}",
                    l.level,
                    l.n_centers,
                    frame.center_count(l.level)
                )));
            }
        }
        Ok(())
    }
}

/// Time-ordered gridded snapshots, stored `(time, lat, lon)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldStack {
    grid: SphericalGrid,
    time: TimeAxis,
    data: Vec<f64>,
}

impl FieldStack {
    pub fn new(grid: SphericalGrid, time: TimeAxis, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() * time.count {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} snapshots of {} samples",
                data.len(),
                time.count,
                grid.len()
            )));
        }
        Ok(FieldStack { grid, time, data })
    }

    pub fn zeros(grid: SphericalGrid, time: TimeAxis) -> Self {
        let n = grid.len() * time.count;
        FieldStack {
            grid,
            time,
            data: vec![0.0; n],
        }
    }

    pub fn grid(&self) -> &SphericalGrid {
        &self.grid
    }

    pub fn time(&self) -> &TimeAxis {
        &self.time
    }

    pub fn snapshot(&self, t: usize) -> &[f64] {
        let n = self.grid.len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn snapshot_mut(&mut self, t: usize) -> &mut [f64] {
        let n = self.grid.len();
        &mut self.data[t * n..(t + 1) * n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

/// Per-level working buffers.
struct LevelBuffers {
    scratch: ShtScratch,
    grid_values: Vec<f64>,
    coeffs: HarmonicCoeffs,
}

/// Frame bound to a physical grid, with reusable buffers for repeated
/// snapshot transforms.
pub struct FrameTransform<'a> {
    frame: &'a WaveletFrame,
    plan: Option<ShtPlan>,
    scratch: Option<ShtScratch>,
    levels: Vec<LevelBuffers>,
}

impl<'a> FrameTransform<'a> {
    /// Transform working purely in harmonic space (no physical grid).
    pub fn harmonic(frame: &'a WaveletFrame) -> Self {
        let levels = (1..=frame.n_levels())
            .map(|j| {
                let lay = frame.layout(j);
                LevelBuffers {
                    scratch: ShtScratch::default(),
                    grid_values: vec![0.0; lay.n_rings * lay.n_lon],
                    coeffs: HarmonicCoeffs::zeros(lay.bandlimit),
                }
            })
            .collect();
        FrameTransform {
            frame,
            plan: None,
            scratch: None,
            levels,
        }
    }

    pub fn new(frame: &'a WaveletFrame, grid: &SphericalGrid) -> Result<Self> {
        let plan = ShtPlan::new(grid, frame.bandlimit())?;
        let scratch = plan.scratch();
        let mut t = Self::harmonic(frame);
        t.plan = Some(plan);
        t.scratch = Some(scratch);
        Ok(t)
    }

    pub fn frame(&self) -> &WaveletFrame {
        self.frame
    }

    pub fn grid(&self) -> Option<&SphericalGrid> {
        self.plan.as_ref().map(|p| p.grid())
    }

    fn level_buffers(&mut self, level: usize) -> &mut LevelBuffers {
        let b = &mut self.levels[level - 1];
        if b.scratch.is_empty() {
            b.scratch = self.frame.level_plan(level).scratch();
        }
        b
    }

    /// Level-`j` center values of a field given by its harmonic coefficients.
    pub fn level_from_harmonics(&mut self, level: usize, coeffs: &HarmonicCoeffs, centers: &mut [f64]) {
        let frame = self.frame;
        let lay = *frame.layout(level);
        let kernels = frame.kernels(level);
        let plan = frame.level_plan(level);
        let b = self.level_buffers(level);
        let lb = lay.bandlimit.min(coeffs.bandlimit());
        b.coeffs.as_mut_slice().fill(0.0);
        for l in 0..lb {
            let k = kernels[l];
            if k == 0.0 {
                continue;
            }
            for m in -(l as i64)..=(l as i64) {
                b.coeffs.set(l, m, k * coeffs.get(l, m));
            }
        }
        plan.inverse_into(&b.coeffs, &mut b.grid_values, &mut b.scratch)
            .expect("level plan shapes");
        lay.collapse(&b.grid_values, centers);
    }

    /// Adds `Σ_ℓm κ_j(ℓ) W_ℓm Y_ℓm` of level-`j` centers into `acc`.
    pub fn accumulate_level(&mut self, level: usize, centers: &[f64], acc: &mut HarmonicCoeffs) {
        let frame = self.frame;
        let lay = *frame.layout(level);
        let kernels = frame.kernels(level);
        let plan = frame.level_plan(level);
        let b = self.level_buffers(level);
        lay.expand(centers, &mut b.grid_values);
        plan.forward_into(&b.grid_values, &mut b.coeffs, &mut b.scratch)
            .expect("level plan shapes");
        let lb = lay.bandlimit.min(acc.bandlimit());
        for l in 0..lb {
            let k = kernels[l];
            if k == 0.0 {
                continue;
            }
            for m in -(l as i64)..=(l as i64) {
                acc.set(l, m, acc.get(l, m) + k * b.coeffs.get(l, m));
            }
        }
    }

    /// Squared L2 norm of the band-limited field represented by level-`j`
    /// center values, i.e. `Σ_ℓm (κ_j f)_ℓm²` for analysis output.
    pub fn level_energy(&mut self, level: usize, centers: &[f64]) -> f64 {
        let frame = self.frame;
        let lay = *frame.layout(level);
        let plan = frame.level_plan(level);
        let b = self.level_buffers(level);
        lay.expand(centers, &mut b.grid_values);
        plan.forward_into(&b.grid_values, &mut b.coeffs, &mut b.scratch)
            .expect("level plan shapes");
        b.coeffs.energy()
    }

    /// Harmonic coefficients (bandlimit `L`) of one physical snapshot.
    pub fn snapshot_harmonics(&mut self, field: &[f64], out: &mut HarmonicCoeffs) -> Result<()> {
        let plan = self.plan.as_ref().ok_or_else(|| Error::ShapeMismatch("transform has no grid".into()))?;
        plan.forward_into(field, out, self.scratch.as_mut().expect("scratch with plan"))
    }

    /// Physical snapshot of harmonic coefficients.
    pub fn snapshot_field(&mut self, coeffs: &HarmonicCoeffs, out: &mut [f64]) -> Result<()> {
        let plan = self.plan.as_ref().ok_or_else(|| Error::ShapeMismatch("transform has no grid".into()))?;
        plan.inverse_into(coeffs, out, self.scratch.as_mut().expect("scratch with plan"))
    }

    /// Analysis of a field stack restricted to `levels`.
    pub fn analyze_levels(
        &mut self,
        stack: &FieldStack,
        levels: core::ops::RangeInclusive<usize>,
    ) -> Result<CoefficientPyramid> {
        let grid = self.grid().ok_or_else(|| Error::ShapeMismatch("transform has no grid".into()))?;
        if grid != stack.grid() {
            return Err(Error::ShapeMismatch("field stack grid differs from transform grid".into()));
        }
        check_levels(self.frame, &levels)?;
        let time = *stack.time();
        let mut pyr = CoefficientPyramid::zeros(self.frame, levels.clone(), time);
        let mut coeffs = HarmonicCoeffs::zeros(self.frame.bandlimit());
        let mut centers = vec![0.0; self.frame.center_count(*levels.end())];
        for t in 0..time.count {
            self.snapshot_harmonics(stack.snapshot(t), &mut coeffs)?;
            for j in levels.clone() {
                let n = self.frame.center_count(j);
                self.level_from_harmonics(j, &coeffs, &mut centers[..n]);
                pyr.level_mut(j).expect("level allocated").set_snapshot(t, &centers[..n]);
            }
        }
        Ok(pyr)
    }

    /// Synthesis of every level present in `pyramid` onto the grid.
    pub fn synthesize(&mut self, pyramid: &CoefficientPyramid) -> Result<FieldStack> {
        let grid = self
            .grid()
            .ok_or_else(|| Error::ShapeMismatch("transform has no grid".into()))?
            .clone();
        pyramid.check_frame(self.frame)?;
        let time = *pyramid.time();
        let mut stack = FieldStack::zeros(grid, time);
        let mut acc = HarmonicCoeffs::zeros(self.frame.bandlimit());
        let max_centers = pyramid.levels().iter().map(|l| l.n_centers()).max().unwrap_or(0);
        let mut centers = vec![0.0; max_centers];
        for t in 0..time.count {
            acc.as_mut_slice().fill(0.0);
            for lvl in pyramid.levels() {
                let n = lvl.n_centers();
                lvl.snapshot(t, &mut centers[..n]);
                self.accumulate_level(lvl.level(), &centers[..n], &mut acc);
            }
            self.snapshot_field(&acc, stack.snapshot_mut(t))?;
        }
        Ok(stack)
    }
}

fn check_levels(frame: &WaveletFrame, levels: &core::ops::RangeInclusive<usize>) -> Result<()> {
    if *levels.start() == 0 || *levels.end() > frame.n_levels() || levels.is_empty() {
        return Err(Error::InvalidIndex(format!(
            "levels {}..={} outside 1..={}",
            levels.start(),
            levels.end(),
            frame.n_levels()
        )));
    }
    Ok(())
}

/// Decomposes every snapshot on all frame levels. Snapshots are projected
/// to the frame bandlimit first.
pub fn analyze(fields: &FieldStack, frame: &WaveletFrame) -> Result<CoefficientPyramid> {
    FrameTransform::new(frame, fields.grid())?.analyze_levels(fields, 1..=frame.n_levels())
}

/// Reconstructs fields on `grid` from the levels present in `pyramid`.
pub fn synthesize(pyramid: &CoefficientPyramid, frame: &WaveletFrame, grid: &SphericalGrid) -> Result<FieldStack> {
    FrameTransform::new(frame, grid)?.synthesize(pyramid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::{build_frame, sht_inverse, KernelParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_coeffs(bandlimit: usize, seed: u64) -> HarmonicCoeffs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..bandlimit * bandlimit).map(|_| rng.random_range(-1.0..1.0)).collect();
        HarmonicCoeffs::from_vec(bandlimit, data).unwrap()
    }

    fn stack_of(grid: &SphericalGrid, fields: &[Vec<f64>]) -> FieldStack {
        let data = fields.iter().flatten().copied().collect();
        FieldStack::new(grid.clone(), TimeAxis::three_hourly(0, fields.len()), data).unwrap()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    #[test]
    fn analysis_then_synthesis_reconstructs_band_limited_fields() {
        for (l, j) in [(8, 3), (16, 4), (32, 5), (24, 5)] {
            let frame = build_frame(l, j, KernelParams::default()).unwrap();
            let grid = SphericalGrid::for_bandlimit(l);
            let fields: Vec<Vec<f64>> = (0..3).map(|s| sht_inverse(&random_coeffs(l, s), &grid).unwrap()).collect();
            let stack = stack_of(&grid, &fields);
            let pyr = analyze(&stack, &frame).unwrap();
            assert_eq!(pyr.levels().len(), j);
            let back = synthesize(&pyr, &frame, &grid).unwrap();
            assert!(rel_err(back.as_slice(), stack.as_slice()) < 1e-10, "L={l}");
        }
    }

    #[test]
    fn synthesis_then_analysis_reproduces_frame_coefficients() {
        let frame = build_frame(16, 4, KernelParams::default()).unwrap();
        let grid = SphericalGrid::for_bandlimit(16);
        let field = sht_inverse(&random_coeffs(16, 9), &grid).unwrap();
        let pyr = analyze(&stack_of(&grid, &[field]), &frame).unwrap();
        let again = analyze(&synthesize(&pyr, &frame, &grid).unwrap(), &frame).unwrap();
        for (a, b) in again.levels().iter().zip(pyr.levels()) {
            assert!(rel_err(a.as_slice(), b.as_slice()) < 1e-6);
        }
    }

    #[test]
    fn missing_levels_read_as_zero() {
        let frame = build_frame(16, 4, KernelParams::default()).unwrap();
        let grid = SphericalGrid::for_bandlimit(16);
        let coeffs = random_coeffs(16, 3);
        let field = sht_inverse(&coeffs, &grid).unwrap();
        let pyr = analyze(&stack_of(&grid, &[field]), &frame).unwrap();
        let coarse = synthesize(&pyr.retain_levels(1..=2), &frame, &grid).unwrap();
        // The coarse part equals the field filtered by Σ_{j≤2} κ_j².
        let mut filtered = HarmonicCoeffs::zeros(16);
        for l in 0..16 {
            let w: f64 = (1..=2).map(|j| frame.kernel(j, l).powi(2)).sum();
            for m in -(l as i64)..=(l as i64) {
                filtered.set(l, m, w * coeffs.get(l, m));
            }
        }
        let expect = sht_inverse(&filtered, &grid).unwrap();
        assert!(rel_err(coarse.as_slice(), &expect) < 1e-10);
    }

    #[test]
    fn level_coefficients_sample_the_filtered_field() {
        let frame = build_frame(16, 4, KernelParams::default()).unwrap();
        let coeffs = random_coeffs(16, 5);
        let mut tr = FrameTransform::harmonic(&frame);
        let lay = *frame.layout(3);
        let mut centers = vec![0.0; lay.n_centers()];
        tr.level_from_harmonics(3, &coeffs, &mut centers);
        let mut filtered = HarmonicCoeffs::zeros(16);
        for l in 0..16 {
            for m in -(l as i64)..=(l as i64) {
                filtered.set(l, m, frame.kernel(3, l) * coeffs.get(l, m));
            }
        }
        for (i, c) in centers.iter().enumerate() {
            let (theta, phi) = lay.position(i);
            assert!((c - filtered.evaluate(theta, phi)).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_field_lives_on_the_coarsest_level() {
        let frame = build_frame(16, 4, KernelParams::default()).unwrap();
        let grid = SphericalGrid::for_bandlimit(16);
        let pyr = analyze(&stack_of(&grid, &[vec![2.5; grid.len()]]), &frame).unwrap();
        for lvl in pyr.levels() {
            let max = lvl.as_slice().iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if lvl.level() == 1 {
                assert!(lvl.as_slice().iter().all(|v| (v - 2.5).abs() < 1e-10));
            } else {
                assert!(max < 1e-12, "level {}", lvl.level());
            }
        }
        let zero = analyze(&stack_of(&grid, &[vec![0.0; grid.len()]]), &frame).unwrap();
        assert!(zero.levels().iter().all(|l| l.as_slice().iter().all(|v| *v == 0.0)));
        let back = synthesize(&zero, &frame, &grid).unwrap();
        assert!(back.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn atom_peaks_at_its_own_center() {
        let frame = build_frame(16, 4, KernelParams::default()).unwrap();
        let grid = SphericalGrid::for_bandlimit(16);
        let time = TimeAxis::three_hourly(0, 1);
        for (level, index) in [(3, 17), (4, 70), (2, 0)] {
            let mut pyr = CoefficientPyramid::zeros(&frame, 1..=4, time);
            pyr.level_mut(level).unwrap().series_mut(index)[0] = 1.0;
            let atom = synthesize(&pyr, &frame, &grid).unwrap();
            // Inner products by grid quadrature against each translated atom.
            let w = grid.area_weights();
            let field = atom.snapshot(0);
            let mut best = (f64::MIN, 0, 0);
            for j in 1..=4 {
                for c in 0..frame.center_count(j) {
                    let mut p = CoefficientPyramid::zeros(&frame, 1..=4, time);
                    p.level_mut(j).unwrap().series_mut(c)[0] = 1.0;
                    let other = synthesize(&p, &frame, &grid).unwrap();
                    let ip: f64 = other.snapshot(0).iter().zip(field).zip(&w).map(|((a, b), w)| a * b * w).sum();
                    if ip > best.0 {
                        best = (ip, j, c);
                    }
                }
            }
            assert_eq!((best.1, best.2), (level, index));
            let coeffs = analyze(&atom, &frame).unwrap();
            let lvl = coeffs.level(level).unwrap();
            let arg = (0..lvl.n_centers())
                .max_by(|a, b| lvl.series(*a)[0].abs().total_cmp(&lvl.series(*b)[0].abs()))
                .unwrap();
            assert_eq!(arg, index);
        }
    }

    #[test]
    fn level_energies_split_field_energy() {
        let frame = build_frame(32, 5, KernelParams::default()).unwrap();
        let grid = SphericalGrid::for_bandlimit(32);
        let coeffs = random_coeffs(32, 11);
        let field = sht_inverse(&coeffs, &grid).unwrap();
        let pyr = analyze(&stack_of(&grid, &[field]), &frame).unwrap();
        let mut tr = FrameTransform::harmonic(&frame);
        let total: f64 = pyr
            .levels()
            .iter()
            .map(|l| {
                let mut c = vec![0.0; l.n_centers()];
                l.snapshot(0, &mut c);
                tr.level_energy(l.level(), &c)
            })
            .sum();
        assert!((total / coeffs.energy() - 1.0).abs() < 1e-2);
    }

    #[test]
    fn shape_checks() {
        let frame = build_frame(8, 3, KernelParams::default()).unwrap();
        let grid = SphericalGrid::for_bandlimit(8);
        assert!(FieldStack::new(grid.clone(), TimeAxis::three_hourly(0, 2), vec![0.0; 3]).is_err());
        let mut p = CoefficientPyramid::new(TimeAxis::three_hourly(0, 4));
        assert!(p.insert_level(LevelSeries::zeros(1, 6, 3)).is_err());
        p.insert_level(LevelSeries::zeros(2, 7, 4)).unwrap();
        assert!(p.check_frame(&frame).is_err());
        assert!(FrameTransform::new(&frame, &SphericalGrid::equiangular(4, 8).unwrap()).is_err());
    }

    #[test]
    fn time_axis_helpers() {
        assert_eq!(TimeAxis::steps_for_years(10.0, TimeAxis::THREE_HOURS), 29_220);
        let t = TimeAxis::three_hourly(100, 10);
        assert_eq!(t.timestamp(2), 100 + 2 * 10_800);
        assert_eq!(t.slice(3, 4).start_seconds, t.timestamp(3));
    }
}
