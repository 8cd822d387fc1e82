//! Synthetic truth and biased ensembles with known, generative distortions.

use core::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::sphere::{
    CoefficientPyramid, FieldStack, FrameTransform, HarmonicCoeffs, ShtPlan, ShtScratch, SphericalGrid, TimeAxis,
    WaveletFrame,
};
use crate::{Error, Result};

/// Parameters of the latent spherical random process.
///
/// Harmonic coefficients follow independent AR(1) processes with angular
/// power `C_ℓ ∝ ℓ^slope` (no mean), correlation time `τ_ℓ = τ₁ ℓ^(−p)` steps
/// and an eastward solid-body advection. A pointwise transform adds heavy
/// tails and a seasonal cycle rides on the (1, 0) harmonic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProcessSpec {
    pub slope: f64,
    /// Pointwise standard deviation of the Gaussian field.
    pub amplitude: f64,
    /// Correlation time of degree 1, in steps.
    pub tau_steps: f64,
    pub tau_exponent: f64,
    /// Eastward advection in radians per step.
    pub advection: f64,
    /// Mixing weight of the exponential tail component, in `[0, 1]`.
    pub tail_weight: f64,
    /// Growth rate of the tail component in units of the field deviation.
    pub tail_rate: f64,
    /// Peak seasonal anomaly at the poles.
    pub seasonal_amplitude: f64,
    /// Phase of the seasonal cycle in radians.
    pub seasonal_phase: f64,
    pub seed: u64,
}

impl Default for ProcessSpec {
    fn default() -> Self {
        ProcessSpec {
            slope: -2.0,
            amplitude: 1.0,
            tau_steps: 8.0,
            tau_exponent: 1.0,
            advection: 2.0 * PI / 160.0,
            tail_weight: 0.3,
            tail_rate: 0.6,
            seasonal_amplitude: 0.0,
            seasonal_phase: 0.0,
            seed: 0,
        }
    }
}

impl ProcessSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if !(self.slope < 0.0) || !self.slope.is_finite() {
            return bad("slope must be negative");
        }
        if !(self.amplitude > 0.0) || !self.amplitude.is_finite() {
            return bad("amplitude must be positive");
        }
        if !(self.tau_steps > 0.0) || !self.tau_exponent.is_finite() || !self.tau_steps.is_finite() {
            return bad("correlation time must be positive");
        }
        if !(0.0..=1.0).contains(&self.tail_weight) {
            return bad("tail weight must lie in [0, 1]");
        }
        if !(self.tail_rate >= 0.0) || !self.tail_rate.is_finite() {
            return bad("tail rate must be non-negative");
        }
        if !self.advection.is_finite() || !self.seasonal_amplitude.is_finite() || !self.seasonal_phase.is_finite() {
            return bad("advection and seasonal parameters must be finite");
        }
        Ok(())
    }
}

/// Generative distortion of a [`ProcessSpec`]; the default is the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasSpec {
    /// Added to the spectral slope (before renormalisation).
    pub slope_shift: f64,
    /// Per-level variance factors `v_j` (level 1 first); missing levels are 1.
    /// Degree ℓ's power is multiplied by `1 + Σ_j κ_j(ℓ)² (v_j − 1)`.
    pub level_variance: Vec<f64>,
    /// Fraction in `[0, 1]` by which the tail growth rate is reduced.
    pub tail_suppression: f64,
    /// Multiplier of the advection speed.
    pub phase_speed: f64,
}

impl Default for BiasSpec {
    fn default() -> Self {
        BiasSpec {
            slope_shift: 0.0,
            level_variance: Vec::new(),
            tail_suppression: 0.0,
            phase_speed: 1.0,
        }
    }
}

impl BiasSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.slope_shift.is_finite() || !self.phase_speed.is_finite() {
            return Err(Error::InvalidSpec("bias parameters must be finite".into()));
        }
        if self.level_variance.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidSpec("level variance factors must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.tail_suppression) {
            return Err(Error::InvalidSpec("tail suppression must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Pointwise heavy-tail map `h(g) = (1−w) g + w·sign(g)·σ(e^{λ|g|/σ} − 1)/λ`.
pub fn tail_map(g: f64, weight: f64, rate: f64, sigma: f64) -> f64 {
    let a = g.abs();
    let tail = if rate == 0.0 {
        a
    } else {
        sigma * (rate * a / sigma).exp_m1() / rate
    };
    (1.0 - weight) * g + weight * g.signum() * tail
}

/// Streaming generator of harmonic coefficients, one time step per call.
pub struct SyntheticProcess {
    bandlimit: usize,
    std: Vec<f64>,
    rho: Vec<f64>,
    innovation: Vec<f64>,
    rot: Vec<(f64, f64)>,
    state: HarmonicCoeffs,
    rng: ChaCha8Rng,
    tail_weight: f64,
    tail_rate: f64,
    amplitude: f64,
    seasonal_amplitude: f64,
    seasonal_phase: f64,
    time: TimeAxis,
    step: usize,
    plan: Option<(ShtPlan, ShtScratch, Vec<f64>)>,
}

impl SyntheticProcess {
    /// Process over degrees below the frame bandlimit, optionally distorted.
    pub fn new(spec: &ProcessSpec, bias: Option<&BiasSpec>, frame: &WaveletFrame, time: TimeAxis) -> Result<Self> {
        spec.validate()?;
        let identity = BiasSpec::default();
        let bias = bias.unwrap_or(&identity);
        bias.validate()?;
        let l_max = frame.bandlimit();
        let slope = spec.slope + bias.slope_shift;
        // Unnormalised power, then scale so Σ (2ℓ+1) C_ℓ / 4π = amplitude².
        let mut power: Vec<f64> = (0..l_max).map(|l| if l == 0 { 0.0 } else { (l as f64).powf(slope) }).collect();
        let var: f64 = power.iter().enumerate().map(|(l, c)| (2 * l + 1) as f64 * c).sum::<f64>() / (4.0 * PI);
        if var > 0.0 {
            let k = spec.amplitude * spec.amplitude / var;
            power.iter_mut().for_each(|c| *c *= k);
        }
        for (l, c) in power.iter_mut().enumerate() {
            let mut f = 1.0;
            for (j, v) in bias.level_variance.iter().enumerate() {
                if j < frame.n_levels() {
                    f += frame.kernel(j + 1, l).powi(2) * (v - 1.0);
                }
            }
            *c *= f;
        }
        let rho: Vec<f64> = (0..l_max)
            .map(|l| {
                let tau = (spec.tau_steps * (l.max(1) as f64).powf(-spec.tau_exponent)).max(1.0);
                (-1.0 / tau).exp()
            })
            .collect();
        let std: Vec<f64> = power.iter().map(|c| c.sqrt()).collect();
        let innovation: Vec<f64> = rho.iter().zip(&std).map(|(r, s)| (1.0 - r * r).sqrt() * s).collect();
        let alpha = spec.advection * bias.phase_speed;
        let rot = (0..l_max).map(|m| ((m as f64 * alpha).cos(), (m as f64 * alpha).sin())).collect();
        let tail_rate = spec.tail_rate * (1.0 - bias.tail_suppression);
        let plan = if spec.tail_weight > 0.0 {
            let p = ShtPlan::new(&SphericalGrid::for_bandlimit(l_max), l_max)?;
            let s = p.scratch();
            let buf = vec![0.0; p.grid().len()];
            Some((p, s, buf))
        } else {
            None
        };
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut state = HarmonicCoeffs::zeros(l_max);
        for l in 1..l_max {
            for m in -(l as i64)..=(l as i64) {
                let z: f64 = StandardNormal.sample(&mut rng);
                state.set(l, m, std[l] * z);
            }
        }
        Ok(SyntheticProcess {
            bandlimit: l_max,
            std,
            rho,
            innovation,
            rot,
            state,
            rng,
            tail_weight: spec.tail_weight,
            tail_rate,
            amplitude: spec.amplitude,
            seasonal_amplitude: spec.seasonal_amplitude,
            seasonal_phase: spec.seasonal_phase,
            time,
            step: 0,
            plan,
        })
    }

    /// Angular power of the latent Gaussian field per degree.
    pub fn latent_power(&self) -> Vec<f64> {
        self.std.iter().map(|s| s * s).collect()
    }

    /// Writes the observed coefficients of the current step and advances.
    pub fn next_into(&mut self, out: &mut HarmonicCoeffs) -> Result<()> {
        if out.bandlimit() != self.bandlimit {
            *out = HarmonicCoeffs::zeros(self.bandlimit);
        }
        if let Some((plan, scratch, buf)) = self.plan.as_mut() {
            plan.inverse_into(&self.state, buf, scratch)?;
            for v in buf.iter_mut() {
                *v = tail_map(*v, self.tail_weight, self.tail_rate, self.amplitude);
            }
            plan.forward_into(buf, out, scratch)?;
            // The pointwise map shifts the mean only through asymmetry; drop it.
            out.set(0, 0, 0.0);
        } else {
            out.as_mut_slice().copy_from_slice(self.state.as_slice());
        }
        if self.seasonal_amplitude != 0.0 && self.bandlimit > 1 {
            let days = (self.time.timestamp(self.step) as f64) / 86_400.0;
            let s = self.seasonal_amplitude * (2.0 * PI * days / 365.25 - self.seasonal_phase).cos();
            // Y_10 peaks at √(3/4π) on the poles.
            out.set(1, 0, out.get(1, 0) + s * (4.0 * PI / 3.0).sqrt());
        }
        self.advance();
        Ok(())
    }

    fn advance(&mut self) {
        let st = &mut self.state;
        for l in 1..self.bandlimit {
            let (r, e) = (self.rho[l], self.innovation[l]);
            let z0: f64 = StandardNormal.sample(&mut self.rng);
            st.set(l, 0, r * st.get(l, 0) + e * z0);
            for m in 1..=l {
                let (c, s) = self.rot[m];
                let (a, b) = (st.get(l, m as i64), st.get(l, -(m as i64)));
                let za: f64 = StandardNormal.sample(&mut self.rng);
                let zb: f64 = StandardNormal.sample(&mut self.rng);
                // Rotation by mα moves the pattern eastward.
                st.set(l, m as i64, r * (a * c - b * s) + e * za);
                st.set(l, -(m as i64), r * (a * s + b * c) + e * zb);
            }
        }
        self.step += 1;
    }
}

fn check_years(years: f64) -> Result<TimeAxis> {
    if !(years >= 1.0) || !years.is_finite() {
        return Err(Error::InvalidSpec(format!("need at least one year, got {years}")));
    }
    Ok(TimeAxis::three_hourly(
        TimeAxis::DEFAULT_START,
        TimeAxis::steps_for_years(years, TimeAxis::THREE_HOURS),
    ))
}

/// Field stack (on the frame's bandlimit grid) and full pyramid of a run.
pub fn generate_truth(spec: &ProcessSpec, frame: &WaveletFrame, years: f64) -> Result<(FieldStack, CoefficientPyramid)> {
    let time = check_years(years)?;
    generate_with_time(spec, None, frame, time)
}

/// As [`generate_truth`] on an explicit time axis and with an optional bias.
pub fn generate_with_time(
    spec: &ProcessSpec,
    bias: Option<&BiasSpec>,
    frame: &WaveletFrame,
    time: TimeAxis,
) -> Result<(FieldStack, CoefficientPyramid)> {
    let grid = SphericalGrid::for_bandlimit(frame.bandlimit());
    let mut proc_ = SyntheticProcess::new(spec, bias, frame, time)?;
    let mut tr = FrameTransform::new(frame, &grid)?;
    let mut stack = FieldStack::zeros(grid, time);
    let mut coeffs = HarmonicCoeffs::zeros(frame.bandlimit());
    for t in 0..time.count {
        proc_.next_into(&mut coeffs)?;
        tr.snapshot_field(&coeffs, stack.snapshot_mut(t))?;
    }
    let pyr = tr.analyze_levels(&stack, 1..=frame.n_levels())?;
    Ok((stack, pyr))
}

/// Streams a run straight into the pyramid levels in `levels`, without
/// materialising physical fields.
pub fn generate_pyramid(
    spec: &ProcessSpec,
    bias: Option<&BiasSpec>,
    frame: &WaveletFrame,
    levels: core::ops::RangeInclusive<usize>,
    time: TimeAxis,
) -> Result<CoefficientPyramid> {
    if *levels.start() == 0 || *levels.end() > frame.n_levels() || levels.is_empty() {
        return Err(Error::InvalidIndex(format!("levels {levels:?} outside the frame")));
    }
    let mut proc_ = SyntheticProcess::new(spec, bias, frame, time)?;
    let mut tr = FrameTransform::harmonic(frame);
    let mut pyr = CoefficientPyramid::zeros(frame, levels.clone(), time);
    let mut coeffs = HarmonicCoeffs::zeros(frame.bandlimit());
    let mut centers = vec![0.0; frame.center_count(*levels.end())];
    for t in 0..time.count {
        proc_.next_into(&mut coeffs)?;
        for j in levels.clone() {
            let n = frame.center_count(j);
            tr.level_from_harmonics(j, &coeffs, &mut centers[..n]);
            pyr.level_mut(j).expect("allocated").set_snapshot(t, &centers[..n]);
        }
    }
    Ok(pyr)
}

/// Biased ensemble: one independent re-generation of the distorted process
/// per seed.
pub fn apply_bias(
    truth: &ProcessSpec,
    bias: &BiasSpec,
    frame: &WaveletFrame,
    time: TimeAxis,
    seeds: &[u64],
) -> Result<Vec<FieldStack>> {
    member_specs(truth, seeds)?
        .iter()
        .map(|s| generate_with_time(s, Some(bias), frame, time).map(|r| r.0))
        .collect()
}

/// Pyramid-only variant of [`apply_bias`] restricted to `levels`.
pub fn apply_bias_pyramids(
    truth: &ProcessSpec,
    bias: &BiasSpec,
    frame: &WaveletFrame,
    levels: core::ops::RangeInclusive<usize>,
    time: TimeAxis,
    seeds: &[u64],
) -> Result<Vec<CoefficientPyramid>> {
    member_specs(truth, seeds)?
        .iter()
        .map(|s| generate_pyramid(s, Some(bias), frame, levels.clone(), time))
        .collect()
}

fn member_specs(truth: &ProcessSpec, seeds: &[u64]) -> Result<Vec<ProcessSpec>> {
    if seeds.is_empty() {
        return Err(Error::InvalidSpec("need at least one ensemble member".into()));
    }
    Ok(seeds
        .iter()
        .map(|&seed| ProcessSpec {
            seed,
            ..truth.clone()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{quantiles, QuantileVector};
    use crate::sphere::{build_frame, KernelParams};

    fn frame(l: usize, j: usize) -> WaveletFrame {
        build_frame(l, j, KernelParams::default()).unwrap()
    }

    fn gaussian(slope: f64) -> ProcessSpec {
        ProcessSpec {
            slope,
            tail_weight: 0.0,
            seed: 3,
            ..ProcessSpec::default()
        }
    }

    #[test]
    fn sample_spectrum_follows_power_law() {
        let f = frame(16, 4);
        let spec = gaussian(-3.0);
        let time = check_years(10.0).unwrap();
        let mut p = SyntheticProcess::new(&spec, None, &f, time).unwrap();
        let target = p.latent_power();
        let mut acc = vec![0.0; 16];
        let mut c = HarmonicCoeffs::zeros(16);
        for _ in 0..time.count {
            p.next_into(&mut c).unwrap();
            for (l, a) in acc.iter_mut().enumerate() {
                *a += (-(l as i64)..=(l as i64)).map(|m| c.get(l, m).powi(2)).sum::<f64>() / (2 * l + 1) as f64;
            }
        }
        for l in 4..=8 {
            let est = acc[l] / time.count as f64;
            let law = target[4] * (l as f64 / 4.0).powf(-3.0);
            assert!((est / law - 1.0).abs() < 0.1, "l={l}: {est} vs {law}");
        }
    }

    #[test]
    fn pointwise_variance_matches_amplitude() {
        let f = frame(16, 4);
        let spec = ProcessSpec {
            amplitude: 2.0,
            ..gaussian(-2.0)
        };
        let p = SyntheticProcess::new(&spec, None, &f, TimeAxis::three_hourly(0, 1)).unwrap();
        let var: f64 = p.latent_power().iter().enumerate().map(|(l, c)| (2 * l + 1) as f64 * c).sum::<f64>() / (4.0 * PI);
        assert!((var - 4.0).abs() < 1e-12);
    }

    #[test]
    fn no_seasonal_cycle_means_flat_monthly_means() {
        let f = frame(8, 3);
        let spec = gaussian(-2.0);
        let time = check_years(10.0).unwrap();
        let pyr = generate_pyramid(&spec, None, &f, 1..=1, time).unwrap();
        let series = pyr.series(1, 0).unwrap();
        // Month index from day of year (30.44-day months); daily means reduce
        // serial correlation before the permutation test.
        let per_day = 8;
        let days: Vec<f64> = series.chunks(per_day).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
        let month: Vec<usize> = (0..days.len()).map(|d| ((d as f64 % 365.25) / 30.4375) as usize % 12).collect();
        let stat = |lab: &[usize]| {
            let mut s = [0.0; 12];
            let mut n = [0.0; 12];
            for (v, m) in days.iter().zip(lab) {
                s[*m] += v;
                n[*m] += 1.0;
            }
            let means: Vec<f64> = (0..12).map(|i| s[i] / n[i]).collect();
            let mu = means.iter().sum::<f64>() / 12.0;
            means.iter().map(|m| (m - mu).powi(2)).sum::<f64>()
        };
        let observed = stat(&month);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut perm = month.clone();
        let mut exceed = 0;
        let trials = 400;
        // Circular shifts keep the serial correlation and break any
        // alignment with the calendar.
        use rand::Rng;
        for _ in 0..trials {
            let k = rng.random_range(1..perm.len());
            perm.rotate_left(k);
            if stat(&perm) >= observed {
                exceed += 1;
            }
        }
        let p = (exceed + 1) as f64 / (trials + 1) as f64;
        assert!(p > 0.01, "p = {p}");
    }

    #[test]
    fn seasonal_cycle_is_visible() {
        let f = frame(8, 3);
        let spec = ProcessSpec {
            seasonal_amplitude: 3.0,
            ..gaussian(-2.0)
        };
        let time = check_years(2.0).unwrap();
        let pyr = generate_pyramid(&spec, None, &f, 1..=1, time).unwrap();
        let north = pyr.series(1, 0).unwrap();
        let quarter = time.count / 8;
        let winter: f64 = north[..quarter].iter().sum::<f64>() / quarter as f64;
        let summer: f64 = north[2 * quarter..3 * quarter].iter().sum::<f64>() / quarter as f64;
        assert!(winter - summer > 2.0, "{winter} {summer}");
    }

    #[test]
    fn same_seed_is_bitwise_identical_and_identity_bias_reproduces_truth() {
        let f = frame(8, 3);
        let spec = ProcessSpec {
            seed: 5,
            ..ProcessSpec::default()
        };
        let time = TimeAxis::three_hourly(0, 50);
        let (a, pa) = generate_with_time(&spec, None, &f, time).unwrap();
        let (b, pb) = generate_with_time(&spec, None, &f, time).unwrap();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        let members = apply_bias(&spec, &BiasSpec::default(), &f, time, &[5, 6, 7, 8, 9]).unwrap();
        assert_eq!(members[0], a);
        for i in 0..5 {
            for j in i + 1..5 {
                assert_ne!(members[i], members[j]);
            }
        }
        let pyr = apply_bias_pyramids(&spec, &BiasSpec::default(), &f, 1..=3, time, &[5]).unwrap();
        for lvl in pyr[0].levels() {
            let want = pa.level(lvl.level()).unwrap();
            for (x, y) in lvl.as_slice().iter().zip(want.as_slice()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tail_suppression_lowers_extreme_quantile() {
        let f = frame(8, 3);
        let spec = ProcessSpec {
            tail_weight: 0.5,
            tail_rate: 1.0,
            seed: 1,
            ..ProcessSpec::default()
        };
        let time = check_years(10.0).unwrap();
        let bias = BiasSpec {
            tail_suppression: 0.9,
            ..BiasSpec::default()
        };
        let truth = generate_pyramid(&spec, None, &f, 2..=2, time).unwrap();
        let member = apply_bias_pyramids(&spec, &bias, &f, 2..=2, time, &[2]).unwrap().remove(0);
        let q = QuantileVector::new(vec![0.5, 0.999]).unwrap();
        let n = f.center_count(2);
        for c in 0..n {
            let qt = quantiles(truth.series(2, c).unwrap(), &q).unwrap();
            let qm = quantiles(member.series(2, c).unwrap(), &q).unwrap();
            assert!(qm[1] < qt[1], "center {c}: {} vs {}", qm[1], qt[1]);
        }
    }

    #[test]
    fn level_variance_scales_only_its_band() {
        let f = frame(16, 4);
        let spec = gaussian(-2.0);
        let time = TimeAxis::three_hourly(0, 1);
        let base = SyntheticProcess::new(&spec, None, &f, time).unwrap().latent_power();
        let bias = BiasSpec {
            level_variance: vec![1.0, 1.0, 4.0],
            ..BiasSpec::default()
        };
        let scaled = SyntheticProcess::new(&spec, Some(&bias), &f, time).unwrap().latent_power();
        for l in 0..16 {
            let k = f.kernel(3, l).powi(2);
            assert!((scaled[l] - base[l] * (1.0 + 3.0 * k)).abs() < 1e-14);
        }
    }

    #[test]
    fn tail_map_properties() {
        assert_eq!(tail_map(1.3, 0.0, 2.0, 1.0), 1.3);
        assert_eq!(tail_map(-0.7, 1.0, 0.0, 1.0), -0.7);
        assert!(tail_map(3.0, 0.5, 1.0, 1.0) > 3.0);
        assert_eq!(tail_map(-2.0, 0.5, 1.0, 1.0), -tail_map(2.0, 0.5, 1.0, 1.0));
    }

    #[test]
    fn spec_validation() {
        assert!(ProcessSpec { slope: 0.5, ..ProcessSpec::default() }.validate().is_err());
        assert!(ProcessSpec { tail_weight: 1.5, ..ProcessSpec::default() }.validate().is_err());
        assert!(BiasSpec { tail_suppression: 2.0, ..BiasSpec::default() }.validate().is_err());
        assert!(generate_truth(&ProcessSpec::default(), &frame(8, 3), 0.5).is_err());
        assert!(apply_bias(&ProcessSpec::default(), &BiasSpec::default(), &frame(8, 3), TimeAxis::three_hourly(0, 2), &[]).is_err());
    }
}
