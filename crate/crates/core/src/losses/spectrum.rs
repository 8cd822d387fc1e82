use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::quantile::check_series;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Taper {
    Hann,
    None,
}

/// Normalisation of the averaged segment products.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumScaling {
    /// Divided by `Σ w_t²` (density per cycle per step).
    Density,
    /// Plain `conj(X)·Y` averaged over segments.
    Raw,
}

/// Welch estimator settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumSettings {
    /// Segment length; `None` means `min(N, 2048)`.
    pub segment_length: Option<usize>,
    /// Fractional overlap of consecutive segments, in `[0, 1)`.
    pub overlap: f64,
    pub taper: Taper,
    pub scaling: SpectrumScaling,
}

impl Default for SpectrumSettings {
    fn default() -> Self {
        SpectrumSettings {
            segment_length: None,
            overlap: 0.5,
            taper: Taper::Hann,
            scaling: SpectrumScaling::Density,
        }
    }
}

impl SpectrumSettings {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::InvalidLossSpec(format!("overlap {} outside [0, 1)", self.overlap)));
        }
        if matches!(self.segment_length, Some(m) if m < 2) {
            return Err(Error::InvalidLossSpec("segment length must be at least 2".into()));
        }
        Ok(())
    }

    pub(crate) fn segmentation(&self, n: usize) -> Result<Segmentation> {
        self.validate()?;
        let m = self.segment_length.unwrap_or(n.min(2048));
        if n < m || m < 2 {
            return Err(Error::SeriesTooShort {
                needed: m.max(2),
                got: n,
            });
        }
        let step = ((m as f64 * (1.0 - self.overlap)).round() as usize).max(1);
        let starts: Vec<usize> = (0..).map(|s| s * step).take_while(|s| s + m <= n).collect();
        let window: Vec<f64> = match self.taper {
            Taper::Hann => (0..m)
                .map(|t| 0.5 - 0.5 * (2.0 * core::f64::consts::PI * t as f64 / m as f64).cos())
                .collect(),
            Taper::None => vec![1.0; m],
        };
        let norm = match self.scaling {
            SpectrumScaling::Density => window.iter().map(|w| w * w).sum::<f64>(),
            SpectrumScaling::Raw => 1.0,
        };
        let mut planner = FftPlanner::new();
        Ok(Segmentation {
            len: m,
            scale: 1.0 / (norm * starts.len() as f64),
            starts,
            window,
            fwd: planner.plan_fft_forward(m),
            inv: planner.plan_fft_inverse(m),
        })
    }
}

/// Resolved segmentation for a series length.
pub(crate) struct Segmentation {
    pub len: usize,
    pub starts: Vec<usize>,
    pub window: Vec<f64>,
    /// `1 / (norm · n_segments)`.
    pub scale: f64,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Segmentation {
    pub fn n_bins(&self) -> usize {
        self.len / 2 + 1
    }

    /// One-sided DFTs of every demeaned, tapered segment, segment-major.
    pub fn transform(&self, x: &[f64]) -> Vec<Complex64> {
        let (m, k) = (self.len, self.n_bins());
        let mut out = Vec::with_capacity(self.starts.len() * k);
        let mut buf = vec![Complex64::new(0.0, 0.0); m];
        for &s in &self.starts {
            let seg = &x[s..s + m];
            let mean = seg.iter().sum::<f64>() / m as f64;
            for ((b, v), w) in buf.iter_mut().zip(seg).zip(&self.window) {
                *b = Complex64::new((v - mean) * w, 0.0);
            }
            self.fwd.process(&mut buf);
            out.extend_from_slice(&buf[..k]);
        }
        out
    }

    /// `Γ_k = scale · Σ_s conj(X_s,k) Y_s,k`.
    pub fn cross(&self, xs: &[Complex64], ys: &[Complex64]) -> Vec<Complex64> {
        let k = self.n_bins();
        let mut g = vec![Complex64::new(0.0, 0.0); k];
        for (xseg, yseg) in xs.chunks(k).zip(ys.chunks(k)) {
            for ((acc, x), y) in g.iter_mut().zip(xseg).zip(yseg) {
                *acc += x.conj() * y;
            }
        }
        for v in &mut g {
            *v *= self.scale;
        }
        g
    }

    /// Adds `∂L/∂x` for `L` depending on `Γ = cross(x, y)` through
    /// `c_k = ∂L/∂ReΓ_k − j ∂L/∂ImΓ_k`, with `y` held fixed.
    pub fn backprop_first(&self, c: &[Complex64], ys: &[Complex64], grad: &mut [f64]) {
        // dΓ_k = scale · conj(dX_k) Y_k, so ∂L/∂a_t = scale · Re Σ_k c_k Y_k e^{+2πjkt/M}.
        self.backprop(c, ys, false, grad);
    }

    /// As [`Self::backprop_first`] for the second argument, `x` fixed.
    pub fn backprop_second(&self, c: &[Complex64], xs: &[Complex64], grad: &mut [f64]) {
        // dΓ_k = scale · conj(X_k) dY_k, so ∂L/∂b_t = scale · Re Σ_k c_k conj(X_k) e^{−2πjkt/M}.
        self.backprop(c, xs, true, grad);
    }

    fn backprop(&self, c: &[Complex64], other: &[Complex64], second: bool, grad: &mut [f64]) {
        let (m, k) = (self.len, self.n_bins());
        let mut buf = vec![Complex64::new(0.0, 0.0); m];
        let mut g = vec![0.0; m];
        for (seg, &s) in other.chunks(k).zip(&self.starts) {
            buf.fill(Complex64::new(0.0, 0.0));
            for (i, (ck, o)) in c.iter().zip(seg).enumerate() {
                // Re Σ d_k e^{−jθ} = Re Σ conj(d_k) e^{+jθ}: both routes use the inverse FFT.
                buf[i] = if second { (ck * o.conj()).conj() } else { ck * o };
            }
            self.inv.process(&mut buf);
            for ((gt, b), w) in g.iter_mut().zip(&buf).zip(&self.window) {
                *gt = self.scale * b.re * w;
            }
            let mean = g.iter().sum::<f64>() / m as f64;
            for (dst, gt) in grad[s..s + m].iter_mut().zip(&g) {
                *dst += gt - mean;
            }
        }
    }
}

/// Cross-spectrum estimate on non-negative frequencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumEstimate {
    /// Cycles per time step, `k / segment_length`.
    pub frequencies: Vec<f64>,
    pub values: Vec<Complex64>,
    pub segment_length: usize,
    pub n_segments: usize,
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!("series lengths {} and {}", x.len(), y.len())));
    }
    check_series(x)?;
    check_series(y)
}

/// Welch cross-spectrum `Γ_xy(ω) = mean_s conj(X_s(ω)) Y_s(ω)`, so that the
/// phase at `ω` is the lead of `y` over `x`.
pub fn cross_spectrum(x: &[f64], y: &[f64], settings: &SpectrumSettings) -> Result<SpectrumEstimate> {
    check_pair(x, y)?;
    let seg = settings.segmentation(x.len())?;
    let values = seg.cross(&seg.transform(x), &seg.transform(y));
    Ok(SpectrumEstimate {
        frequencies: (0..seg.n_bins()).map(|k| k as f64 / seg.len as f64).collect(),
        values,
        segment_length: seg.len,
        n_segments: seg.starts.len(),
    })
}

/// Representation of complex spectra inside the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumRepresentation {
    #[default]
    RealImag,
    AmplitudePhase,
}

pub(crate) fn signed_log(v: f64) -> f64 {
    v.signum() * v.abs().ln_1p()
}

fn signed_log_deriv(v: f64) -> f64 {
    1.0 / (1.0 + v.abs())
}

fn wrap_phase(d: f64) -> f64 {
    let tau = 2.0 * core::f64::consts::PI;
    d - tau * (d / tau).round()
}

/// Loss between two spectra on the same grid; returns the loss and
/// `c_k = ∂L/∂ReΓ_k − j ∂L/∂ImΓ_k` for the first argument.
pub(crate) fn spectrum_term(
    out: &[Complex64],
    obs: &[Complex64],
    repr: SpectrumRepresentation,
    log_transform: bool,
) -> (f64, Vec<Complex64>) {
    let nk = out.len() as f64;
    let tf = |v: f64| if log_transform { signed_log(v) } else { v };
    let dtf = |v: f64| if log_transform { signed_log_deriv(v) } else { 1.0 };
    let mut loss = 0.0;
    let mut c = Vec::with_capacity(out.len());
    for (o, b) in out.iter().zip(obs) {
        match repr {
            SpectrumRepresentation::RealImag => {
                let dr = tf(o.re) - tf(b.re);
                let di = tf(o.im) - tf(b.im);
                loss += (dr * dr + di * di) / nk;
                let gr = 2.0 * dr * dtf(o.re) / nk;
                let gi = 2.0 * di * dtf(o.im) / nk;
                c.push(Complex64::new(gr, -gi));
            }
            SpectrumRepresentation::AmplitudePhase => {
                let (a, ab) = (o.norm(), b.norm());
                let da = tf(a) - tf(ab);
                let dp = if a > 0.0 && ab > 0.0 { wrap_phase(o.arg() - b.arg()) } else { 0.0 };
                loss += (da * da + dp * dp) / nk;
                if a > 0.0 {
                    let ga = 2.0 * da * dtf(a) / nk;
                    let gp = 2.0 * dp / nk;
                    // ∂A/∂(Re, Im) = (Re, Im)/A; ∂Φ/∂(Re, Im) = (−Im, Re)/A².
                    let gr = ga * o.re / a - gp * o.im / (a * a);
                    let gi = ga * o.im / a + gp * o.re / (a * a);
                    c.push(Complex64::new(gr, -gi));
                } else {
                    c.push(Complex64::new(0.0, 0.0));
                }
            }
        }
    }
    (loss, c)
}

/// Gradients of the cross-spectrum loss.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumGrad {
    pub center: Vec<f64>,
    pub neighbors: Vec<Vec<f64>>,
}

pub(crate) struct SpectrumLossParts<'a> {
    pub settings: &'a SpectrumSettings,
    pub repr: SpectrumRepresentation,
    pub log_transform: bool,
    pub include_auto: bool,
}

/// Shared evaluator: loss of `out_center` against `targets` (one per pair,
/// auto pair first when included), adding gradients into the buffers.
pub(crate) fn spectrum_loss_against(
    seg: &Segmentation,
    out_center: &[f64],
    out_neighbors: &[&[f64]],
    targets: &[Vec<Complex64>],
    parts: &SpectrumLossParts<'_>,
    weight: f64,
    grad_center: Option<&mut [f64]>,
    mut grad_neighbors: Option<&mut [Vec<f64>]>,
) -> Result<f64> {
    let expected = out_neighbors.len() + usize::from(parts.include_auto);
    if targets.len() != expected {
        return Err(Error::ShapeMismatch(format!(
            "{} spectrum targets for {} pairs",
            targets.len(),
            expected
        )));
    }
    let xc = seg.transform(out_center);
    let mut gc = vec![0.0; out_center.len()];
    let mut loss = 0.0;
    let mut t = targets.iter();
    if parts.include_auto {
        let g = seg.cross(&xc, &xc);
        let (l, c) = spectrum_term(&g, t.next().expect("auto target"), parts.repr, parts.log_transform);
        loss += l;
        if grad_center.is_some() {
            seg.backprop_first(&c, &xc, &mut gc);
            seg.backprop_second(&c, &xc, &mut gc);
        }
    }
    for (i, y) in out_neighbors.iter().enumerate() {
        let xy = seg.transform(y);
        let g = seg.cross(&xc, &xy);
        let (l, c) = spectrum_term(&g, t.next().expect("pair target"), parts.repr, parts.log_transform);
        loss += l;
        if grad_center.is_some() {
            seg.backprop_first(&c, &xy, &mut gc);
        }
        if let Some(gn) = grad_neighbors.as_deref_mut() {
            let mut tmp = vec![0.0; y.len()];
            seg.backprop_second(&c, &xc, &mut tmp);
            for (d, v) in gn[i].iter_mut().zip(&tmp) {
                *d += weight * v;
            }
        }
    }
    if let Some(gout) = grad_center {
        for (d, v) in gout.iter_mut().zip(&gc) {
            *d += weight * v;
        }
    }
    Ok(loss)
}

pub(crate) fn check_bundle(center: &[f64], neighbors: &[&[f64]]) -> Result<()> {
    check_series(center)?;
    for n in neighbors {
        if n.len() != center.len() {
            return Err(Error::ShapeMismatch(format!(
                "neighbor series length {} differs from center length {}",
                n.len(),
                center.len()
            )));
        }
        check_series(n)?;
    }
    Ok(())
}

pub(crate) fn target_spectra(
    seg: &Segmentation,
    center: &[f64],
    neighbors: &[&[f64]],
    include_auto: bool,
) -> Vec<Vec<Complex64>> {
    let xc = seg.transform(center);
    let mut out = Vec::with_capacity(neighbors.len() + 1);
    if include_auto {
        out.push(seg.cross(&xc, &xc));
    }
    for y in neighbors {
        out.push(seg.cross(&xc, &seg.transform(y)));
    }
    out
}

fn loss_and_grad(
    out_center: &[f64],
    out_neighbors: &[&[f64]],
    obs_center: &[f64],
    obs_neighbors: &[&[f64]],
    parts: &SpectrumLossParts<'_>,
    want_grad: bool,
) -> Result<(f64, Option<SpectrumGrad>)> {
    if out_neighbors.len() != obs_neighbors.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} output neighbors vs {} observed neighbors",
            out_neighbors.len(),
            obs_neighbors.len()
        )));
    }
    check_bundle(out_center, out_neighbors)?;
    check_bundle(obs_center, obs_neighbors)?;
    let seg_out = parts.settings.segmentation(out_center.len())?;
    let seg_obs = parts.settings.segmentation(obs_center.len())?;
    if seg_out.len != seg_obs.len {
        return Err(Error::ShapeMismatch("output and observed spectra use different segment lengths".into()));
    }
    let targets = target_spectra(&seg_obs, obs_center, obs_neighbors, parts.include_auto);
    if !want_grad {
        let l = spectrum_loss_against(&seg_out, out_center, out_neighbors, &targets, parts, 1.0, None, None)?;
        return Ok((l, None));
    }
    let mut grad = SpectrumGrad {
        center: vec![0.0; out_center.len()],
        neighbors: out_neighbors.iter().map(|n| vec![0.0; n.len()]).collect(),
    };
    let l = spectrum_loss_against(
        &seg_out,
        out_center,
        out_neighbors,
        &targets,
        parts,
        1.0,
        Some(&mut grad.center),
        Some(&mut grad.neighbors),
    )?;
    Ok((l, Some(grad)))
}

/// Sum over neighbor pairs of the per-bin mean squared spectrum differences.
pub fn cross_spectrum_loss(
    out_center: &[f64],
    out_neighbors: &[&[f64]],
    obs_center: &[f64],
    obs_neighbors: &[&[f64]],
    spec: &super::LossSpec,
) -> Result<f64> {
    spec.validate()?;
    loss_and_grad(out_center, out_neighbors, obs_center, obs_neighbors, &spec.spectrum_parts(), false).map(|r| r.0)
}

/// Gradient of [`cross_spectrum_loss`] with respect to every output series.
pub fn cross_spectrum_loss_grad(
    out_center: &[f64],
    out_neighbors: &[&[f64]],
    obs_center: &[f64],
    obs_neighbors: &[&[f64]],
    spec: &super::LossSpec,
) -> Result<SpectrumGrad> {
    spec.validate()?;
    loss_and_grad(out_center, out_neighbors, obs_center, obs_neighbors, &spec.spectrum_parts(), true)
        .map(|r| r.1.expect("gradient requested"))
}
