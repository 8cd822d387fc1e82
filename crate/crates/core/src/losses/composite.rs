use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::quantile::{quantile_loss_against, quantiles, QuantileVector};
use super::spectrum::{
    check_bundle, spectrum_loss_against, target_spectra, Segmentation, SpectrumLossParts, SpectrumSettings,
};
use crate::{Error, Result};

use super::spectrum::SpectrumRepresentation;

/// Declarative composite loss: `w_q · quantile + w_s · cross-spectrum`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSpec {
    pub quantile_weight: f64,
    pub spectrum_weight: f64,
    pub quantiles: QuantileVector,
    pub spectrum: SpectrumSettings,
    /// Applies `sign(v)·ln(1 + |v|)` to spectrum components before the MSE.
    pub log_transform: bool,
    pub representation: SpectrumRepresentation,
    /// Appends the center to its own neighbor list (auto-spectrum term).
    pub include_auto_spectrum: bool,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec {
            quantile_weight: 1.0,
            spectrum_weight: 1.0,
            quantiles: QuantileVector::tails(),
            spectrum: SpectrumSettings::default(),
            log_transform: false,
            representation: SpectrumRepresentation::RealImag,
            include_auto_spectrum: true,
        }
    }
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("quantile", self.quantile_weight), ("spectrum", self.spectrum_weight)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidLossSpec(format!("{name} weight must be finite and >= 0, got {w}")));
            }
        }
        if self.quantile_weight == 0.0 && self.spectrum_weight == 0.0 {
            return Err(Error::InvalidLossSpec("at least one term weight must be positive".into()));
        }
        self.spectrum.validate()
    }

    pub(crate) fn spectrum_parts(&self) -> SpectrumLossParts<'_> {
        SpectrumLossParts {
            settings: &self.spectrum,
            repr: self.representation,
            log_transform: self.log_transform,
            include_auto: self.include_auto_spectrum,
        }
    }
}

/// Observation statistics of one center, computed once and reused as the
/// target for every ensemble member.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedStats {
    pub quantiles: Vec<f64>,
    /// Cross-spectra in pair order (auto pair first when included).
    pub spectra: Vec<Vec<Complex64>>,
    pub segment_length: usize,
}

impl ObservedStats {
    pub fn compute(obs_center: &[f64], obs_neighbors: &[&[f64]], spec: &LossSpec) -> Result<Self> {
        spec.validate()?;
        check_bundle(obs_center, obs_neighbors)?;
        let q = quantiles(obs_center, &spec.quantiles)?;
        let (spectra, segment_length) = if spec.spectrum_weight > 0.0 {
            let seg = spec.spectrum.segmentation(obs_center.len())?;
            (target_spectra(&seg, obs_center, obs_neighbors, spec.include_auto_spectrum), seg.len)
        } else {
            (Vec::new(), 0)
        };
        Ok(ObservedStats {
            quantiles: q,
            spectra,
            segment_length,
        })
    }

    /// Pair-wise mean of several stats sets with identical shapes.
    pub fn mean(sets: &[ObservedStats]) -> Result<Self> {
        let first = sets.first().ok_or_else(|| Error::ShapeMismatch("no statistics to average".into()))?;
        let k = sets.len() as f64;
        let mut out = first.clone();
        for s in &sets[1..] {
            if s.quantiles.len() != out.quantiles.len()
                || s.spectra.len() != out.spectra.len()
                || s.segment_length != out.segment_length
            {
                return Err(Error::ShapeMismatch("statistics shapes differ".into()));
            }
            for (a, b) in out.quantiles.iter_mut().zip(&s.quantiles) {
                *a += b;
            }
            for (a, b) in out.spectra.iter_mut().zip(&s.spectra) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
        }
        out.quantiles.iter_mut().for_each(|v| *v /= k);
        out.spectra.iter_mut().flatten().for_each(|v| *v /= k);
        Ok(out)
    }
}

/// Composite loss value, its terms and gradients over the output series.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeLoss {
    pub total: f64,
    pub quantile: f64,
    pub spectrum: f64,
    pub grad_center: Vec<f64>,
    /// Empty unless neighbor gradients were requested.
    pub grad_neighbors: Vec<Vec<f64>>,
}

/// Composite loss of the output bundle against observed series.
pub fn composite_loss(
    out_center: &[f64],
    out_neighbors: &[&[f64]],
    obs_center: &[f64],
    obs_neighbors: &[&[f64]],
    spec: &LossSpec,
) -> Result<CompositeLoss> {
    if out_neighbors.len() != obs_neighbors.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} output neighbors vs {} observed neighbors",
            out_neighbors.len(),
            obs_neighbors.len()
        )));
    }
    let stats = ObservedStats::compute(obs_center, obs_neighbors, spec)?;
    composite_loss_against(out_center, out_neighbors, &stats, spec, true)
}

/// Composite loss against precomputed statistics.
pub fn composite_loss_against(
    out_center: &[f64],
    out_neighbors: &[&[f64]],
    stats: &ObservedStats,
    spec: &LossSpec,
    neighbor_grads: bool,
) -> Result<CompositeLoss> {
    spec.validate()?;
    check_bundle(out_center, out_neighbors)?;
    let n = out_center.len();
    let mut grad_center = vec![0.0; n];
    let mut grad_neighbors: Vec<Vec<f64>> = if neighbor_grads {
        out_neighbors.iter().map(|s| vec![0.0; s.len()]).collect()
    } else {
        Vec::new()
    };
    let quantile = if spec.quantile_weight > 0.0 {
        quantile_loss_against(out_center, &stats.quantiles, &spec.quantiles, spec.quantile_weight, &mut grad_center)?
    } else {
        0.0
    };
    let spectrum = if spec.spectrum_weight > 0.0 {
        let seg: Segmentation = spec.spectrum.segmentation(n)?;
        if seg.len != stats.segment_length {
            return Err(Error::ShapeMismatch(format!(
                "output segment length {} differs from observed {}",
                seg.len, stats.segment_length
            )));
        }
        spectrum_loss_against(
            &seg,
            out_center,
            out_neighbors,
            &stats.spectra,
            &spec.spectrum_parts(),
            spec.spectrum_weight,
            Some(&mut grad_center),
            neighbor_grads.then_some(grad_neighbors.as_mut_slice()),
        )?
    } else {
        0.0
    };
    Ok(CompositeLoss {
        total: spec.quantile_weight * quantile + spec.spectrum_weight * spectrum,
        quantile,
        spectrum,
        grad_center,
        grad_neighbors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{cross_spectrum_loss, cross_spectrum_loss_grad, quantile_loss, quantile_loss_grad};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let mut s = 0.0;
        (0..n)
            .map(|_| {
                s = 0.6 * s + rng.random_range(-1.0..1.0);
                s
            })
            .collect()
    }

    fn settings() -> SpectrumSettings {
        SpectrumSettings {
            segment_length: Some(64),
            ..SpectrumSettings::default()
        }
    }

    #[test]
    fn weights_select_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s: Vec<Vec<f64>> = (0..6).map(|_| random(&mut rng, 256)).collect();
        let on: Vec<&[f64]> = vec![&s[1], &s[2]];
        let bn: Vec<&[f64]> = vec![&s[4], &s[5]];
        let q_only = LossSpec {
            spectrum_weight: 0.0,
            spectrum: settings(),
            ..LossSpec::default()
        };
        let c = composite_loss(&s[0], &on, &s[3], &bn, &q_only).unwrap();
        assert_eq!(c.total, quantile_loss(&s[0], &s[3], &q_only.quantiles).unwrap());
        assert_eq!(c.grad_center, quantile_loss_grad(&s[0], &s[3], &q_only.quantiles).unwrap());

        let s_only = LossSpec {
            quantile_weight: 0.0,
            spectrum: settings(),
            ..LossSpec::default()
        };
        let c = composite_loss(&s[0], &on, &s[3], &bn, &s_only).unwrap();
        assert_eq!(c.total, cross_spectrum_loss(&s[0], &on, &s[3], &bn, &s_only).unwrap());
        let g = cross_spectrum_loss_grad(&s[0], &on, &s[3], &bn, &s_only).unwrap();
        assert_eq!(c.grad_center, g.center);
        assert_eq!(c.grad_neighbors, g.neighbors);

        let both = LossSpec {
            spectrum: settings(),
            ..LossSpec::default()
        };
        let c = composite_loss(&s[0], &on, &s[3], &bn, &both).unwrap();
        let q = quantile_loss(&s[0], &s[3], &both.quantiles).unwrap();
        let sp = cross_spectrum_loss(&s[0], &on, &s[3], &bn, &both).unwrap();
        assert!((c.total - (q + sp)).abs() <= 1e-14 * c.total);
        let gq = quantile_loss_grad(&s[0], &s[3], &both.quantiles).unwrap();
        for ((a, b), c) in c.grad_center.iter().zip(&gq).zip(&g.center) {
            assert!((a - (b + c)).abs() < 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn spec_validation_and_serde() {
        let mut s = LossSpec::default();
        s.validate().unwrap();
        s.quantile_weight = 0.0;
        s.spectrum_weight = 0.0;
        assert!(s.validate().is_err());
        s.spectrum_weight = f64::NAN;
        assert!(s.validate().is_err());
        let parsed: LossSpec = serde_json::from_str(r#"{"quantile_weight": 2.0, "representation": "amplitude_phase"}"#).unwrap();
        assert_eq!(parsed.quantile_weight, 2.0);
        assert_eq!(parsed.representation, SpectrumRepresentation::AmplitudePhase);
        assert!(serde_json::from_str::<LossSpec>(r#"{"bogus": 1}"#).is_err());
        let text = serde_json::to_string(&LossSpec::default()).unwrap();
        assert_eq!(serde_json::from_str::<LossSpec>(&text).unwrap(), LossSpec::default());
    }

    #[test]
    fn stats_averaging() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = LossSpec {
            spectrum: settings(),
            ..LossSpec::default()
        };
        let a = random(&mut rng, 128);
        let b = random(&mut rng, 128);
        let sa = ObservedStats::compute(&a, &[], &spec).unwrap();
        let sb = ObservedStats::compute(&b, &[], &spec).unwrap();
        let m = ObservedStats::mean(&[sa.clone(), sb.clone()]).unwrap();
        assert!((m.quantiles[3] - 0.5 * (sa.quantiles[3] + sb.quantiles[3])).abs() < 1e-15);
        assert_eq!(ObservedStats::mean(&[sa.clone()]).unwrap(), sa);
    }

    #[test]
    fn independent_samples_converge() {
        // Two independent long samples of the same process: the quantile loss is
        // tiny relative to the variance.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 29_220);
        let b = random(&mut rng, 29_220);
        let var = a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64;
        let l = quantile_loss(&a, &b, &crate::losses::QuantileVector::tails()).unwrap();
        assert!(l < 0.01 * var, "{l} vs {var}");
    }
}
