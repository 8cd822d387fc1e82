use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Tail-weighted quantile levels used by default.
pub const TAIL_QUANTILES: [f64; 11] = [0.0, 0.001, 0.01, 0.1, 0.3, 0.5, 0.7, 0.9, 0.99, 0.999, 1.0];

/// Strictly increasing probabilities in `[0, 1]`, at least two of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct QuantileVector(Vec<f64>);

impl QuantileVector {
    pub fn new(q: Vec<f64>) -> Result<Self> {
        if q.len() < 2 {
            return Err(Error::InvalidQuantiles(format!("need at least 2 levels, got {}", q.len())));
        }
        if q.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidQuantiles("levels must lie in [0, 1]".into()));
        }
        if q.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidQuantiles("levels must be strictly increasing".into()));
        }
        Ok(QuantileVector(q))
    }

    pub fn tails() -> Self {
        QuantileVector(TAIL_QUANTILES.to_vec())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Default for QuantileVector {
    fn default() -> Self {
        Self::tails()
    }
}

impl TryFrom<Vec<f64>> for QuantileVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        QuantileVector::new(v)
    }
}

impl From<QuantileVector> for Vec<f64> {
    fn from(q: QuantileVector) -> Self {
        q.0
    }
}

pub(crate) fn check_series(series: &[f64]) -> Result<()> {
    if series.len() < 2 {
        return Err(Error::SeriesTooShort {
            needed: 2,
            got: series.len(),
        });
    }
    if let Some(i) = series.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index: i });
    }
    Ok(())
}

/// Interpolation position of level `q` among `n` sorted samples.
fn bracket(q: f64, n: usize) -> (usize, usize, f64) {
    let p = q * (n - 1) as f64;
    let lo = (p.floor() as usize).min(n - 1);
    let hi = (p.ceil() as usize).min(n - 1);
    (lo, hi, p - lo as f64)
}

fn sorted_order(series: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..series.len()).collect();
    idx.sort_by(|&a, &b| series[a].total_cmp(&series[b]).then(a.cmp(&b)));
    idx
}

fn quantiles_sorted(series: &[f64], order: &[usize], q: &QuantileVector) -> Vec<f64> {
    let n = series.len();
    q.as_slice()
        .iter()
        .map(|&q| {
            let (lo, hi, f) = bracket(q, n);
            (1.0 - f) * series[order[lo]] + f * series[order[hi]]
        })
        .collect()
}

/// Linearly interpolated order statistics at position `q·(n−1)`.
pub fn quantiles(series: &[f64], q: &QuantileVector) -> Result<Vec<f64>> {
    check_series(series)?;
    Ok(quantiles_sorted(series, &sorted_order(series), q))
}

/// Mean over levels of squared quantile differences.
pub fn quantile_loss(out: &[f64], obs: &[f64], q: &QuantileVector) -> Result<f64> {
    let target = quantiles(obs, q)?;
    let mut scratch = vec![0.0; out.len()];
    quantile_loss_against(out, &target, q, 1.0, &mut scratch)
}

/// Gradient of [`quantile_loss`] with respect to `out`.
pub fn quantile_loss_grad(out: &[f64], obs: &[f64], q: &QuantileVector) -> Result<Vec<f64>> {
    let target = quantiles(obs, q)?;
    let mut grad = vec![0.0; out.len()];
    quantile_loss_against(out, &target, q, 1.0, &mut grad)?;
    Ok(grad)
}

/// Loss against precomputed target quantiles; adds `weight · ∂L/∂out` into
/// `grad`.
///
/// Each quantile's gradient goes to the two order statistics it interpolates.
/// Samples tied in value share the mass landing on their group equally.
pub(crate) fn quantile_loss_against(
    out: &[f64],
    target: &[f64],
    q: &QuantileVector,
    weight: f64,
    grad: &mut [f64],
) -> Result<f64> {
    check_series(out)?;
    if target.len() != q.len() || grad.len() != out.len() {
        return Err(Error::ShapeMismatch("quantile target or gradient length".into()));
    }
    let n = out.len();
    let order = sorted_order(out);
    let values = quantiles_sorted(out, &order, q);
    let nq = q.len() as f64;
    let mut loss = 0.0;
    let mut pos_grad = vec![0.0; n];
    for ((&qq, v), t) in q.as_slice().iter().zip(&values).zip(target) {
        let d = v - t;
        loss += d * d / nq;
        let g = 2.0 * d / nq;
        let (lo, hi, f) = bracket(qq, n);
        pos_grad[lo] += (1.0 - f) * g;
        pos_grad[hi] += f * g;
    }
    let mut start = 0;
    while start < n {
        let v = out[order[start]];
        let mut end = start + 1;
        while end < n && out[order[end]] == v {
            end += 1;
        }
        let share = pos_grad[start..end].iter().sum::<f64>() / (end - start) as f64;
        for &i in &order[start..end] {
            grad[i] += weight * share;
        }
        start = end;
    }
    Ok(loss)
}
