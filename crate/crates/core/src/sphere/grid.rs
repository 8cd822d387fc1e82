use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Equiangular grid of iso-latitude rings, poles included.
///
/// Samples are stored ring-major: north pole ring first, longitudes
/// increasing eastward from 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SphericalGrid {
    n_lat: usize,
    n_lon: usize,
    latitudes: Vec<f64>,
    longitudes: Vec<f64>,
}

impl SphericalGrid {
    pub fn equiangular(n_lat: usize, n_lon: usize) -> Result<Self> {
        if n_lat < 2 {
            return Err(Error::InvalidGrid(format!("n_lat must be >= 2, got {n_lat}")));
        }
        if n_lon < 1 {
            return Err(Error::InvalidGrid("n_lon must be >= 1".into()));
        }
        let latitudes = (0..n_lat)
            .map(|k| 0.5 * PI - PI * k as f64 / (n_lat - 1) as f64)
            .collect();
        let longitudes = (0..n_lon)
            .map(|i| 2.0 * PI * i as f64 / n_lon as f64)
            .collect();
        Ok(SphericalGrid {
            n_lat,
            n_lon,
            latitudes,
            longitudes,
        })
    }

    /// Smallest equiangular grid with an even number of longitudes that
    /// resolves `bandlimit` exactly.
    pub fn for_bandlimit(bandlimit: usize) -> Self {
        let l = bandlimit.max(1);
        Self::equiangular(l + 1, 2 * l).expect("valid grid")
    }

    pub fn n_lat(&self) -> usize {
        self.n_lat
    }

    pub fn n_lon(&self) -> usize {
        self.n_lon
    }

    pub fn len(&self) -> usize {
        self.n_lat * self.n_lon
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn latitudes(&self) -> &[f64] {
        &self.latitudes
    }

    pub fn longitudes(&self) -> &[f64] {
        &self.longitudes
    }

    pub fn colatitude(&self, ring: usize) -> f64 {
        PI * ring as f64 / (self.n_lat - 1) as f64
    }

    /// Whether samples on this grid determine every field band-limited at
    /// `bandlimit`: `n_lat >= L + 1` and `n_lon >= 2L - 1`.
    pub fn supports(&self, bandlimit: usize) -> bool {
        bandlimit == 0
            || (self.n_lat >= bandlimit + 1 && self.n_lon + 1 >= 2 * bandlimit)
    }

    pub fn check_bandlimit(&self, bandlimit: usize) -> Result<()> {
        if self.supports(bandlimit) {
            Ok(())
        } else {
            Err(Error::GridMismatch {
                n_lat: self.n_lat,
                n_lon: self.n_lon,
                bandlimit,
            })
        }
    }

    /// Clenshaw–Curtis weights in `cos θ` for each ring; they sum to 2.
    pub fn ring_weights(&self) -> Vec<f64> {
        clenshaw_curtis(self.n_lat - 1)
    }

    /// Area element for every sample (ring weight × longitude spacing);
    /// sums to 4π.
    pub fn area_weights(&self) -> Vec<f64> {
        let dphi = 2.0 * PI / self.n_lon as f64;
        let ring = self.ring_weights();
        let mut out = Vec::with_capacity(self.len());
        for w in ring {
            out.extend(core::iter::repeat_n(w * dphi, self.n_lon));
        }
        out
    }
}

/// Clenshaw–Curtis weights for the `n + 1` nodes `x_k = cos(kπ/n)`.
pub(crate) fn clenshaw_curtis(n: usize) -> Vec<f64> {
    if n == 0 {
        return vec![2.0];
    }
    let nf = n as f64;
    (0..=n)
        .map(|k| {
            let theta = PI * k as f64 / nf;
            let c = if k == 0 || k == n { 1.0 } else { 2.0 };
            let mut s = 0.0;
            for j in 1..=n / 2 {
                let b = if 2 * j == n { 1.0 } else { 2.0 };
                s += b / (4.0 * (j * j) as f64 - 1.0) * (2.0 * j as f64 * theta).cos();
            }
            c / nf * (1.0 - s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_degenerate_grids() {
        assert!(SphericalGrid::equiangular(1, 4).is_err());
        assert!(SphericalGrid::equiangular(3, 0).is_err());
    }

    #[test]
    fn latitudes_run_pole_to_pole() {
        let g = SphericalGrid::equiangular(5, 8).unwrap();
        assert_eq!(g.latitudes()[0], 0.5 * PI);
        assert!((g.latitudes()[4] + 0.5 * PI).abs() < 1e-15);
        assert!(g.latitudes().windows(2).all(|w| w[0] > w[1]));
        assert_eq!(g.longitudes()[0], 0.0);
        assert!((g.longitudes()[1] - PI / 4.0).abs() < 1e-15);
    }

    #[test]
    fn quadrature_condition() {
        let g = SphericalGrid::for_bandlimit(8);
        assert!(g.supports(8));
        assert!(!g.supports(9));
        assert!(SphericalGrid::equiangular(9, 15).unwrap().supports(8));
        assert!(!SphericalGrid::equiangular(9, 14).unwrap().supports(8));
    }

    #[test]
    fn clenshaw_curtis_integrates_polynomials() {
        for n in [2usize, 5, 8, 16] {
            let w = clenshaw_curtis(n);
            for deg in 0..=n {
                let approx: f64 = (0..=n)
                    .map(|k| w[k] * (PI * k as f64 / n as f64).cos().powi(deg as i32))
                    .sum();
                let exact = if deg % 2 == 1 { 0.0 } else { 2.0 / (deg as f64 + 1.0) };
                assert!((approx - exact).abs() < 1e-13, "n={n} deg={deg}");
            }
        }
    }

    #[test]
    fn area_weights_sum_to_sphere_area() {
        let g = SphericalGrid::equiangular(17, 32).unwrap();
        let s: f64 = g.area_weights().iter().sum();
        assert!((s - 4.0 * PI).abs() < 1e-12);
    }
}
