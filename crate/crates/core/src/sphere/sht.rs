use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::legendre::{fill_normalized, tri, tri_len};
use super::SphericalGrid;
use crate::{Error, Result};

/// Real spherical-harmonic coefficients for all `ℓ < bandlimit`,
/// stored at `ℓ(ℓ+1) + m` for `-ℓ <= m <= ℓ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonicCoeffs {
    bandlimit: usize,
    data: Vec<f64>,
}

impl HarmonicCoeffs {
    pub fn zeros(bandlimit: usize) -> Self {
        HarmonicCoeffs {
            bandlimit,
            data: vec![0.0; bandlimit * bandlimit],
        }
    }

    pub fn from_vec(bandlimit: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != bandlimit * bandlimit {
            return Err(Error::ShapeMismatch(format!(
                "{} coefficients for bandlimit {bandlimit}",
                data.len()
            )));
        }
        Ok(HarmonicCoeffs { bandlimit, data })
    }

    #[inline]
    pub fn index(l: usize, m: i64) -> usize {
        debug_assert!(m.unsigned_abs() as usize <= l);
        (l * (l + 1)).wrapping_add_signed(m as isize)
    }

    pub fn bandlimit(&self) -> usize {
        self.bandlimit
    }

    #[inline]
    pub fn get(&self, l: usize, m: i64) -> f64 {
        self.data[Self::index(l, m)]
    }

    #[inline]
    pub fn set(&mut self, l: usize, m: i64, v: f64) {
        self.data[Self::index(l, m)] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `Σ a_ℓm²`, the field's squared L2 norm over the sphere.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|a| a * a).sum()
    }

    /// Per-degree power `Σ_m a_ℓm² / (2ℓ + 1)`.
    pub fn degree_power(&self) -> Vec<f64> {
        (0..self.bandlimit)
            .map(|l| {
                let s: f64 = self.data[l * l..(l + 1) * (l + 1)].iter().map(|a| a * a).sum();
                s / (2 * l + 1) as f64
            })
            .collect()
    }

    /// Point evaluation of the expansion at colatitude `theta`, longitude `phi`.
    pub fn evaluate(&self, theta: f64, phi: f64) -> f64 {
        let l_max = self.bandlimit;
        if l_max == 0 {
            return 0.0;
        }
        let mut leg = vec![0.0; tri_len(l_max)];
        fill_normalized(l_max, theta.cos(), theta.sin(), &mut leg);
        let mut acc = 0.0;
        for m in 0..l_max {
            let (c, s) = ((m as f64 * phi).cos(), (m as f64 * phi).sin());
            for l in m..l_max {
                let p = leg[tri(l, m)];
                if m == 0 {
                    acc += self.get(l, 0) * p;
                } else {
                    acc += core::f64::consts::SQRT_2
                        * p
                        * (self.get(l, m as i64) * c + self.get(l, -(m as i64)) * s);
                }
            }
        }
        acc
    }

    /// Copy restricted (or zero-extended) to another bandlimit.
    pub fn with_bandlimit(&self, bandlimit: usize) -> Self {
        let mut out = HarmonicCoeffs::zeros(bandlimit);
        let n = self.bandlimit.min(bandlimit);
        out.data[..n * n].copy_from_slice(&self.data[..n * n]);
        out
    }
}

/// Precomputed transform between an equiangular grid and harmonic
/// coefficients at a fixed bandlimit.
///
/// Longitudes go through an FFT per ring; latitudes are solved per order
/// by a Clenshaw–Curtis-weighted least-squares pseudo-inverse, which is
/// exact for band-limited samples and a weighted projection otherwise.
pub struct ShtPlan {
    grid: SphericalGrid,
    bandlimit: usize,
    legendre: Vec<f64>,
    pinv: Vec<Vec<f64>>,
    fft_fwd: Arc<dyn Fft<f64>>,
    fft_inv: Arc<dyn Fft<f64>>,
}

impl core::fmt::Debug for ShtPlan {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("ShtPlan")
            .field("n_lat", &self.grid.n_lat())
            .field("n_lon", &self.grid.n_lon())
            .field("bandlimit", &self.bandlimit)
            .finish()
    }
}

/// Reusable buffers for [`ShtPlan`] transforms.
#[derive(Debug, Default)]
pub struct ShtScratch {
    ring: Vec<Complex64>,
    fft: Vec<Complex64>,
    cos_part: Vec<f64>,
    sin_part: Vec<f64>,
}

impl ShtScratch {
    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }
}

const SQRT2: f64 = core::f64::consts::SQRT_2;

impl ShtPlan {
    pub fn new(grid: &SphericalGrid, bandlimit: usize) -> Result<Self> {
        grid.check_bandlimit(bandlimit)?;
        let n_lat = grid.n_lat();
        let t = tri_len(bandlimit);
        let mut legendre = vec![0.0; n_lat * t];
        for k in 0..n_lat {
            let th = grid.colatitude(k);
            // exact zeros at the poles keep m > 0 rows clean
            let (c, s) = if k == 0 {
                (1.0, 0.0)
            } else if k == n_lat - 1 {
                (-1.0, 0.0)
            } else {
                (th.cos(), th.sin())
            };
            fill_normalized(bandlimit, c, s, &mut legendre[k * t..(k + 1) * t]);
        }
        let sw: Vec<f64> = grid.ring_weights().iter().map(|w| w.sqrt()).collect();
        let mut pinv = Vec::with_capacity(bandlimit);
        for m in 0..bandlimit {
            let nl = bandlimit - m;
            let sm = if m == 0 { 1.0 } else { SQRT2 };
            let a = DMatrix::from_fn(n_lat, nl, |k, j| sw[k] * sm * legendre[k * t + tri(m + j, m)]);
            // Thin QR gives the least-squares inverse R⁻¹Qᵀ of the full-rank system.
            let qr = a.qr();
            let p = qr
                .r()
                .solve_upper_triangular(&qr.q().transpose())
                .ok_or_else(|| Error::InvalidGrid(format!("rank-deficient system for order {m}")))?;
            let mut rows = vec![0.0; nl * n_lat];
            for j in 0..nl {
                for k in 0..n_lat {
                    rows[j * n_lat + k] = p[(j, k)] * sw[k];
                }
            }
            pinv.push(rows);
        }
        let mut planner = FftPlanner::new();
        let fft_fwd = planner.plan_fft_forward(grid.n_lon());
        let fft_inv = planner.plan_fft_inverse(grid.n_lon());
        Ok(ShtPlan {
            grid: grid.clone(),
            bandlimit,
            legendre,
            pinv,
            fft_fwd,
            fft_inv,
        })
    }

    pub fn grid(&self) -> &SphericalGrid {
        &self.grid
    }

    pub fn bandlimit(&self) -> usize {
        self.bandlimit
    }

    pub fn scratch(&self) -> ShtScratch {
        let n_lon = self.grid.n_lon();
        let n_lat = self.grid.n_lat();
        let fl = self
            .fft_fwd
            .get_inplace_scratch_len()
            .max(self.fft_inv.get_inplace_scratch_len());
        ShtScratch {
            ring: vec![Complex64::new(0.0, 0.0); n_lon],
            fft: vec![Complex64::new(0.0, 0.0); fl],
            cos_part: vec![0.0; n_lat * self.bandlimit.max(1)],
            sin_part: vec![0.0; n_lat * self.bandlimit.max(1)],
        }
    }

    pub fn forward(&self, field: &[f64]) -> Result<HarmonicCoeffs> {
        let mut out = HarmonicCoeffs::zeros(self.bandlimit);
        let mut scratch = self.scratch();
        self.forward_into(field, &mut out, &mut scratch)?;
        Ok(out)
    }

    pub fn forward_into(
        &self,
        field: &[f64],
        out: &mut HarmonicCoeffs,
        scratch: &mut ShtScratch,
    ) -> Result<()> {
        let (n_lat, n_lon, lmax) = (self.grid.n_lat(), self.grid.n_lon(), self.bandlimit);
        if field.len() != n_lat * n_lon {
            return Err(Error::ShapeMismatch(format!(
                "field has {} samples, grid has {}",
                field.len(),
                n_lat * n_lon
            )));
        }
        if out.bandlimit != lmax {
            *out = HarmonicCoeffs::zeros(lmax);
        }
        let inv_n = 1.0 / n_lon as f64;
        for k in 0..n_lat {
            for (z, &v) in scratch.ring.iter_mut().zip(&field[k * n_lon..(k + 1) * n_lon]) {
                *z = Complex64::new(v, 0.0);
            }
            self.fft_fwd.process_with_scratch(&mut scratch.ring, &mut scratch.fft);
            for m in 0..lmax {
                let f = scratch.ring[m];
                let (c, s) = if m == 0 {
                    (f.re * inv_n, 0.0)
                } else {
                    (2.0 * f.re * inv_n, -2.0 * f.im * inv_n)
                };
                scratch.cos_part[m * n_lat + k] = c;
                scratch.sin_part[m * n_lat + k] = s;
            }
        }
        for m in 0..lmax {
            let p = &self.pinv[m];
            let cp = &scratch.cos_part[m * n_lat..(m + 1) * n_lat];
            let sp = &scratch.sin_part[m * n_lat..(m + 1) * n_lat];
            for j in 0..(lmax - m) {
                let row = &p[j * n_lat..(j + 1) * n_lat];
                let l = m + j;
                out.set(l, m as i64, dot(row, cp));
                if m > 0 {
                    out.set(l, -(m as i64), dot(row, sp));
                }
            }
        }
        Ok(())
    }

    pub fn inverse(&self, coeffs: &HarmonicCoeffs) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.grid.len()];
        let mut scratch = self.scratch();
        self.inverse_into(coeffs, &mut out, &mut scratch)?;
        Ok(out)
    }

    /// Evaluates `coeffs` (bandlimit at most the plan's) on the grid.
    pub fn inverse_into(
        &self,
        coeffs: &HarmonicCoeffs,
        out: &mut [f64],
        scratch: &mut ShtScratch,
    ) -> Result<()> {
        let (n_lat, n_lon) = (self.grid.n_lat(), self.grid.n_lon());
        if coeffs.bandlimit > self.bandlimit {
            return Err(Error::GridMismatch {
                n_lat,
                n_lon,
                bandlimit: coeffs.bandlimit,
            });
        }
        if out.len() != n_lat * n_lon {
            return Err(Error::ShapeMismatch(format!(
                "output has {} samples, grid has {}",
                out.len(),
                n_lat * n_lon
            )));
        }
        let lmax = coeffs.bandlimit;
        let t = tri_len(self.bandlimit);
        for k in 0..n_lat {
            let leg = &self.legendre[k * t..(k + 1) * t];
            scratch.ring.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
            for m in 0..lmax {
                let mut c = 0.0;
                let mut s = 0.0;
                for l in m..lmax {
                    let p = leg[tri(l, m)];
                    c += coeffs.get(l, m as i64) * p;
                    if m > 0 {
                        s += coeffs.get(l, -(m as i64)) * p;
                    }
                }
                if m == 0 {
                    scratch.ring[0].re += c;
                } else {
                    let z = Complex64::new(c, -s) * (0.5 * SQRT2);
                    scratch.ring[m % n_lon] += z;
                    scratch.ring[(n_lon - m % n_lon) % n_lon] += z.conj();
                }
            }
            self.fft_inv.process_with_scratch(&mut scratch.ring, &mut scratch.fft);
            for (o, z) in out[k * n_lon..(k + 1) * n_lon].iter_mut().zip(&scratch.ring) {
                *o = z.re;
            }
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in 4 * chunks..a.len() {
        s += a[j] * b[j];
    }
    s
}

/// One-shot forward transform (builds a plan).
pub fn sht_forward(field: &[f64], grid: &SphericalGrid, bandlimit: usize) -> Result<HarmonicCoeffs> {
    ShtPlan::new(grid, bandlimit)?.forward(field)
}

/// One-shot inverse transform (builds a plan at the coefficients' bandlimit).
pub fn sht_inverse(coeffs: &HarmonicCoeffs, grid: &SphericalGrid) -> Result<Vec<f64>> {
    ShtPlan::new(grid, coeffs.bandlimit())?.inverse(coeffs)
}
