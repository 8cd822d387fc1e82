use core::f64::consts::PI;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::{ShtPlan, SphericalGrid};
use crate::{CenterId, Error, Result};

/// Shape of the harmonic tiling.
///
/// The transition between level `t` and `t + 1` spans degrees
/// `[transition_start · 2^t, 2^t]`; inside it the two kernels are a
/// cosine/sine pair so their squares add to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub transition_start: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        KernelParams {
            transition_start: 0.5,
        }
    }
}

/// Center layout of one level: an equiangular grid of `2^j + 1` rings by
/// `2^(j+1)` longitudes whose pole rings collapse to single centers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelLayout {
    pub level: usize,
    pub n_rings: usize,
    pub n_lon: usize,
    /// Exclusive harmonic bandlimit of this level's coefficients.
    pub bandlimit: usize,
}

impl LevelLayout {
    fn new(level: usize, frame_bandlimit: usize) -> Self {
        let p = 1usize << level;
        LevelLayout {
            level,
            n_rings: p + 1,
            n_lon: 2 * p,
            bandlimit: frame_bandlimit.min(p),
        }
    }

    /// Distinct centers: interior rings times longitudes, plus the two poles.
    pub fn n_centers(&self) -> usize {
        (self.n_rings - 2) * self.n_lon + 2
    }

    /// Nominal center spacing (ring separation) in radians.
    pub fn spacing(&self) -> f64 {
        PI / (self.n_rings - 1) as f64
    }

    /// `(ring, position within ring)` of a center; poles have position 0.
    pub fn ring_of(&self, index: usize) -> (usize, usize) {
        if index == 0 {
            (0, 0)
        } else if index == self.n_centers() - 1 {
            (self.n_rings - 1, 0)
        } else {
            let i = index - 1;
            (1 + i / self.n_lon, i % self.n_lon)
        }
    }

    pub fn index_of(&self, ring: usize, pos: usize) -> usize {
        if ring == 0 {
            0
        } else if ring == self.n_rings - 1 {
            self.n_centers() - 1
        } else {
            1 + (ring - 1) * self.n_lon + pos % self.n_lon
        }
    }

    /// `(colatitude, longitude)` of a center in radians.
    pub fn position(&self, index: usize) -> (f64, f64) {
        let (ring, pos) = self.ring_of(index);
        let theta = PI * ring as f64 / (self.n_rings - 1) as f64;
        let phi = 2.0 * PI * pos as f64 / self.n_lon as f64;
        (theta, phi)
    }

    pub fn grid(&self) -> SphericalGrid {
        SphericalGrid::equiangular(self.n_rings, self.n_lon).expect("level grid")
    }

    /// Expands center values to the full level grid (pole values repeated).
    pub fn expand(&self, centers: &[f64], grid_values: &mut [f64]) {
        let n = self.n_lon;
        grid_values[..n].fill(centers[0]);
        let interior = (self.n_rings - 2) * n;
        grid_values[n..n + interior].copy_from_slice(&centers[1..1 + interior]);
        grid_values[n + interior..].fill(centers[self.n_centers() - 1]);
    }

    /// Collapses level-grid samples to centers (pole rings take their mean).
    pub fn collapse(&self, grid_values: &[f64], centers: &mut [f64]) {
        let n = self.n_lon;
        let interior = (self.n_rings - 2) * n;
        centers[0] = grid_values[..n].iter().sum::<f64>() / n as f64;
        centers[1..1 + interior].copy_from_slice(&grid_values[n..n + interior]);
        centers[self.n_centers() - 1] = grid_values[n + interior..].iter().sum::<f64>() / n as f64;
    }
}

/// Tight axisymmetric wavelet frame on the sphere.
#[derive(Debug)]
pub struct WaveletFrame {
    bandlimit: usize,
    n_levels: usize,
    params: KernelParams,
    kernels: Vec<Vec<f64>>,
    layouts: Vec<LevelLayout>,
    plans: Vec<OnceLock<ShtPlan>>,
}

impl Clone for WaveletFrame {
    fn clone(&self) -> Self {
        build_frame(self.bandlimit, self.n_levels, self.params).expect("frame was valid")
    }
}

/// Builds the frame: kernels over degrees `ℓ < bandlimit` and per-level
/// center layouts. Level transform plans are created lazily.
pub fn build_frame(bandlimit: usize, n_levels: usize, params: KernelParams) -> Result<WaveletFrame> {
    if n_levels < 2 {
        return Err(Error::InvalidFrame(format!("need at least 2 levels, got {n_levels}")));
    }
    if n_levels > 24 {
        return Err(Error::InvalidFrame(format!("{n_levels} levels is unsupported")));
    }
    if !(0.5..1.0).contains(&params.transition_start) {
        return Err(Error::InvalidFrame(format!(
            "transition_start must lie in [0.5, 1), got {}",
            params.transition_start
        )));
    }
    let required = 1usize << (n_levels - 1);
    if bandlimit < required {
        return Err(Error::BandlimitTooSmall {
            bandlimit,
            levels: n_levels,
            required,
        });
    }
    let max = 1usize << n_levels;
    if bandlimit > max {
        return Err(Error::BandlimitTooLarge {
            bandlimit,
            levels: n_levels,
            max,
        });
    }
    let kernels = (1..=n_levels)
        .map(|j| (0..bandlimit).map(|l| kernel_value(j, l as f64, n_levels, params)).collect())
        .collect();
    let layouts = (1..=n_levels).map(|j| LevelLayout::new(j, bandlimit)).collect();
    Ok(WaveletFrame {
        bandlimit,
        n_levels,
        params,
        kernels,
        layouts,
        plans: (0..n_levels).map(|_| OnceLock::new()).collect(),
    })
}

/// Kernel `κ_j(ℓ)` of the tiling, defined for every real degree.
pub(crate) fn kernel_value(level: usize, l: f64, n_levels: usize, params: KernelParams) -> f64 {
    let transition = |t: usize| -> (f64, f64) {
        let hi = (1usize << t) as f64;
        (params.transition_start * hi, hi)
    };
    let lower = if level == 1 {
        1.0
    } else {
        let (a, b) = transition(level - 1);
        if l <= a {
            0.0
        } else if l >= b {
            1.0
        } else {
            (0.5 * PI * (l - a) / (b - a)).sin()
        }
    };
    let upper = if level == n_levels {
        1.0
    } else {
        let (a, b) = transition(level);
        if l <= a {
            1.0
        } else if l >= b {
            0.0
        } else {
            (0.5 * PI * (l - a) / (b - a)).cos()
        }
    };
    lower * upper
}

impl WaveletFrame {
    pub fn bandlimit(&self) -> usize {
        self.bandlimit
    }

    pub fn n_levels(&self) -> usize {
        self.n_levels
    }

    pub fn params(&self) -> KernelParams {
        self.params
    }

    /// `κ_j(ℓ)` for `ℓ < bandlimit`; zero beyond.
    pub fn kernel(&self, level: usize, l: usize) -> f64 {
        self.kernels[level - 1].get(l).copied().unwrap_or(0.0)
    }

    /// `κ_j` extended past the bandlimit (used to check the tiling itself).
    pub fn kernel_unbounded(&self, level: usize, l: usize) -> f64 {
        kernel_value(level, l as f64, self.n_levels, self.params)
    }

    pub fn kernels(&self, level: usize) -> &[f64] {
        &self.kernels[level - 1]
    }

    /// Largest `|Σ_j κ_j(ℓ)² − 1|` over `ℓ <= up_to`.
    pub fn partition_residual(&self, up_to: usize) -> f64 {
        (0..=up_to)
            .map(|l| {
                let s: f64 = (1..=self.n_levels)
                    .map(|j| self.kernel_unbounded(j, l).powi(2))
                    .sum();
                (s - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    pub fn layout(&self, level: usize) -> &LevelLayout {
        &self.layouts[level - 1]
    }

    pub fn layouts(&self) -> &[LevelLayout] {
        &self.layouts
    }

    pub fn center_count(&self, level: usize) -> usize {
        self.layout(level).n_centers()
    }

    pub fn total_centers(&self) -> usize {
        self.layouts.iter().map(|l| l.n_centers()).sum()
    }

    /// `(latitude, longitude)` of a center, radians.
    pub fn center_latlon(&self, id: CenterId) -> (f64, f64) {
        let (theta, phi) = self.layout(id.level).position(id.index);
        (0.5 * PI - theta, phi)
    }

    pub fn check_center(&self, id: CenterId) -> Result<()> {
        if id.level == 0 || id.level > self.n_levels {
            return Err(Error::InvalidIndex(format!(
                "level {} outside 1..={}",
                id.level, self.n_levels
            )));
        }
        if id.index >= self.center_count(id.level) {
            return Err(Error::InvalidIndex(format!(
                "center {} outside level {} ({} centers)",
                id.index,
                id.level,
                self.center_count(id.level)
            )));
        }
        Ok(())
    }

    /// Transform plan of a level grid at the level bandlimit.
    pub fn level_plan(&self, level: usize) -> &ShtPlan {
        self.plans[level - 1].get_or_init(|| {
            let layout = self.layout(level);
            ShtPlan::new(&layout.grid(), layout.bandlimit).expect("level grid resolves its band")
        })
    }

    /// All centers of the given levels in canonical order (level, ring, index).
    pub fn centers_in(&self, levels: core::ops::RangeInclusive<usize>) -> Vec<CenterId> {
        levels
            .flat_map(|j| (0..self.center_count(j)).map(move |i| CenterId::new(j, i)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_of_unity_small_frame() {
        let f = build_frame(8, 3, KernelParams::default()).unwrap();
        for l in 0..=8 {
            let s: f64 = (1..=3).map(|j| f.kernel_unbounded(j, l).powi(2)).sum();
            assert!((s - 1.0).abs() < 1e-15, "l={l}: {s}");
        }
        assert!(f.partition_residual(64) <= 1e-12);
    }

    #[test]
    fn kernels_are_dyadic_and_ordered() {
        let f = build_frame(64, 6, KernelParams::default()).unwrap();
        for j in 1..=6 {
            let support: Vec<usize> = (0..64).filter(|&l| f.kernel(j, l) > 0.0).collect();
            let hi = *support.last().unwrap();
            assert!(hi < (1 << j), "level {j} reaches degree {hi}");
            if j >= 2 {
                assert_eq!(f.kernel(j, 0), 0.0);
                assert!(support[0] > (1 << (j - 2)));
            }
        }
        assert_eq!(f.kernel(1, 0), 1.0);
    }

    #[test]
    fn sharper_transitions_keep_unity() {
        let f = build_frame(32, 5, KernelParams { transition_start: 0.8 }).unwrap();
        assert!(f.partition_residual(40) <= 1e-12);
        assert!(build_frame(32, 5, KernelParams { transition_start: 0.3 }).is_err());
    }

    #[test]
    fn bandlimit_preconditions() {
        assert!(matches!(
            build_frame(4, 4, KernelParams::default()),
            Err(Error::BandlimitTooSmall { required: 8, .. })
        ));
        assert!(matches!(
            build_frame(17, 4, KernelParams::default()),
            Err(Error::BandlimitTooLarge { .. })
        ));
        assert!(build_frame(8, 1, KernelParams::default()).is_err());
    }

    #[test]
    fn center_counts() {
        let f = build_frame(8, 3, KernelParams::default()).unwrap();
        assert_eq!(f.center_count(1), 6);
        assert_eq!(f.center_count(2), 26);
        assert_eq!(f.center_count(3), 114);
        let full = build_frame(256, 9, KernelParams::default()).unwrap();
        assert_eq!(full.total_centers(), 697_022);
        assert!((1..9).all(|j| full.center_count(j) <= full.center_count(j + 1)));
    }

    #[test]
    fn ring_indexing_round_trips() {
        let lay = LevelLayout::new(3, 8);
        for i in 0..lay.n_centers() {
            let (r, p) = lay.ring_of(i);
            assert_eq!(lay.index_of(r, p), i);
        }
        let mut grid = vec![0.0; lay.n_rings * lay.n_lon];
        let centers: Vec<f64> = (0..lay.n_centers()).map(|i| i as f64).collect();
        lay.expand(&centers, &mut grid);
        let mut back = vec![0.0; lay.n_centers()];
        lay.collapse(&grid, &mut back);
        assert_eq!(back, centers);
    }
}
