use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{LevelLayout, WaveletFrame};
use crate::{CenterId, Error, Result};

/// Neighborhood shape used by the per-center models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConeParams {
    /// Same-level neighbors lie within `radius_scale` times the level spacing.
    pub radius_scale: f64,
    /// Number of coarser levels contributing an ancestor.
    pub ancestor_depth: usize,
}

impl Default for ConeParams {
    fn default() -> Self {
        ConeParams {
            radius_scale: 1.5,
            ancestor_depth: 2,
        }
    }
}

/// Cone of influence of one target center.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConeOfInfluence {
    pub target: CenterId,
    /// Same-level centers ordered by distance; the target comes first.
    pub neighbors: Vec<CenterId>,
    /// Nearest center at each coarser level, finest first.
    pub ancestors: Vec<CenterId>,
}

/// Great-circle distance in radians between two `(lat, lon)` points.
pub fn great_circle_distance(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let s_lat = ((lat2 - lat1) * 0.5).sin();
    let s_lon = ((lon2 - lon1) * 0.5).sin();
    let h = s_lat * s_lat + lat1.cos() * lat2.cos() * s_lon * s_lon;
    2.0 * h.clamp(0.0, 1.0).sqrt().asin()
}

fn distance_to(layout: &LevelLayout, index: usize, lat: f64, lon: f64) -> f64 {
    let (theta, phi) = layout.position(index);
    great_circle_distance(0.5 * PI - theta, phi, lat, lon)
}

fn distance_key(d: f64) -> i64 {
    (d * 1e9).round() as i64
}

/// Centers of `layout` on rings whose colatitude lies within `radius` of `theta`.
fn ring_window(layout: &LevelLayout, theta: f64, radius: f64) -> impl Iterator<Item = usize> + '_ {
    let spacing = layout.spacing();
    let last = layout.n_rings - 1;
    let lo = (((theta - radius) / spacing).floor().max(0.0) as usize).min(last);
    let hi = (((theta + radius) / spacing).ceil().max(0.0) as usize).min(last);
    (lo..=hi).flat_map(move |ring| {
        let count = if ring == 0 || ring == last { 1 } else { layout.n_lon };
        (0..count).map(move |pos| layout.index_of(ring, pos))
    })
}

/// Nearest center of `layout` to `(lat, lon)`; ties go to the lower index.
fn nearest_center(layout: &LevelLayout, lat: f64, lon: f64) -> usize {
    let theta = 0.5 * PI - lat;
    let first_pass = ring_window(layout, theta, layout.spacing());
    let mut best = (i64::MAX, usize::MAX);
    for i in first_pass {
        best = best.min((distance_key(distance_to(layout, i, lat, lon)), i));
    }
    // Any closer center must sit on a ring within the current best distance.
    let radius = best.0 as f64 * 1e-9 + 1e-9;
    for i in ring_window(layout, theta, radius) {
        best = best.min((distance_key(distance_to(layout, i, lat, lon)), i));
    }
    best.1
}

/// Same-level neighbors and coarser-level ancestors of `target`.
pub fn cone_of_influence(frame: &WaveletFrame, target: CenterId, params: &ConeParams) -> Result<ConeOfInfluence> {
    frame.check_center(target)?;
    if !(params.radius_scale >= 0.0) || !params.radius_scale.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "cone radius scale must be finite and non-negative, got {}",
            params.radius_scale
        )));
    }
    let layout = frame.layout(target.level);
    let (lat, lon) = frame.center_latlon(target);
    let radius = params.radius_scale * layout.spacing();
    let limit = distance_key(radius);

    let mut found: Vec<(i64, usize, usize)> = ring_window(layout, 0.5 * PI - lat, radius + 1e-9)
        .filter_map(|i| {
            let k = distance_key(distance_to(layout, i, lat, lon));
            (k <= limit).then(|| (k, layout.ring_of(i).0, i))
        })
        .collect();
    found.sort_unstable();
    let mut neighbors = Vec::with_capacity(found.len());
    neighbors.push(target);
    neighbors.extend(
        found
            .into_iter()
            .filter(|&(_, _, i)| i != target.index)
            .map(|(_, _, i)| CenterId::new(target.level, i)),
    );

    let ancestors = (1..=params.ancestor_depth)
        .take_while(|&d| d < target.level)
        .map(|d| {
            let level = target.level - d;
            CenterId::new(level, nearest_center(frame.layout(level), lat, lon))
        })
        .collect();

    Ok(ConeOfInfluence {
        target,
        neighbors,
        ancestors,
    })
}
