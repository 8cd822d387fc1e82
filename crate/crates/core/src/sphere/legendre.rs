//! Orthonormal associated Legendre functions and real spherical harmonics.
//!
//! `P̄_ℓ^m(cos θ)` is normalised so that `∫ P̄_ℓ^m(cos θ)² sin θ dθ dφ = 1`
//! over the sphere for `m = 0` (and `1/2` of that for `m > 0`, which the
//! `√2` factor in [`real_sh`] compensates). No Condon–Shortley phase.

use core::f64::consts::PI;

/// Index of `(ℓ, m)` with `0 <= m <= ℓ` in a triangular table.
#[inline]
pub fn tri(l: usize, m: usize) -> usize {
    l * (l + 1) / 2 + m
}

/// Size of a triangular table holding all `ℓ < bandlimit`.
pub fn tri_len(bandlimit: usize) -> usize {
    bandlimit * (bandlimit + 1) / 2
}

/// Fills `out[tri(ℓ, m)]` with `P̄_ℓ^m(cos θ)` for all `ℓ < bandlimit`.
pub fn fill_normalized(bandlimit: usize, cos_t: f64, sin_t: f64, out: &mut [f64]) {
    debug_assert!(out.len() >= tri_len(bandlimit));
    if bandlimit == 0 {
        return;
    }
    let mut pmm = 1.0 / (4.0 * PI).sqrt();
    for m in 0..bandlimit {
        if m > 0 {
            pmm *= ((2 * m + 1) as f64 / (2 * m) as f64).sqrt() * sin_t;
        }
        out[tri(m, m)] = pmm;
        if m + 1 < bandlimit {
            out[tri(m + 1, m)] = (2.0 * m as f64 + 3.0).sqrt() * cos_t * pmm;
        }
        for l in (m + 2)..bandlimit {
            let lf = l as f64;
            let mf = m as f64;
            let a = ((4.0 * lf * lf - 1.0) / (lf * lf - mf * mf)).sqrt();
            let b = (((lf - 1.0) * (lf - 1.0) - mf * mf) / (4.0 * (lf - 1.0) * (lf - 1.0) - 1.0)).sqrt();
            out[tri(l, m)] = a * (cos_t * out[tri(l - 1, m)] - b * out[tri(l - 2, m)]);
        }
    }
}

/// Single value `P̄_ℓ^m(cos θ)`.
pub fn normalized(l: usize, m: usize, theta: f64) -> f64 {
    assert!(m <= l, "order exceeds degree");
    let mut table = vec![0.0; tri_len(l + 1)];
    fill_normalized(l + 1, theta.cos(), theta.sin(), &mut table);
    table[tri(l, m)]
}

/// Orthonormal real spherical harmonic `Y_ℓm(θ, φ)`, `-ℓ <= m <= ℓ`;
/// `m > 0` carries `cos(mφ)`, `m < 0` carries `sin(|m|φ)`.
pub fn real_sh(l: usize, m: i64, theta: f64, phi: f64) -> f64 {
    let am = m.unsigned_abs() as usize;
    let p = normalized(l, am, theta);
    match m.cmp(&0) {
        core::cmp::Ordering::Equal => p,
        core::cmp::Ordering::Greater => core::f64::consts::SQRT_2 * p * (am as f64 * phi).cos(),
        core::cmp::Ordering::Less => core::f64::consts::SQRT_2 * p * (am as f64 * phi).sin(),
    }
}

/// Legendre polynomial `P_ℓ(x)` (unnormalised), by the three-term recurrence.
pub fn legendre_p(l: usize, x: f64) -> f64 {
    let (mut p0, mut p1) = (1.0, x);
    if l == 0 {
        return p0;
    }
    for k in 2..=l {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    p1
}
