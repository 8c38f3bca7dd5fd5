//! Real spherical harmonics up to degree 3 (graphics sign convention).

use crate::error::{Error, Result};
use crate::linalg::Vec3;
use crate::scalar::Real;

pub const MAX_SH_DEGREE: usize = 3;

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Number of coefficients per color channel for a degree.
pub const fn coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

pub fn check_degree(degree: usize) -> Result<()> {
    if degree > MAX_SH_DEGREE {
        return Err(Error::invalid(format!(
            "sh degree {degree} outside 0..={MAX_SH_DEGREE}"
        )));
    }
    Ok(())
}

/// DC coefficient that reproduces `value` in a channel.
pub fn dc_from_color<T: Real>(value: T) -> T {
    (value - T::lit(0.5)) / T::lit(C0)
}

/// Basis values Y_k(dir) for k < coeff_count(degree); the rest are zero.
pub fn basis<T: Real>(degree: usize, dir: &Vec3<T>) -> [T; 16] {
    let mut y = [T::zero(); 16];
    let (x, yy, z) = (dir[0], dir[1], dir[2]);
    let c = T::lit;
    y[0] = c(C0);
    if degree >= 1 {
        y[1] = -c(C1) * yy;
        y[2] = c(C1) * z;
        y[3] = -c(C1) * x;
    }
    if degree >= 2 {
        let (xx, y2, zz) = (x * x, yy * yy, z * z);
        y[4] = c(C2[0]) * x * yy;
        y[5] = c(C2[1]) * yy * z;
        y[6] = c(C2[2]) * (c(2.0) * zz - xx - y2);
        y[7] = c(C2[3]) * x * z;
        y[8] = c(C2[4]) * (xx - y2);
    }
    if degree >= 3 {
        let (xx, y2, zz) = (x * x, yy * yy, z * z);
        y[9] = c(C3[0]) * yy * (c(3.0) * xx - y2);
        y[10] = c(C3[1]) * x * yy * z;
        y[11] = c(C3[2]) * yy * (c(4.0) * zz - xx - y2);
        y[12] = c(C3[3]) * z * (c(2.0) * zz - c(3.0) * xx - c(3.0) * y2);
        y[13] = c(C3[4]) * x * (c(4.0) * zz - xx - y2);
        y[14] = c(C3[5]) * z * (xx - y2);
        y[15] = c(C3[6]) * x * (xx - c(3.0) * y2);
    }
    y
}

/// Partial derivatives dY_k/d(x, y, z), treating the direction components as free.
pub fn basis_grad<T: Real>(degree: usize, dir: &Vec3<T>) -> [Vec3<T>; 16] {
    let z0 = T::zero();
    let mut g = [[z0; 3]; 16];
    let (x, y, z) = (dir[0], dir[1], dir[2]);
    let c = T::lit;
    if degree >= 1 {
        g[1] = [z0, -c(C1), z0];
        g[2] = [z0, z0, c(C1)];
        g[3] = [-c(C1), z0, z0];
    }
    if degree >= 2 {
        g[4] = [c(C2[0]) * y, c(C2[0]) * x, z0];
        g[5] = [z0, c(C2[1]) * z, c(C2[1]) * y];
        g[6] = [c(-2.0 * C2[2]) * x, c(-2.0 * C2[2]) * y, c(4.0 * C2[2]) * z];
        g[7] = [c(C2[3]) * z, z0, c(C2[3]) * x];
        g[8] = [c(2.0 * C2[4]) * x, c(-2.0 * C2[4]) * y, z0];
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        let k = |i: usize| c(C3[i]);
        g[9] = [k(0) * c(6.0) * x * y, k(0) * c(3.0) * (xx - yy), z0];
        g[10] = [k(1) * y * z, k(1) * x * z, k(1) * x * y];
        g[11] = [
            k(2) * c(-2.0) * x * y,
            k(2) * (c(4.0) * zz - xx - c(3.0) * yy),
            k(2) * c(8.0) * y * z,
        ];
        g[12] = [
            k(3) * c(-6.0) * x * z,
            k(3) * c(-6.0) * y * z,
            k(3) * (c(6.0) * zz - c(3.0) * xx - c(3.0) * yy),
        ];
        g[13] = [
            k(4) * (c(4.0) * zz - c(3.0) * xx - yy),
            k(4) * c(-2.0) * x * y,
            k(4) * c(8.0) * x * z,
        ];
        g[14] = [k(5) * c(2.0) * x * z, k(5) * c(-2.0) * y * z, k(5) * (xx - yy)];
        g[15] = [k(6) * c(3.0) * (xx - yy), k(6) * c(-6.0) * x * y, z0];
    }
    g
}

/// Unclamped color: Σ c_k Y_k(dir) + 0.5 per channel.
///
/// `coeffs` is laid out channel-major: `coeffs[ch * K + k]`.
pub fn eval_raw<T: Real>(coeffs: &[T], degree: usize, dir: &Vec3<T>) -> [T; 3] {
    let k = coeff_count(degree);
    let y = basis(degree, dir);
    let mut rgb = [T::lit(0.5); 3];
    for (ch, out) in rgb.iter_mut().enumerate() {
        for i in 0..k {
            *out += coeffs[ch * k + i] * y[i];
        }
    }
    rgb
}

/// View-dependent color clamped to [0, 1].
pub fn evaluate_sh<T: Real>(coeffs: &[T], degree: usize, view_dir: &Vec3<T>) -> Result<[T; 3]> {
    check_degree(degree)?;
    if coeffs.len() != 3 * coeff_count(degree) {
        return Err(Error::DimensionMismatch {
            field: "sh_coeffs".into(),
            expected: 3 * coeff_count(degree),
            found: coeffs.len(),
        });
    }
    let raw = eval_raw(coeffs, degree, view_dir);
    Ok(raw.map(|v| v.max(T::zero()).min(T::one())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_dc_gives_mid_grey() {
        let c = [0.0f64; 3];
        for dir in [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, -1.0, 0.0]] {
            assert_eq!(evaluate_sh(&c, 0, &dir).unwrap(), [0.5; 3]);
        }
    }

    #[test]
    fn bright_dc_clamps_to_one() {
        let c = [5.0f64, 0.0, -5.0];
        let rgb = evaluate_sh(&c, 0, &[0.0, 0.0, 1.0]).unwrap();
        assert_eq!(rgb, [1.0, 0.5, 0.0]);
    }

    #[test]
    fn degree_out_of_range() {
        assert!(evaluate_sh(&[0.0f64; 75], 4, &[0.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn linear_band_flips_with_z() {
        // direct polynomial evaluation of the degree-1 real basis
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c: Vec<f64> = (0..12).map(|_| rng.random_range(-0.2..0.2)).collect();
        let up = eval_raw(&c, 1, &[0.0, 0.0, 1.0]);
        let down = eval_raw(&c, 1, &[0.0, 0.0, -1.0]);
        for ch in 0..3 {
            let c10 = c[ch * 4 + 2];
            let expected = 2.0 * c10 * 0.488_602_511_902_919_9;
            assert!(((up[ch] - down[ch]) - expected).abs() < 1e-15);
            // independent oracle: 0.5 + C0*c00 + C1*(-y c1m1 + z c10 - x c11)
            let oracle = 0.5 + 0.282_094_791_773_878_14 * c[ch * 4] + 0.488_602_511_902_919_9 * c10;
            assert!((up[ch] - oracle).abs() < 1e-15);
        }
    }

    #[test]
    fn basis_gradient_matches_differences() {
        let dir = [0.3f64, -0.5, 0.7];
        let g = basis_grad(3, &dir);
        for axis in 0..3 {
            let h = 1e-6;
            let mut p = dir;
            let mut m = dir;
            p[axis] += h;
            m[axis] -= h;
            let (bp, bm) = (basis(3, &p), basis(3, &m));
            for k in 0..16 {
                let num = (bp[k] - bm[k]) / (2.0 * h);
                assert!((num - g[k][axis]).abs() < 1e-8, "k={k} axis={axis}");
            }
        }
    }

    #[test]
    fn linear_before_clamp() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c: Vec<f64> = (0..48).map(|_| rng.random_range(-0.05..0.05)).collect();
        let scaled: Vec<f64> = c.iter().map(|v| 1.7 * v).collect();
        let dir = [0.6, 0.0, 0.8];
        let a = evaluate_sh(&c, 3, &dir).unwrap();
        let b = evaluate_sh(&scaled, 3, &dir).unwrap();
        for ch in 0..3 {
            assert!(((b[ch] - 0.5) - 1.7 * (a[ch] - 0.5)).abs() < 1e-14);
        }
    }
}
