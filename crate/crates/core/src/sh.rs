//! Real spherical-harmonics basis (degrees 0..=3) used for view-dependent color.
//!
//! Coefficient ordering and constants follow the usual Gaussian-splatting
//! convention, so that `color = 0.5 + sum_k Y_k(dir) * sh_k` per channel.

use nalgebra::Vector3;

pub const MAX_DEGREE: usize = 3;

pub const C0: f64 = 0.282_094_791_773_878_14;
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

/// Number of SH coefficients per color channel for `degree`.
pub const fn coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Converts a plain RGB color to the degree-0 coefficient that reproduces it.
pub fn rgb_to_dc(value: f64) -> f64 {
    (value - 0.5) / C0
}

/// Evaluates the basis at a unit direction. Only the first `coeff_count(degree)`
/// entries are meaningful.
pub fn basis(degree: usize, dir: &Vector3<f64>) -> [f64; 16] {
    let mut out = [0.0; 16];
    out[0] = C0;
    if degree == 0 {
        return out;
    }
    let (x, y, z) = (dir.x, dir.y, dir.z);
    out[1] = -C1 * y;
    out[2] = C1 * z;
    out[3] = -C1 * x;
    if degree == 1 {
        return out;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    out[4] = C2[0] * x * y;
    out[5] = C2[1] * y * z;
    out[6] = C2[2] * (2.0 * zz - xx - yy);
    out[7] = C2[3] * x * z;
    out[8] = C2[4] * (xx - yy);
    if degree == 2 {
        return out;
    }
    out[9] = C3[0] * y * (3.0 * xx - yy);
    out[10] = C3[1] * x * y * z;
    out[11] = C3[2] * y * (4.0 * zz - xx - yy);
    out[12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    out[13] = C3[4] * x * (4.0 * zz - xx - yy);
    out[14] = C3[5] * z * (xx - yy);
    out[15] = C3[6] * x * (xx - 3.0 * yy);
    out
}

/// Partial derivatives of each basis function with respect to the (x, y, z)
/// components of the direction, treating them as independent variables.
pub fn basis_gradient(degree: usize, dir: &Vector3<f64>) -> [Vector3<f64>; 16] {
    let mut g = [Vector3::zeros(); 16];
    if degree == 0 {
        return g;
    }
    let (x, y, z) = (dir.x, dir.y, dir.z);
    g[1] = Vector3::new(0.0, -C1, 0.0);
    g[2] = Vector3::new(0.0, 0.0, C1);
    g[3] = Vector3::new(-C1, 0.0, 0.0);
    if degree == 1 {
        return g;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    g[4] = Vector3::new(C2[0] * y, C2[0] * x, 0.0);
    g[5] = Vector3::new(0.0, C2[1] * z, C2[1] * y);
    g[6] = Vector3::new(-2.0 * C2[2] * x, -2.0 * C2[2] * y, 4.0 * C2[2] * z);
    g[7] = Vector3::new(C2[3] * z, 0.0, C2[3] * x);
    g[8] = Vector3::new(2.0 * C2[4] * x, -2.0 * C2[4] * y, 0.0);
    if degree == 2 {
        return g;
    }
    g[9] = Vector3::new(6.0 * C3[0] * x * y, C3[0] * (3.0 * xx - 3.0 * yy), 0.0);
    g[10] = Vector3::new(C3[1] * y * z, C3[1] * x * z, C3[1] * x * y);
    g[11] = Vector3::new(
        -2.0 * C3[2] * x * y,
        C3[2] * (4.0 * zz - xx - 3.0 * yy),
        8.0 * C3[2] * y * z,
    );
    g[12] = Vector3::new(
        -6.0 * C3[3] * x * z,
        -6.0 * C3[3] * y * z,
        C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
    );
    g[13] = Vector3::new(
        C3[4] * (4.0 * zz - 3.0 * xx - yy),
        -2.0 * C3[4] * x * y,
        8.0 * C3[4] * x * z,
    );
    g[14] = Vector3::new(2.0 * C3[5] * x * z, -2.0 * C3[5] * y * z, C3[5] * (xx - yy));
    g[15] = Vector3::new(C3[6] * (3.0 * xx - 3.0 * yy), -6.0 * C3[6] * x * y, 0.0);
    g
}
