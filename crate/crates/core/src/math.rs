//! Small quaternion and matrix helpers. Quaternions are `[w, x, y, z]`.

use nalgebra::{Matrix3, Matrix4, Vector3};

pub type Quat = [f64; 4];

pub const QUAT_IDENTITY: Quat = [1.0, 0.0, 0.0, 0.0];

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn quat_norm(q: &Quat) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

/// Hamilton product `a * b`.
pub fn quat_mul(a: &Quat, b: &Quat) -> Quat {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

/// Matrix `L(a)` with `quat_mul(a, b) == L(a) * b`.
pub fn quat_left_matrix(a: &Quat) -> Matrix4<f64> {
    Matrix4::new(
        a[0], -a[1], -a[2], -a[3], //
        a[1], a[0], -a[3], a[2], //
        a[2], a[3], a[0], -a[1], //
        a[3], -a[2], a[1], a[0],
    )
}

/// Rotation matrix of a unit quaternion (the polynomial form; callers normalize).
pub fn quat_to_matrix(q: &Quat) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Partial derivatives of `quat_to_matrix` with respect to w, x, y, z.
pub fn quat_to_matrix_partials(q: &Quat) -> [Matrix3<f64>; 4] {
    let [w, x, y, z] = *q;
    let t = 2.0;
    [
        Matrix3::new(0.0, -t * z, t * y, t * z, 0.0, -t * x, -t * y, t * x, 0.0),
        Matrix3::new(
            0.0,
            t * y,
            t * z,
            t * y,
            -2.0 * t * x,
            -t * w,
            t * z,
            t * w,
            -2.0 * t * x,
        ),
        Matrix3::new(
            -2.0 * t * y,
            t * x,
            t * w,
            t * x,
            0.0,
            t * z,
            -t * w,
            t * z,
            -2.0 * t * y,
        ),
        Matrix3::new(
            -2.0 * t * z,
            -t * w,
            t * x,
            t * w,
            -2.0 * t * z,
            t * y,
            t * x,
            t * y,
            0.0,
        ),
    ]
}

/// Unit quaternion of a proper rotation matrix (Shepperd's method).
pub fn quat_from_matrix(m: &Matrix3<f64>) -> Quat {
    let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
    let q = if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (m[(2, 1)] - m[(1, 2)]) / s,
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(1, 0)] - m[(0, 1)]) / s,
        ]
    } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        [
            (m[(2, 1)] - m[(1, 2)]) / s,
            0.25 * s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
        ]
    } else if m[(1, 1)] > m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        [
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            0.25 * s,
            (m[(1, 2)] + m[(2, 1)]) / s,
        ]
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        [
            (m[(1, 0)] - m[(0, 1)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
            (m[(1, 2)] + m[(2, 1)]) / s,
            0.25 * s,
        ]
    };
    let n = quat_norm(&q);
    if n == 1.0 {
        q
    } else {
        [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
    }
}

/// Quaternion for a rotation of `angle` radians about `axis`.
pub fn quat_from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Quat {
    let a = axis.normalize();
    let (s, c) = (0.5 * angle).sin_cos();
    [c, a.x * s, a.y * s, a.z * s]
}

/// Nearest rotation to `m` (orthogonal polar factor).
///
/// Uses the Newton iteration `R <- (R + R^-T) / 2`, which leaves an exact
/// rotation (in particular the identity) untouched. Singular or reflecting
/// inputs fall back to Gram-Schmidt orthonormalization of the columns.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    if m.determinant() > 1e-12 {
        let mut r = *m;
        for _ in 0..64 {
            let Some(inv) = r.try_inverse() else { break };
            let next = (r + inv.transpose()) * 0.5;
            let delta = (next - r).abs().max();
            r = next;
            if delta < 1e-15 {
                break;
            }
        }
        if r.determinant() > 0.0 && r.iter().all(|v| v.is_finite()) {
            return r;
        }
    }
    orthonormalize(m)
}

fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let pick = |v: Vector3<f64>, fallback: Vector3<f64>| {
        if v.norm() > 1e-12 {
            v.normalize()
        } else {
            fallback
        }
    };
    let c0 = pick(m.column(0).into_owned(), Vector3::x());
    let mut c1 = m.column(1).into_owned();
    c1 -= c0 * c0.dot(&c1);
    let c1 = pick(
        c1,
        c0.cross(&Vector3::z())
            .try_normalize(1e-12)
            .unwrap_or_else(|| c0.cross(&Vector3::y()).normalize()),
    );
    let c2 = c0.cross(&c1);
    Matrix3::from_columns(&[c0, c1, c2])
}
