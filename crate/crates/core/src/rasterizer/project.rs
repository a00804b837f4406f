use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use rayon::prelude::*;

use super::{RenderSettings, SplatGradients, SplatRecord};
use crate::error::{Error, Result};
use crate::math;
use crate::model::{ActivatedGradients, Camera, PosedGaussianSet};
use crate::sh;

/// Per-Gaussian intermediates shared by the forward and backward projection.
struct Projected {
    cam_point: Vector3<f64>,
    jacobian: Matrix2x3<f64>,
    cov_cam: Matrix3<f64>,
    mean: [f64; 2],
    cov2: [f64; 3],
}

fn project_one(
    set: &PosedGaussianSet,
    i: usize,
    camera: &Camera,
    settings: &RenderSettings,
) -> Option<Projected> {
    let w = &camera.world_to_camera;
    let t = w.apply(&set.centers[i]);
    let z = t.z;
    if !(z > camera.near && z < camera.far) {
        return None;
    }
    let u = camera.fx * t.x / z + camera.cx;
    let v = camera.fy * t.y / z + camera.cy;
    let (wf, hf) = (camera.width as f64, camera.height as f64);
    let g = settings.guard_band;
    if u < -g * wf || u > (1.0 + g) * wf || v < -g * hf || v > (1.0 + g) * hf {
        return None;
    }
    let jacobian = Matrix2x3::new(
        camera.fx / z,
        0.0,
        -camera.fx * t.x / (z * z),
        0.0,
        camera.fy / z,
        -camera.fy * t.y / (z * z),
    );
    let cov_cam = w.rotation * set.covariance(i) * w.rotation.transpose();
    let c2 = jacobian * cov_cam * jacobian.transpose();
    Some(Projected {
        cam_point: t,
        jacobian,
        cov_cam,
        mean: [u, v],
        cov2: [
            c2[(0, 0)] + settings.dilation,
            c2[(0, 1)],
            c2[(1, 1)] + settings.dilation,
        ],
    })
}

/// Unclamped view-dependent color and the unit view direction.
fn raw_color(
    set: &PosedGaussianSet,
    i: usize,
    camera_pos: &Vector3<f64>,
) -> ([f64; 3], Vector3<f64>, f64) {
    let offset = set.centers[i] - camera_pos;
    let dist = offset.norm();
    let dir = if dist > 0.0 {
        offset / dist
    } else {
        Vector3::z()
    };
    let basis = sh::basis(set.sh_degree, &dir);
    let coeffs = set.sh_of(i);
    let mut c = [0.5; 3];
    for (k, b) in basis
        .iter()
        .take(sh::coeff_count(set.sh_degree))
        .enumerate()
    {
        for ch in 0..3 {
            c[ch] += b * coeffs[k * 3 + ch];
        }
    }
    (c, dir, dist)
}

/// Projects with default settings.
pub fn project(set: &PosedGaussianSet, camera: &Camera) -> Result<Vec<SplatRecord>> {
    project_with(set, camera, &RenderSettings::default())
}

/// EWA projection: `Sigma' = J W Sigma W^T J^T + dilation * I`. Gaussians
/// outside the depth range or the guard-banded viewport are culled.
pub fn project_with(
    set: &PosedGaussianSet,
    camera: &Camera,
    settings: &RenderSettings,
) -> Result<Vec<SplatRecord>> {
    camera.validate()?;
    let cam_pos = camera.position();
    let records = (0..set.len())
        .into_par_iter()
        .filter_map(|i| {
            let p = project_one(set, i, camera, settings)?;
            let [a, b, c] = p.cov2;
            let det = a * c - b * b;
            if !(det > 0.0) {
                return None;
            }
            let (color, _, _) = raw_color(set, i, &cam_pos);
            Some(SplatRecord {
                mean: p.mean,
                cov: p.cov2,
                conic: [c / det, -b / det, a / det],
                depth: p.cam_point.z,
                color: color.map(|v| v.clamp(0.0, 1.0)),
                opacity: set.opacities[i],
                source: i,
            })
        })
        .collect();
    Ok(records)
}

/// Chains per-record screen-space gradients back to the posed, activated
/// Gaussians. `records` must be the ones `grads` is indexed by.
pub fn project_backward(
    set: &PosedGaussianSet,
    camera: &Camera,
    settings: &RenderSettings,
    records: &[SplatRecord],
    grads: &SplatGradients,
) -> Result<ActivatedGradients> {
    if grads.len() != records.len() {
        return Err(Error::TraceMismatch(format!(
            "{} record gradients for {} records",
            grads.len(),
            records.len()
        )));
    }
    if let Some(r) = records.iter().find(|r| r.source >= set.len()) {
        return Err(Error::TraceMismatch(format!(
            "record source {} out of range for {} gaussians",
            r.source,
            set.len()
        )));
    }
    let cam_pos = camera.position();
    let w = camera.world_to_camera.rotation;
    let (fx, fy) = (camera.fx, camera.fy);
    let degree = set.sh_degree;
    let ncoef = sh::coeff_count(degree);

    let per_record: Vec<(usize, Vector3<f64>, Vector3<f64>, [f64; 4], f64, Vec<f64>)> = records
        .par_iter()
        .enumerate()
        .map(|(r, rec)| {
            let i = rec.source;
            let p = project_one(set, i, camera, settings).ok_or_else(|| {
                Error::TraceMismatch(format!("gaussian {i} no longer projects with this camera"))
            })?;
            let mut d_center = Vector3::zeros();
            let mut d_sh = vec![0.0; set.sh_stride()];

            // Color: clamp to [0, 1] passes gradient only strictly inside.
            let (color, dir, dist) = raw_color(set, i, &cam_pos);
            let mut gc = grads.color[r];
            for ch in 0..3 {
                if color[ch] < 0.0 || color[ch] > 1.0 {
                    gc[ch] = 0.0;
                }
            }
            let basis = sh::basis(degree, &dir);
            for k in 0..ncoef {
                for ch in 0..3 {
                    d_sh[k * 3 + ch] = basis[k] * gc[ch];
                }
            }
            if degree > 0 && dist > 0.0 {
                let bgrad = sh::basis_gradient(degree, &dir);
                let coeffs = set.sh_of(i);
                let mut d_dir = Vector3::zeros();
                for k in 1..ncoef {
                    let s: f64 = (0..3).map(|ch| gc[ch] * coeffs[k * 3 + ch]).sum();
                    d_dir += bgrad[k] * s;
                }
                d_center += (d_dir - dir * dir.dot(&d_dir)) / dist;
            }

            // Conic -> screen covariance: dS = -K dK K, off-diagonals shared.
            let [ga, gb, gcc] = grads.conic[r];
            let k = Matrix2::new(rec.conic[0], rec.conic[1], rec.conic[1], rec.conic[2]);
            let gk = Matrix2::new(ga, 0.5 * gb, 0.5 * gb, gcc);
            let g2 = -(k * gk * k);
            let g2 = (g2 + g2.transpose()) * 0.5;

            // Screen covariance -> camera covariance and Jacobian.
            let j = p.jacobian;
            let d_cov_cam = j.transpose() * g2 * j;
            let d_j = g2 * j * p.cov_cam * 2.0;

            // Camera point from mean and Jacobian.
            let t = p.cam_point;
            let z = t.z;
            let (iz, iz2, iz3) = (1.0 / z, 1.0 / (z * z), 1.0 / (z * z * z));
            let [du, dv] = grads.mean[r];
            let mut dt = Vector3::new(
                du * fx * iz,
                dv * fy * iz,
                -du * fx * t.x * iz2 - dv * fy * t.y * iz2,
            );
            dt.x += d_j[(0, 2)] * (-fx * iz2);
            dt.y += d_j[(1, 2)] * (-fy * iz2);
            dt.z += d_j[(0, 0)] * (-fx * iz2)
                + d_j[(0, 2)] * (2.0 * fx * t.x * iz3)
                + d_j[(1, 1)] * (-fy * iz2)
                + d_j[(1, 2)] * (2.0 * fy * t.y * iz3);
            d_center += w.transpose() * dt;

            // World covariance -> scale and rotation through M = R S.
            let d_sigma = w.transpose() * d_cov_cam * w;
            let q = set.rotations[i];
            let rot = math::quat_to_matrix(&q);
            let s = set.scales[i];
            let m = rot * Matrix3::from_diagonal(&s);
            let d_m = d_sigma * m * 2.0;
            let d_scale =
                Vector3::from_fn(|c, _| (0..3).map(|row| d_m[(row, c)] * rot[(row, c)]).sum());
            let d_rot = Matrix3::from_fn(|row, c| d_m[(row, c)] * s[c]);
            let partials = math::quat_to_matrix_partials(&q);
            let d_q = [0, 1, 2, 3].map(|c| d_rot.component_mul(&partials[c]).sum());

            Ok((i, d_center, d_scale, d_q, grads.opacity[r], d_sh))
        })
        .collect::<Result<_>>()?;

    // Deterministic scatter in record order.
    let mut out = ActivatedGradients::zeros(set.len(), set.sh_degree);
    let stride = set.sh_stride();
    for (i, dc, ds, dq, dop, dsh) in per_record {
        out.centers[i] += dc;
        out.scales[i] += ds;
        for k in 0..4 {
            out.rotations[i][k] += dq[k];
        }
        out.opacities[i] += dop;
        for (dst, src) in out.sh[i * stride..(i + 1) * stride].iter_mut().zip(&dsh) {
            *dst += src;
        }
    }
    Ok(out)
}
