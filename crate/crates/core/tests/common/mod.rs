#![allow(dead_code)]

use gblend::math;
use gblend::model::{
    BlendshapeModel, Camera, Gaussian, GaussianSet, ParamGroup, RigidTransform, SkinWeights,
};
use gblend::rasterizer::{RenderOutput, RenderSettings};
use gblend::sh;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Camera at the origin looking down +z.
pub fn camera(size: u32, focal: f64) -> Camera {
    Camera {
        fx: focal,
        fy: focal,
        cx: size as f64 / 2.0,
        cy: size as f64 / 2.0,
        width: size,
        height: size,
        near: 0.1,
        far: 100.0,
        world_to_camera: RigidTransform::identity(),
    }
}

/// Random Gaussians in front of [`camera`], inside roughly the central 80%
/// of a view with the given focal-to-size ratio.
pub fn random_set(
    rng: &mut ChaCha8Rng,
    n: usize,
    sh_degree: usize,
    half_fov: f64,
) -> GaussianSet<f64> {
    let mut set = GaussianSet::new(sh_degree);
    for _ in 0..n {
        let z = rng.random_range(2.0..4.0);
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let q = math::quat_from_axis_angle(&axis, rng.random_range(0.0..3.0));
        let scale = rng.random_range(1.2..1.6);
        let mut coeffs = vec![0.0; 3 * sh::coeff_count(sh_degree)];
        for (k, c) in coeffs.iter_mut().enumerate() {
            *c = if k < 3 {
                sh::rgb_to_dc(rng.random_range(0.2..0.8))
            } else {
                rng.random_range(-0.1..0.1)
            };
        }
        set.push(&Gaussian {
            center: [
                rng.random_range(-0.8..0.8) * half_fov * z,
                rng.random_range(-0.8..0.8) * half_fov * z,
                z,
            ],
            log_scale: [
                -rng.random_range(2.0..3.2),
                -rng.random_range(2.0..3.2),
                -rng.random_range(2.0..3.2),
            ],
            rotation: q.map(|v| v * scale),
            opacity_logit: rng.random_range(-1.5..2.5),
            sh: coeffs,
        })
        .unwrap();
    }
    set
}

/// Which records contribute to each pixel, in order, plus the records whose
/// color sits on a clamp boundary. Finite differences are only meaningful
/// when this signature is unchanged across the stencil.
pub fn composite_signature(out: &RenderOutput) -> Vec<Vec<usize>> {
    let settings: RenderSettings = out.trace.settings;
    let mut sig = Vec::new();
    for y in 0..out.height() {
        for x in 0..out.width() {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            let mut list = Vec::new();
            for r in &out.trace.records {
                let dx = px - r.mean[0];
                let dy = py - r.mean[1];
                let power =
                    -0.5 * (r.conic[0] * dx * dx + r.conic[2] * dy * dy) - r.conic[1] * dx * dy;
                let a = r.opacity * power.min(0.0).exp();
                if a < settings.alpha_cutoff {
                    continue;
                }
                list.push(r.source);
                t *= 1.0 - a;
                if t < settings.min_transmittance {
                    break;
                }
            }
            sig.push(list);
        }
    }
    let clamped = out
        .trace
        .records
        .iter()
        .filter(|r| r.color.iter().any(|c| *c == 0.0 || *c == 1.0))
        .map(|r| r.source)
        .collect();
    sig.push(clamped);
    sig
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Random rigid transform: rotation up to `max_angle` about a random axis,
/// translation within `max_shift` per axis.
pub fn random_rigid(rng: &mut ChaCha8Rng, max_angle: f64, max_shift: f64) -> RigidTransform {
    let axis = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ) + Vector3::new(0.0, 0.0, 1e-3);
    let q = math::quat_from_axis_angle(&axis, rng.random_range(-max_angle..max_angle));
    let mut t = RigidTransform::from_rotation(math::quat_to_matrix(&q));
    t.translation = Vector3::new(
        rng.random_range(-max_shift..max_shift),
        rng.random_range(-max_shift..max_shift),
        rng.random_range(-max_shift..max_shift),
    );
    t
}

/// Random blendshape model whose head sits around `z = depth` in front of
/// [`camera`]. Delta magnitudes scale with `delta_amplitude`.
pub fn random_model(
    rng: &mut ChaCha8Rng,
    n: usize,
    blendshapes: usize,
    joints: usize,
    mouth: usize,
    sh_degree: usize,
    delta_amplitude: f64,
) -> BlendshapeModel {
    let to_f32 = |s: &GaussianSet<f64>| {
        let mut out = GaussianSet::<f32>::new(sh_degree);
        for i in 0..s.len() {
            let g = s.get(i);
            out.push(&Gaussian {
                center: g.center.map(|v| v as f32),
                log_scale: g.log_scale.map(|v| v as f32),
                rotation: g.rotation.map(|v| v as f32),
                opacity_logit: g.opacity_logit as f32,
                sh: g.sh.iter().map(|v| *v as f32).collect(),
            })
            .unwrap();
        }
        out
    };
    let neutral = to_f32(&random_set(rng, n, sh_degree, 0.4));
    let deltas = (0..blendshapes)
        .map(|_| {
            let mut d = GaussianSet::<f32>::zeros(n, sh_degree);
            for g in ParamGroup::ALL {
                for v in d.group_mut(g) {
                    *v = (rng.random_range(-1.0..1.0) * delta_amplitude) as f32;
                }
            }
            d
        })
        .collect();
    let mut values = Vec::with_capacity(n * joints);
    for _ in 0..n {
        let raw: Vec<f64> = (0..joints).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        values.extend(raw.iter().map(|v| (v / s) as f32));
    }
    BlendshapeModel {
        neutral,
        deltas,
        skin_weights: SkinWeights { joints, values },
        mouth: to_f32(&random_set(rng, mouth, sh_degree, 0.4)),
        mouth_joint: joints - 1,
    }
}
