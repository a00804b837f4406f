//! Synthetic datasets rendered from a random ground-truth model.
//!
//! The scene is a textured ellipsoidal head of Gaussians with a hinged jaw,
//! localized expression blendshapes and a mouth cavity, seen by a fixed
//! camera while it nods, turns and talks along periodic trajectories.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::binary::save_model;
use super::frames::{CameraRecord, FrameParamsFile, FrameRecord};
use super::sequence::{binarize, write_json, write_sequence};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::CylinderVolume;
use crate::math;
use crate::model::{BlendshapeModel, Camera, Gaussian, GaussianSet, RigidTransform, SkinWeights};
use crate::sh;
use crate::trainer::{render_frame, InitPoint, InitSpec};

pub const GT_MODEL_FILE: &str = "gt_model.gbav";
pub const INIT_MODEL_FILE: &str = "init.gbav";
pub const INIT_SPEC_FILE: &str = "init.json";

const HEAD_RADII: [f64; 3] = [0.09, 0.11, 0.095];
const NECK_PIVOT: [f64; 3] = [0.0, -0.1, 0.0];
const JAW_PIVOT: [f64; 3] = [0.0, -0.03, 0.0];
const CAMERA_DISTANCE: f64 = 0.33;
/// Focal length in pixels at a 128-pixel image width.
const FOCAL_AT_128: f64 = 250.0;
const COLOR_WAVELENGTH: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Neutral (head) Gaussians.
    pub gaussians: usize,
    pub mouth_gaussians: usize,
    pub blendshapes: usize,
    pub frames: usize,
    pub width: u32,
    pub height: u32,
    pub sh_degree: usize,
    pub seed: u64,
    /// Half-width of the uniform noise added to DC color coefficients of the
    /// starting model (deltas get half of it).
    pub color_noise: f64,
    /// Half-width of the uniform noise added to log-scales.
    pub scale_noise: f64,
    /// Half-width of the uniform noise added to opacity logits.
    pub opacity_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            gaussians: 500,
            mouth_gaussians: 50,
            blendshapes: 4,
            frames: 20,
            width: 128,
            height: 128,
            sh_degree: 1,
            seed: 0,
            color_noise: 0.4,
            scale_noise: 0.25,
            opacity_noise: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gaussians == 0 {
            return Err(Error::InvalidConfig(
                "synthetic model needs at least one gaussian".into(),
            ));
        }
        if self.frames == 0 {
            return Err(Error::InvalidConfig(
                "synthetic sequence needs at least one frame".into(),
            ));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidConfig("image size must be nonzero".into()));
        }
        if self.sh_degree > sh::MAX_DEGREE {
            return Err(Error::InvalidConfig(format!(
                "SH degree {} exceeds {}",
                self.sh_degree,
                sh::MAX_DEGREE
            )));
        }
        for (name, v) in [
            ("color_noise", self.color_noise),
            ("scale_noise", self.scale_noise),
            ("opacity_noise", self.opacity_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Everything written by [`synth_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub ground_truth: BlendshapeModel,
    /// Ground truth with noise added; a starting point for recovery.
    pub initial: BlendshapeModel,
    pub init_spec: InitSpec,
    pub params: FrameParamsFile,
    /// Unquantized renders of the ground truth.
    pub images: Vec<Image>,
    pub masks: Vec<Image>,
}

/// Default mouth volume of the synthetic head, in rest space.
pub fn mouth_volume() -> CylinderVolume {
    CylinderVolume {
        center: [0.0, -0.045, 0.05],
        axis: [1.0, 0.0, 0.0],
        radius: 0.015,
        half_height: 0.03,
    }
}

pub fn synth_camera(width: u32, height: u32) -> Camera {
    let f = FOCAL_AT_128 * width as f64 / 128.0;
    Camera {
        fx: f,
        fy: f,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
        width,
        height,
        near: 0.05,
        far: 10.0,
        // Looks down -z from +z with image y pointing down.
        world_to_camera: RigidTransform {
            rotation: Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0)),
            translation: Vector3::new(0.0, 0.0, CAMERA_DISTANCE),
        },
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n: f64 = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// Rotation whose local z axis is the head surface normal at `p`, with a
/// random spin about it.
fn tangent_frame(p: &Vector3<f64>, rng: &mut ChaCha8Rng) -> [f32; 4] {
    let radii = Vector3::from(HEAD_RADII);
    let normal = p.component_div(&radii.component_mul(&radii)).normalize();
    let helper = if normal.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let u = normal.cross(&helper).normalize();
    let v = normal.cross(&u);
    let spin = rng.random_range(0.0..std::f64::consts::TAU);
    let (s, c) = spin.sin_cos();
    let (a, b) = (u * c + v * s, v * c - u * s);
    let m = Matrix3::from_columns(&[a, b, normal]);
    math::quat_from_matrix(&m).map(|x| x as f32)
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

fn gaussian_with(
    center: Vector3<f64>,
    log_scale: [f64; 3],
    rotation: [f32; 4],
    opacity: f64,
    rgb: [f64; 3],
    rest: impl FnMut() -> f64,
    sh_degree: usize,
) -> Gaussian {
    let mut rest = rest;
    let mut coeffs = vec![0.0f32; 3 * sh::coeff_count(sh_degree)];
    for (i, c) in coeffs.iter_mut().enumerate() {
        *c = if i < 3 {
            sh::rgb_to_dc(rgb[i]) as f32
        } else {
            rest() as f32
        };
    }
    Gaussian {
        center: [center.x as f32, center.y as f32, center.z as f32],
        log_scale: log_scale.map(|v| v as f32),
        rotation,
        opacity_logit: math::logit(opacity) as f32,
        sh: coeffs,
    }
}

fn skin_color(p: &Vector3<f64>, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let base = [0.78, 0.58, 0.48];
    let band = 0.12 * (18.0 * p.y).sin() * (14.0 * p.x).cos();
    std::array::from_fn(|c| clamp01(base[c] + band + rng.random_range(-0.15..0.15)))
}

fn jaw_weight(p: &Vector3<f64>) -> f64 {
    let below = clamp01((JAW_PIVOT[1] - p.y) / 0.03);
    let front = clamp01(p.z / 0.03);
    below * front
}

fn ground_truth(
    config: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(BlendshapeModel, CylinderVolume)> {
    let d = config.sh_degree;
    let n = config.gaussians;
    let radii = Vector3::from(HEAD_RADII);
    let centers: Vec<Vector3<f64>> = (0..n)
        .map(|_| unit_vector(rng).component_mul(&radii))
        .collect();
    let area = 4.0
        * std::f64::consts::PI
        * (HEAD_RADII[0] * HEAD_RADII[1] * HEAD_RADII[2]).powf(2.0 / 3.0);
    let spacing = (area / n as f64).sqrt();

    let mut neutral = GaussianSet::new(d);
    let mut weights = Vec::with_capacity(2 * n);
    for c in &centers {
        // Flat discs tangent to the surface keep the silhouette sharp.
        let tangent = (0.6 * spacing).ln();
        let log_scale = [
            tangent + rng.random_range(-0.3..0.3),
            tangent + rng.random_range(-0.3..0.3),
            (0.1 * spacing).ln(),
        ];
        let rotation = tangent_frame(c, rng);
        let opacity = rng.random_range(0.95..0.99);
        let rgb = skin_color(c, rng);
        neutral.push(&gaussian_with(
            *c,
            log_scale,
            rotation,
            opacity,
            rgb,
            || rng.random_range(-0.05..0.05),
            d,
        ))?;
        let w = jaw_weight(c) as f32;
        weights.extend([1.0 - w, w]);
    }

    let mut deltas = Vec::with_capacity(config.blendshapes);
    for _ in 0..config.blendshapes {
        let mut focus = unit_vector(rng);
        focus.z = focus.z.abs();
        let focus = focus.component_mul(&radii);
        let shift = unit_vector(rng) * 0.008;
        let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.3..0.3));
        let grow = rng.random_range(-0.1..0.1);
        let mut delta = GaussianSet::zeros(n, d);
        for (i, c) in centers.iter().enumerate() {
            let w = (-(c - focus).norm_squared() / (2.0 * 0.03f64.powi(2))).exp();
            delta.centers[i] = [shift.x, shift.y, shift.z].map(|v| (w * v) as f32);
            delta.log_scales[i] = [(w * grow) as f32; 3];
            let stride = delta.sh_stride();
            for ch in 0..3 {
                delta.sh[i * stride + ch] = (w * tint[ch] / sh::C0) as f32;
            }
        }
        deltas.push(delta);
    }

    let volume = mouth_volume();
    let axis = Vector3::from(volume.axis);
    let (u, v) = (Vector3::y(), Vector3::z());
    let mut mouth = GaussianSet::new(d);
    for _ in 0..config.mouth_gaussians {
        let (a, b) = loop {
            let (a, b): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            if a * a + b * b < 0.9 {
                break (a, b);
            }
        };
        let t = rng.random_range(-0.95..0.95);
        let c = Vector3::from(volume.center)
            + (u * a + v * b) * volume.radius
            + axis * (t * volume.half_height);
        let rgb = [
            rng.random_range(0.35..0.55),
            rng.random_range(0.05..0.15),
            rng.random_range(0.08..0.18),
        ];
        let log_scale = [0.006f64.ln(); 3];
        mouth.push(&gaussian_with(
            c,
            log_scale,
            [1.0, 0.0, 0.0, 0.0],
            0.9,
            rgb,
            || 0.0,
            d,
        ))?;
    }

    let model = BlendshapeModel {
        neutral,
        deltas,
        skin_weights: SkinWeights {
            joints: 2,
            values: weights,
        },
        mouth,
        mouth_joint: 1,
    };
    model.validate()?;
    Ok((model, volume))
}

fn perturbed(gt: &BlendshapeModel, config: &SynthConfig, rng: &mut ChaCha8Rng) -> BlendshapeModel {
    let mut model = gt.clone();
    let dc_noise = config.color_noise / sh::C0;
    // Color error is a smooth field over space plus per-gaussian noise, so
    // it survives the averaging of overlapping splats.
    let waves: [(Vector3<f64>, f64); 3] = std::array::from_fn(|_| {
        let dir = unit_vector(rng) * (2.0 * std::f64::consts::PI / COLOR_WAVELENGTH);
        (dir, rng.random_range(0.0..2.0 * std::f64::consts::PI))
    });
    let mut jitter = |set: &mut GaussianSet, color: f64, scale: f64, opacity: f64| {
        let stride = set.sh_stride();
        for i in 0..set.len() {
            let c = Vector3::from(set.centers[i].map(f64::from));
            for (ch, (dir, phase)) in waves.iter().enumerate() {
                if color > 0.0 {
                    let field = (dir.dot(&c) + phase).sin();
                    let e = 0.5 * field + 0.5 * rng.random_range(-1.0..1.0);
                    set.sh[i * stride + ch] += (color * e) as f32;
                }
            }
            for s in &mut set.log_scales[i] {
                if scale > 0.0 {
                    *s += rng.random_range(-scale..scale) as f32;
                }
            }
            if opacity > 0.0 {
                set.opacity_logits[i] += rng.random_range(-opacity..opacity) as f32;
            }
        }
    };
    jitter(
        &mut model.neutral,
        dc_noise,
        config.scale_noise,
        config.opacity_noise,
    );
    for delta in &mut model.deltas {
        jitter(delta, dc_noise / 2.0, 0.0, 0.0);
    }
    jitter(
        &mut model.mouth,
        dc_noise,
        config.scale_noise,
        config.opacity_noise,
    );
    model
}

fn frame_pose(t: f64, phases: &[f64; 3]) -> Vec<RigidTransform> {
    let tau = 2.0 * std::f64::consts::PI * t;
    let neck = Vector3::from(NECK_PIVOT);
    let yaw = RigidTransform::rotation_about(&Vector3::y(), 0.25 * (tau + phases[0]).sin(), &neck);
    let pitch =
        RigidTransform::rotation_about(&Vector3::x(), 0.1 * (2.0 * tau + phases[1]).sin(), &neck);
    let head = yaw.compose(&pitch);
    let open = 0.15 * 0.5 * (1.0 + (2.0 * tau + phases[2]).sin());
    let jaw = head.compose(&RigidTransform::rotation_about(
        &Vector3::x(),
        open,
        &Vector3::from(JAW_PIVOT),
    ));
    vec![head, jaw]
}

/// Builds a random ground-truth model and periodic trajectories, renders
/// every frame, and returns the result without touching the disk.
pub fn synth_sequence(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (gt, volume) = ground_truth(config, &mut rng)?;
    let initial = perturbed(&gt, config, &mut rng);

    let pose_phases: [f64; 3] =
        std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
    let expr: Vec<(f64, f64)> = (0..config.blendshapes)
        .map(|_| {
            (
                rng.random_range(1..=2) as f64,
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let camera = synth_camera(config.width, config.height);
    let frames: Vec<FrameRecord> = (0..config.frames)
        .map(|i| {
            let t = i as f64 / config.frames as f64;
            FrameRecord {
                index: i as u32,
                expression: expr
                    .iter()
                    .map(|(m, phi)| 0.5 + 0.5 * (std::f64::consts::TAU * m * t + phi).sin())
                    .collect(),
                joints: frame_pose(t, &pose_phases)
                    .iter()
                    .map(RigidTransform::to_rows)
                    .collect(),
                camera: CameraRecord::from(&camera),
            }
        })
        .collect();
    let params = FrameParamsFile::new(config.blendshapes, 2, frames);

    let renders = params
        .frames
        .par_iter()
        .map(|r| render_frame(&gt, &r.psi(), &r.pose(), &r.camera(), [0.0; 3]))
        .collect::<Result<Vec<_>>>()?;
    let mut images = Vec::with_capacity(renders.len());
    let mut masks = Vec::with_capacity(renders.len());
    for out in renders {
        let mut mask = out.alpha;
        // Coverage exactly 0.5 counts as head, matching mask loading.
        binarize(&mut mask);
        images.push(out.rgb);
        masks.push(mask);
    }

    let stride = initial.neutral.sh_stride();
    let point = |set: &GaussianSet, i: usize, weights: Option<Vec<f64>>| InitPoint {
        position: set.centers[i].map(|v| v as f64),
        color: Some(std::array::from_fn(|ch| {
            clamp01(set.sh[i * stride + ch] as f64 * sh::C0 + 0.5)
        })),
        weights,
    };
    let init_spec = InitSpec {
        expressions: config.blendshapes,
        joints: 2,
        mouth_joint: 1,
        joint_positions: vec![NECK_PIVOT, JAW_PIVOT],
        bounds: None,
        points: (0..initial.neutral.len())
            .map(|i| {
                point(
                    &initial.neutral,
                    i,
                    Some(
                        initial
                            .skin_weights
                            .row(i)
                            .iter()
                            .map(|w| *w as f64)
                            .collect(),
                    ),
                )
            })
            .collect(),
        mouth_points: (0..initial.mouth.len())
            .map(|i| point(&initial.mouth, i, None))
            .collect(),
        cylinder: Some(volume),
    };

    Ok(SynthDataset {
        ground_truth: gt,
        initial,
        init_spec,
        params,
        images,
        masks,
    })
}

/// Writes a complete sequence directory plus `gt_model.gbav`, `init.gbav`
/// (ground truth with noise) and `init.json`.
pub fn synth_dataset(config: &SynthConfig, dir: impl AsRef<Path>) -> Result<SynthDataset> {
    let dir = dir.as_ref();
    let data = synth_sequence(config)?;
    write_sequence(dir, &data.params, &data.images, &data.masks)?;
    save_model(dir.join(GT_MODEL_FILE), &data.ground_truth)?;
    save_model(dir.join(INIT_MODEL_FILE), &data.initial)?;
    write_json(dir.join(INIT_SPEC_FILE), &data.init_spec)?;
    Ok(data)
}
