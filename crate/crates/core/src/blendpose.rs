//! Expression blending and linear-blend skinning.
//!
//! Blending happens in raw parameter space, `B(psi) = B0 + sum_k psi_k dB_k`.
//! Skinning then activates the blended set and moves it with the per-Gaussian
//! blend of joint transforms. Orientations follow the nearest rotation to the
//! blended linear part; scales are left alone.

use nalgebra::{Matrix3, Vector3, Vector4};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::math::{self, Quat};
use crate::model::{
    activate, ActivatedGaussianSet, ActivatedGradients, BlendshapeModel, ExpressionCoeffs,
    GaussianSet, PoseParams, PosedGaussianSet, RigidTransform, Scalar, SkinWeights,
};

/// Rows whose weights stray further than this from summing to one are rejected.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-4;

/// `B0 + sum_k psi_k dB_k`, computed in `f64`.
pub fn blend_expression(
    model: &BlendshapeModel,
    psi: &ExpressionCoeffs,
) -> Result<GaussianSet<f64>> {
    if psi.len() != model.expression_count() {
        return Err(Error::dims(
            "expression coefficients",
            model.expression_count(),
            psi.len(),
        ));
    }
    let mut out = model.neutral.to_f64();
    for (coeff, delta) in psi.0.iter().zip(&model.deltas) {
        if *coeff != 0.0 {
            out.add_scaled(*coeff, delta)?;
        }
    }
    Ok(out)
}

/// Blended transform applied to one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkinFrame {
    pub linear: Matrix3<f64>,
    pub translation: Vector3<f64>,
    /// Nearest rotation to `linear`, as a unit quaternion.
    pub rotation: Quat,
}

impl SkinFrame {
    pub fn from_transform(t: &RigidTransform) -> Self {
        Self::from_parts(t.rotation, t.translation)
    }

    fn from_parts(linear: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rotation = math::quat_from_matrix(&math::nearest_rotation(&linear));
        Self {
            linear,
            translation,
            rotation,
        }
    }
}

/// Per-Gaussian blended transforms `sum_j w_ij T_j`.
///
/// The sum is evaluated as `T_0 + sum_j w_ij (T_j - T_0)`, which equals the
/// plain weighted sum for rows summing to one and reproduces a shared joint
/// transform exactly.
pub fn skinning_frames(
    weights: &SkinWeights,
    pose: &PoseParams,
    rows: usize,
) -> Result<Vec<SkinFrame>> {
    if weights.joints != pose.len() {
        return Err(Error::dims("joint count", weights.joints, pose.len()));
    }
    if weights.values.len() != rows * weights.joints {
        return Err(Error::dims(
            "skinning weight entries",
            rows * weights.joints,
            weights.values.len(),
        ));
    }
    let base = match pose.joints.first() {
        Some(t) => *t,
        None if rows == 0 => return Ok(Vec::new()),
        None => return Err(Error::Empty("pose joints")),
    };
    (0..rows)
        .into_par_iter()
        .map(|r| {
            let row = weights.row(r);
            let sum: f64 = row.iter().map(|w| *w as f64).sum();
            if !((sum - 1.0).abs() <= WEIGHT_SUM_TOLERANCE) {
                return Err(Error::InvalidSkinWeights { row: r, sum });
            }
            let mut linear = base.rotation;
            let mut translation = base.translation;
            for (w, t) in row.iter().zip(&pose.joints).skip(1) {
                let w = *w as f64;
                if w != 0.0 {
                    linear += (t.rotation - base.rotation) * w;
                    translation += (t.translation - base.translation) * w;
                }
            }
            Ok(SkinFrame::from_parts(linear, translation))
        })
        .collect()
}

/// Applies per-Gaussian frames to an activated set.
pub fn skin(set: &ActivatedGaussianSet, frames: &[SkinFrame]) -> Result<PosedGaussianSet> {
    if frames.len() != set.len() {
        return Err(Error::dims("skinning frames", set.len(), frames.len()));
    }
    let mut out = set.clone();
    out.centers
        .par_iter_mut()
        .zip(out.rotations.par_iter_mut())
        .zip(frames.par_iter())
        .for_each(|((c, q), f)| {
            *c = f.linear * *c + f.translation;
            *q = math::quat_mul(&f.rotation, q);
        });
    Ok(out)
}

/// Adjoint of [`skin`] for fixed frames: maps gradients with respect to posed
/// quantities onto the rest-pose activated quantities.
pub fn skin_backward(
    frames: &[SkinFrame],
    grad: &ActivatedGradients,
) -> Result<ActivatedGradients> {
    if frames.len() != grad.len() {
        return Err(Error::dims("skinning frames", grad.len(), frames.len()));
    }
    let mut out = grad.clone();
    out.centers
        .par_iter_mut()
        .zip(out.rotations.par_iter_mut())
        .zip(frames.par_iter())
        .for_each(|((c, q), f)| {
            *c = f.linear.transpose() * *c;
            let g = math::quat_left_matrix(&f.rotation).transpose() * Vector4::from(*q);
            *q = [g[0], g[1], g[2], g[3]];
        });
    Ok(out)
}

/// Linear blend skinning of a raw set: activate, then transform.
pub fn lbs<T: Scalar>(
    set: &GaussianSet<T>,
    weights: &SkinWeights,
    pose: &PoseParams,
) -> Result<PosedGaussianSet> {
    let frames = skinning_frames(weights, pose, set.len())?;
    skin(&activate(set)?, &frames)
}

/// Frames that bind every mouth Gaussian rigidly to the mouth joint.
pub fn mouth_frames(model: &BlendshapeModel, pose: &PoseParams) -> Result<Vec<SkinFrame>> {
    let jaw = pose
        .joints
        .get(model.mouth_joint)
        .ok_or(Error::InvalidJoint {
            index: model.mouth_joint,
            joints: pose.len(),
        })?;
    Ok(vec![SkinFrame::from_transform(jaw); model.mouth.len()])
}

/// Poses the mouth set with the jaw joint alone. Independent of expression.
pub fn pose_mouth(model: &BlendshapeModel, pose: &PoseParams) -> Result<PosedGaussianSet> {
    let frames = mouth_frames(model, pose)?;
    skin(&activate(&model.mouth)?, &frames)
}

/// Blends, skins and appends the mouth: the renderable set for one frame.
/// Head Gaussians come first, mouth Gaussians after them.
pub fn pose_model(
    model: &BlendshapeModel,
    psi: &ExpressionCoeffs,
    pose: &PoseParams,
) -> Result<PosedGaussianSet> {
    pose.validate()?;
    let mut posed = lbs(&blend_expression(model, psi)?, &model.skin_weights, pose)?;
    posed.extend(&pose_mouth(model, pose)?)?;
    Ok(posed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Gaussian, ParamGroup};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(rng: &mut ChaCha8Rng, n: usize, amplitude: f32) -> GaussianSet {
        let mut s = GaussianSet::new(1);
        for _ in 0..n {
            let mut v = || rng.random_range(-amplitude..amplitude);
            s.push(&Gaussian {
                center: [v(), v(), v()],
                log_scale: [v(), v(), v()],
                rotation: [1.0 + v().abs(), v(), v(), v()],
                opacity_logit: v(),
                sh: (0..12).map(|_| v()).collect(),
            })
            .unwrap();
        }
        s
    }

    fn random_model(seed: u64, n: usize, k: usize, joints: usize) -> BlendshapeModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let neutral = random_set(&mut rng, n, 1.0);
        let deltas = (0..k).map(|_| random_set(&mut rng, n, 0.2)).collect();
        let mut values = Vec::new();
        for _ in 0..n {
            let raw: Vec<f32> = (0..joints).map(|_| rng.random_range(0.0..1.0f32)).collect();
            let s: f32 = raw.iter().sum();
            values.extend(raw.iter().map(|v| v / s));
        }
        BlendshapeModel {
            neutral,
            deltas,
            skin_weights: SkinWeights { joints, values },
            mouth: random_set(&mut rng, 5, 1.0),
            mouth_joint: joints - 1,
        }
    }

    #[test]
    fn zero_coefficients_give_neutral() {
        let m = random_model(1, 20, 3, 2);
        let b = blend_expression(&m, &ExpressionCoeffs::zeros(3)).unwrap();
        assert_eq!(b, m.neutral.to_f64());
    }

    #[test]
    fn single_term_sum() {
        let m = random_model(2, 10, 1, 1);
        let b = blend_expression(&m, &ExpressionCoeffs(vec![1.0])).unwrap();
        for g in ParamGroup::ALL {
            for ((out, base), d) in b
                .group(g)
                .iter()
                .zip(m.neutral.group(g))
                .zip(m.deltas[0].group(g))
            {
                assert_eq!(*out, *base as f64 + *d as f64);
            }
        }
    }

    #[test]
    fn half_coefficient_is_midpoint() {
        let m = random_model(3, 15, 4, 2);
        for k in 0..4 {
            let mut psi = ExpressionCoeffs::zeros(4);
            psi.0[k] = 0.5;
            let b = blend_expression(&m, &psi).unwrap();
            for g in ParamGroup::ALL {
                for ((out, base), d) in b
                    .group(g)
                    .iter()
                    .zip(m.neutral.group(g))
                    .zip(m.deltas[k].group(g))
                {
                    let lo = *base as f64;
                    let hi = *base as f64 + *d as f64;
                    assert_relative_eq!(*out, 0.5 * (lo + hi), epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn wrong_coefficient_count() {
        let m = random_model(4, 3, 2, 1);
        assert!(matches!(
            blend_expression(&m, &ExpressionCoeffs::zeros(3)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn identity_pose_is_activation() {
        let m = random_model(5, 25, 0, 3);
        let posed = lbs(&m.neutral, &m.skin_weights, &PoseParams::identity(3)).unwrap();
        assert_eq!(posed, activate(&m.neutral).unwrap());
    }

    #[test]
    fn pure_translation() {
        let m = random_model(6, 12, 0, 1);
        let t = Vector3::new(0.3, -1.0, 2.5);
        let pose = PoseParams {
            joints: vec![RigidTransform::from_translation(t)],
        };
        let posed = lbs(&m.neutral, &m.skin_weights, &pose).unwrap();
        let rest = activate(&m.neutral).unwrap();
        for i in 0..rest.len() {
            assert_relative_eq!(posed.centers[i], rest.centers[i] + t, epsilon = 1e-12);
            assert_eq!(posed.rotations[i], rest.rotations[i]);
        }
    }

    #[test]
    fn opposite_translations_cancel() {
        let mut m = random_model(7, 8, 0, 2);
        m.skin_weights.values = vec![0.5; 16];
        let pose = PoseParams {
            joints: vec![
                RigidTransform::from_translation(Vector3::new(1.0, 0.0, 0.0)),
                RigidTransform::from_translation(Vector3::new(-1.0, 0.0, 0.0)),
            ],
        };
        let posed = lbs(&m.neutral, &m.skin_weights, &pose).unwrap();
        let rest = activate(&m.neutral).unwrap();
        for i in 0..rest.len() {
            assert_relative_eq!(posed.centers[i], rest.centers[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn quarter_turn_about_z() {
        let mut s = GaussianSet::new(0);
        let q0 = math::quat_from_axis_angle(&Vector3::new(1.0, 1.0, 0.0), 0.3);
        s.push(&Gaussian {
            center: [1.0, 0.0, 0.0],
            log_scale: [0.0; 3],
            rotation: q0.map(|v| v as f32),
            opacity_logit: 0.0,
            sh: vec![0.0; 3],
        })
        .unwrap();
        let pose = PoseParams {
            joints: vec![RigidTransform::rotation_about(
                &Vector3::z(),
                std::f64::consts::FRAC_PI_2,
                &Vector3::zeros(),
            )],
        };
        let posed = lbs(&s, &SkinWeights::single_joint(1, 1, 0), &pose).unwrap();
        assert_relative_eq!(
            posed.centers[0],
            Vector3::new(0.0, 1.0, 0.0),
            epsilon = 1e-12
        );
        // Oracle: premultiply by the z quarter-turn quaternion (cos 45, 0, 0, sin 45).
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let rest = activate(&s).unwrap().rotations[0];
        let expected = math::quat_mul(&[h, 0.0, 0.0, h], &rest);
        let dot: f64 = (0..4).map(|k| expected[k] * posed.rotations[0][k]).sum();
        assert_relative_eq!(dot.abs(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_weight_rows() {
        let m = random_model(8, 4, 0, 2);
        let mut w = m.skin_weights.clone();
        w.values[2] += 0.01;
        let err = lbs(&m.neutral, &w, &PoseParams::identity(2)).unwrap_err();
        assert!(matches!(err, Error::InvalidSkinWeights { row: 1, .. }));
    }

    #[test]
    fn mouth_follows_jaw_only() {
        let m = random_model(9, 6, 2, 2);
        let rest = pose_mouth(&m, &PoseParams::identity(2)).unwrap();
        assert_eq!(rest, activate(&m.mouth).unwrap());

        let pose = PoseParams {
            joints: vec![
                RigidTransform::from_translation(Vector3::new(5.0, 5.0, 5.0)),
                RigidTransform::from_translation(Vector3::new(0.0, -0.1, 0.0)),
            ],
        };
        let posed = pose_mouth(&m, &pose).unwrap();
        for i in 0..rest.len() {
            assert_relative_eq!(
                posed.centers[i],
                rest.centers[i] + Vector3::new(0.0, -0.1, 0.0),
                epsilon = 1e-12
            );
        }

        let bad = PoseParams::identity(1);
        assert!(matches!(
            pose_mouth(&m, &bad),
            Err(Error::InvalidJoint {
                index: 1,
                joints: 1
            })
        ));
    }

    #[test]
    fn skin_backward_matches_finite_differences() {
        let m = random_model(10, 3, 0, 2);
        let pose = PoseParams {
            joints: vec![
                RigidTransform::rotation_about(
                    &Vector3::new(0.1, 1.0, 0.2),
                    0.5,
                    &Vector3::new(0.1, 0.0, 0.0),
                ),
                RigidTransform::rotation_about(
                    &Vector3::new(1.0, 0.0, 0.3),
                    -0.4,
                    &Vector3::new(0.0, 0.2, 0.0),
                ),
            ],
        };
        let frames = skinning_frames(&m.skin_weights, &pose, 3).unwrap();
        let rest = activate(&m.neutral).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = ActivatedGradients::zeros(3, rest.sh_degree);
        for i in 0..3 {
            g.centers[i] = Vector3::new(rng.random(), rng.random(), rng.random());
            g.rotations[i] = [rng.random(), rng.random(), rng.random(), rng.random()];
        }
        let loss = |set: &ActivatedGaussianSet| {
            let p = skin(set, &frames).unwrap();
            (0..3)
                .map(|i| {
                    p.centers[i].dot(&g.centers[i])
                        + (0..4)
                            .map(|k| p.rotations[i][k] * g.rotations[i][k])
                            .sum::<f64>()
                })
                .sum::<f64>()
        };
        let back = skin_backward(&frames, &g).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            for a in 0..3 {
                let mut p = rest.clone();
                let mut q = rest.clone();
                p.centers[i][a] += h;
                q.centers[i][a] -= h;
                assert_relative_eq!(
                    (loss(&p) - loss(&q)) / (2.0 * h),
                    back.centers[i][a],
                    epsilon = 1e-8
                );
            }
            for a in 0..4 {
                let mut p = rest.clone();
                let mut q = rest.clone();
                p.rotations[i][a] += h;
                q.rotations[i][a] -= h;
                assert_relative_eq!(
                    (loss(&p) - loss(&q)) / (2.0 * h),
                    back.rotations[i][a],
                    epsilon = 1e-8
                );
            }
        }
    }
}
