//! Core data types: Gaussian sets in raw parameter space, their activated
//! form, blendshape models, rigs and cameras.
//!
//! Raw space is where optimization and expression blending happen:
//! log-scales, logit-opacities and unnormalized quaternions. Activation maps
//! a raw set to renderable quantities once per frame.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::math::{self, Quat};
use crate::sh;

/// Storage scalar for raw parameters. Models persist as `f32`; blended
/// intermediates and gradients use `f64`.
pub trait Scalar: Copy + Default + PartialEq + std::fmt::Debug + Send + Sync + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Scalar for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(v: f64) -> Self {
        v
    }
}

/// The five per-Gaussian property groups. Each has its own learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Center,
    Scale,
    Rotation,
    Opacity,
    Sh,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Center,
        ParamGroup::Scale,
        ParamGroup::Rotation,
        ParamGroup::Opacity,
        ParamGroup::Sh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Center => "center",
            ParamGroup::Scale => "scale",
            ParamGroup::Rotation => "rotation",
            ParamGroup::Opacity => "opacity",
            ParamGroup::Sh => "sh",
        }
    }
}

/// One lane of a [`GaussianSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian<T = f32> {
    pub center: [T; 3],
    pub log_scale: [T; 3],
    /// `[w, x, y, z]`, not necessarily normalized.
    pub rotation: [T; 4],
    pub opacity_logit: T,
    /// `coeff_count(degree)` coefficients, each an RGB triple.
    pub sh: Vec<T>,
}

/// Structure-of-arrays container of Gaussians in raw parameter space.
///
/// SH coefficients are laid out `[gaussian][coefficient][channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSet<T = f32> {
    pub sh_degree: usize,
    pub centers: Vec<[T; 3]>,
    pub log_scales: Vec<[T; 3]>,
    pub rotations: Vec<[T; 4]>,
    pub opacity_logits: Vec<T>,
    pub sh: Vec<T>,
}

/// Per-parameter partial derivatives, shaped like the raw set they belong to.
pub type GradientSet = GaussianSet<f64>;

impl<T: Scalar> GaussianSet<T> {
    pub fn new(sh_degree: usize) -> Self {
        Self {
            sh_degree,
            centers: Vec::new(),
            log_scales: Vec::new(),
            rotations: Vec::new(),
            opacity_logits: Vec::new(),
            sh: Vec::new(),
        }
    }

    /// All parameters zero. Used for deltas and gradient accumulators.
    pub fn zeros(len: usize, sh_degree: usize) -> Self {
        let z = T::default();
        Self {
            sh_degree,
            centers: vec![[z; 3]; len],
            log_scales: vec![[z; 3]; len],
            rotations: vec![[z; 4]; len],
            opacity_logits: vec![z; len],
            sh: vec![z; len * 3 * sh::coeff_count(sh_degree)],
        }
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Scalars of SH data per Gaussian.
    pub fn sh_stride(&self) -> usize {
        3 * sh::coeff_count(self.sh_degree)
    }

    pub fn push(&mut self, g: &Gaussian<T>) -> Result<()> {
        if g.sh.len() != self.sh_stride() {
            return Err(Error::dims(
                "gaussian SH coefficients",
                self.sh_stride(),
                g.sh.len(),
            ));
        }
        self.centers.push(g.center);
        self.log_scales.push(g.log_scale);
        self.rotations.push(g.rotation);
        self.opacity_logits.push(g.opacity_logit);
        self.sh.extend_from_slice(&g.sh);
        Ok(())
    }

    pub fn get(&self, i: usize) -> Gaussian<T> {
        let k = self.sh_stride();
        Gaussian {
            center: self.centers[i],
            log_scale: self.log_scales[i],
            rotation: self.rotations[i],
            opacity_logit: self.opacity_logits[i],
            sh: self.sh[i * k..(i + 1) * k].to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sh_degree > sh::MAX_DEGREE {
            return Err(Error::InvalidConfig(format!(
                "SH degree {} exceeds the supported maximum {}",
                self.sh_degree,
                sh::MAX_DEGREE
            )));
        }
        let n = self.len();
        let check = |what: &str, found: usize, expected: usize| {
            if found == expected {
                Ok(())
            } else {
                Err(Error::dims(what, expected, found))
            }
        };
        check("log_scales", self.log_scales.len(), n)?;
        check("rotations", self.rotations.len(), n)?;
        check("opacity_logits", self.opacity_logits.len(), n)?;
        check("sh", self.sh.len(), n * self.sh_stride())
    }

    /// Flat view of one parameter group.
    pub fn group(&self, group: ParamGroup) -> &[T] {
        match group {
            ParamGroup::Center => self.centers.as_flattened(),
            ParamGroup::Scale => self.log_scales.as_flattened(),
            ParamGroup::Rotation => self.rotations.as_flattened(),
            ParamGroup::Opacity => &self.opacity_logits,
            ParamGroup::Sh => &self.sh,
        }
    }

    pub fn group_mut(&mut self, group: ParamGroup) -> &mut [T] {
        match group {
            ParamGroup::Center => self.centers.as_flattened_mut(),
            ParamGroup::Scale => self.log_scales.as_flattened_mut(),
            ParamGroup::Rotation => self.rotations.as_flattened_mut(),
            ParamGroup::Opacity => &mut self.opacity_logits,
            ParamGroup::Sh => &mut self.sh,
        }
    }

    /// Scalars per Gaussian in `group`.
    pub fn group_stride(&self, group: ParamGroup) -> usize {
        match group {
            ParamGroup::Center | ParamGroup::Scale => 3,
            ParamGroup::Rotation => 4,
            ParamGroup::Opacity => 1,
            ParamGroup::Sh => self.sh_stride(),
        }
    }

    pub fn param_count(&self) -> usize {
        ParamGroup::ALL.iter().map(|g| self.group(*g).len()).sum()
    }

    pub fn to_f64(&self) -> GaussianSet<f64> {
        let conv3 = |v: &Vec<[T; 3]>| v.iter().map(|a| a.map(T::to_f64)).collect();
        GaussianSet {
            sh_degree: self.sh_degree,
            centers: conv3(&self.centers),
            log_scales: conv3(&self.log_scales),
            rotations: self.rotations.iter().map(|a| a.map(T::to_f64)).collect(),
            opacity_logits: self.opacity_logits.iter().map(|v| v.to_f64()).collect(),
            sh: self.sh.iter().map(|v| v.to_f64()).collect(),
        }
    }

    /// Appends every Gaussian of `other`.
    pub fn extend(&mut self, other: &GaussianSet<T>) -> Result<()> {
        if other.sh_degree != self.sh_degree {
            return Err(Error::dims("SH degree", self.sh_degree, other.sh_degree));
        }
        self.centers.extend_from_slice(&other.centers);
        self.log_scales.extend_from_slice(&other.log_scales);
        self.rotations.extend_from_slice(&other.rotations);
        self.opacity_logits.extend_from_slice(&other.opacity_logits);
        self.sh.extend_from_slice(&other.sh);
        Ok(())
    }

    /// Copy of Gaussians `range`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> GaussianSet<T> {
        let k = self.sh_stride();
        GaussianSet {
            sh_degree: self.sh_degree,
            centers: self.centers[range.clone()].to_vec(),
            log_scales: self.log_scales[range.clone()].to_vec(),
            rotations: self.rotations[range.clone()].to_vec(),
            opacity_logits: self.opacity_logits[range.clone()].to_vec(),
            sh: self.sh[range.start * k..range.end * k].to_vec(),
        }
    }
}

impl GaussianSet<f64> {
    /// `self += scale * other`, parameter-wise.
    pub fn add_scaled<U: Scalar>(&mut self, scale: f64, other: &GaussianSet<U>) -> Result<()> {
        if other.len() != self.len() || other.sh_degree != self.sh_degree {
            return Err(Error::dims("gaussian count", self.len(), other.len()));
        }
        for group in ParamGroup::ALL {
            for (d, s) in self.group_mut(group).iter_mut().zip(other.group(group)) {
                *d += scale * s.to_f64();
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        ParamGroup::ALL
            .iter()
            .all(|g| self.group(*g).iter().all(|v| v.is_finite()))
    }
}

/// Renderable (activated) Gaussians; also used, shape for shape, to hold
/// gradients with respect to activated quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivatedGaussianSet {
    pub sh_degree: usize,
    pub centers: Vec<Vector3<f64>>,
    pub scales: Vec<Vector3<f64>>,
    /// Unit quaternions `[w, x, y, z]`.
    pub rotations: Vec<Quat>,
    pub opacities: Vec<f64>,
    pub sh: Vec<f64>,
}

/// An activated set after skinning into world space.
pub type PosedGaussianSet = ActivatedGaussianSet;

/// Gradients with respect to activated quantities.
pub type ActivatedGradients = ActivatedGaussianSet;

impl ActivatedGaussianSet {
    pub fn zeros(len: usize, sh_degree: usize) -> Self {
        Self {
            sh_degree,
            centers: vec![Vector3::zeros(); len],
            scales: vec![Vector3::zeros(); len],
            rotations: vec![[0.0; 4]; len],
            opacities: vec![0.0; len],
            sh: vec![0.0; len * 3 * sh::coeff_count(sh_degree)],
        }
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn sh_stride(&self) -> usize {
        3 * sh::coeff_count(self.sh_degree)
    }

    pub fn sh_of(&self, i: usize) -> &[f64] {
        let k = self.sh_stride();
        &self.sh[i * k..(i + 1) * k]
    }

    pub fn covariance(&self, i: usize) -> Matrix3<f64> {
        covariance3d(&self.scales[i], &self.rotations[i])
    }

    pub fn extend(&mut self, other: &ActivatedGaussianSet) -> Result<()> {
        if other.sh_degree != self.sh_degree {
            return Err(Error::dims("SH degree", self.sh_degree, other.sh_degree));
        }
        self.centers.extend_from_slice(&other.centers);
        self.scales.extend_from_slice(&other.scales);
        self.rotations.extend_from_slice(&other.rotations);
        self.opacities.extend_from_slice(&other.opacities);
        self.sh.extend_from_slice(&other.sh);
        Ok(())
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> ActivatedGaussianSet {
        let k = self.sh_stride();
        ActivatedGaussianSet {
            sh_degree: self.sh_degree,
            centers: self.centers[range.clone()].to_vec(),
            scales: self.scales[range.clone()].to_vec(),
            rotations: self.rotations[range.clone()].to_vec(),
            opacities: self.opacities[range.clone()].to_vec(),
            sh: self.sh[range.start * k..range.end * k].to_vec(),
        }
    }
}

/// Maps raw parameters to renderable ones: `exp` on scales, `sigmoid` on
/// opacities, normalization of quaternions. Centers and SH pass through.
pub fn activate<T: Scalar>(set: &GaussianSet<T>) -> Result<ActivatedGaussianSet> {
    set.validate()?;
    let mut rotations = Vec::with_capacity(set.len());
    for (index, q) in set.rotations.iter().enumerate() {
        let q = q.map(T::to_f64);
        let n = math::quat_norm(&q);
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::ZeroQuaternion { index });
        }
        rotations.push([q[0] / n, q[1] / n, q[2] / n, q[3] / n]);
    }
    Ok(ActivatedGaussianSet {
        sh_degree: set.sh_degree,
        centers: set
            .centers
            .iter()
            .map(|c| Vector3::new(c[0].to_f64(), c[1].to_f64(), c[2].to_f64()))
            .collect(),
        scales: set
            .log_scales
            .iter()
            .map(|s| {
                Vector3::new(
                    s[0].to_f64().exp(),
                    s[1].to_f64().exp(),
                    s[2].to_f64().exp(),
                )
            })
            .collect(),
        rotations,
        opacities: set
            .opacity_logits
            .iter()
            .map(|o| math::sigmoid(o.to_f64()))
            .collect(),
        sh: set.sh.iter().map(|v| v.to_f64()).collect(),
    })
}

/// Chains gradients with respect to activated quantities back to raw space.
pub fn activation_backward<T: Scalar>(
    raw: &GaussianSet<T>,
    activated: &ActivatedGaussianSet,
    grad: &ActivatedGradients,
) -> Result<GradientSet> {
    let n = raw.len();
    if activated.len() != n || grad.len() != n {
        return Err(Error::dims(
            "activation backward gaussian count",
            n,
            grad.len(),
        ));
    }
    let mut out = GradientSet::zeros(n, raw.sh_degree);
    for i in 0..n {
        out.centers[i] = [grad.centers[i].x, grad.centers[i].y, grad.centers[i].z];
        let s = activated.scales[i];
        let gs = grad.scales[i];
        out.log_scales[i] = [gs.x * s.x, gs.y * s.y, gs.z * s.z];
        let o = activated.opacities[i];
        out.opacity_logits[i] = grad.opacities[i] * o * (1.0 - o);

        // d(q/|q|)/dq = (I - qhat qhat^T) / |q|
        let q = raw.rotations[i].map(T::to_f64);
        let norm = math::quat_norm(&q);
        let qh = activated.rotations[i];
        let gq = grad.rotations[i];
        let dot = qh[0] * gq[0] + qh[1] * gq[1] + qh[2] * gq[2] + qh[3] * gq[3];
        for k in 0..4 {
            out.rotations[i][k] = (gq[k] - qh[k] * dot) / norm;
        }
    }
    out.sh.copy_from_slice(&grad.sh);
    Ok(out)
}

/// `Sigma = R diag(s)^2 R^T` for activated scale and unit rotation.
pub fn covariance3d(scale: &Vector3<f64>, rotation: &Quat) -> Matrix3<f64> {
    let m = math::quat_to_matrix(rotation) * Matrix3::from_diagonal(scale);
    let sigma = m * m.transpose();
    // exact symmetry
    (sigma + sigma.transpose()) * 0.5
}

/// Per-Gaussian skinning weights, `rows x joints`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SkinWeights {
    pub joints: usize,
    pub values: Vec<f32>,
}

impl SkinWeights {
    /// Every row fully bound to `joint`.
    pub fn single_joint(rows: usize, joints: usize, joint: usize) -> Self {
        let mut values = vec![0.0; rows * joints];
        for r in 0..rows {
            values[r * joints + joint] = 1.0;
        }
        Self { joints, values }
    }

    pub fn rows(&self) -> usize {
        if self.joints == 0 {
            0
        } else {
            self.values.len() / self.joints
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.joints..(i + 1) * self.joints]
    }

    /// Rows must be nonnegative and sum to one within `tolerance`.
    pub fn validate(&self, rows: usize, tolerance: f64) -> Result<()> {
        if self.joints == 0 {
            return Err(Error::InvalidConfig(
                "skinning weights need at least one joint".into(),
            ));
        }
        if self.values.len() != rows * self.joints {
            return Err(Error::dims(
                "skinning weight entries",
                rows * self.joints,
                self.values.len(),
            ));
        }
        for r in 0..rows {
            let row = self.row(r);
            if let Some(v) = row.iter().find(|v| **v < 0.0) {
                return Err(Error::NegativeSkinWeight {
                    row: r,
                    value: *v as f64,
                });
            }
            let sum: f64 = row.iter().map(|v| *v as f64).sum();
            if (sum - 1.0).abs() > tolerance || !sum.is_finite() {
                return Err(Error::InvalidSkinWeights { row: r, sum });
            }
        }
        Ok(())
    }
}

/// Rotation plus translation, `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn from_rotation(rotation: Matrix3<f64>) -> Self {
        Self {
            rotation,
            translation: Vector3::zeros(),
        }
    }

    /// Rotation by `angle` about `axis` through `pivot`.
    pub fn rotation_about(axis: &Vector3<f64>, angle: f64, pivot: &Vector3<f64>) -> Self {
        let r = math::quat_to_matrix(&math::quat_from_axis_angle(axis, angle));
        Self {
            rotation: r,
            translation: pivot - r * pivot,
        }
    }

    /// Row-major 3x4 `[R | t]`.
    pub fn from_rows(m: &[f64; 12]) -> Self {
        Self {
            rotation: Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]),
            translation: Vector3::new(m[3], m[7], m[11]),
        }
    }

    pub fn to_rows(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x, //
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y, //
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ]
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Checks `R^T R = I` within `tolerance` and `det R > 0`.
    pub fn check_rigid(&self, tolerance: f64) -> std::result::Result<(), String> {
        if !self
            .rotation
            .iter()
            .chain(self.translation.iter())
            .all(|v| v.is_finite())
        {
            return Err("non-finite entries".into());
        }
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity())
            .abs()
            .max();
        if err > tolerance {
            return Err(format!("R^T R deviates from identity by {err:.3e}"));
        }
        if self.rotation.determinant() <= 0.0 {
            return Err("rotation determinant is not positive".into());
        }
        Ok(())
    }
}

/// Per-joint world transforms for one frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PoseParams {
    pub joints: Vec<RigidTransform>,
}

impl PoseParams {
    pub const RIGID_TOLERANCE: f64 = 1e-5;

    pub fn identity(joints: usize) -> Self {
        Self {
            joints: vec![RigidTransform::identity(); joints],
        }
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (joint, t) in self.joints.iter().enumerate() {
            t.check_rigid(Self::RIGID_TOLERANCE)
                .map_err(|reason| Error::NonRigidJoint { joint, reason })?;
        }
        Ok(())
    }
}

/// Pinhole camera. Pixel `(x, y)` has its center at `(x + 0.5, y + 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub near: f64,
    pub far: f64,
    pub world_to_camera: RigidTransform,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::InvalidCamera(format!(
                "need 0 < near < far (near={}, far={})",
                self.near, self.far
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("image size must be nonzero".into()));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::InvalidCamera("principal point is not finite".into()));
        }
        self.world_to_camera
            .check_rigid(PoseParams::RIGID_TOLERANCE)
            .map_err(|r| Error::InvalidCamera(format!("extrinsics: {r}")))
    }

    /// Camera center in world coordinates.
    pub fn position(&self) -> Vector3<f64> {
        -(self.world_to_camera.rotation.transpose() * self.world_to_camera.translation)
    }

    /// Same view rendered at a different resolution.
    pub fn resized(&self, width: u32, height: u32) -> Camera {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Camera {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
            ..*self
        }
    }
}

/// Expression coefficients for one frame, one per blendshape.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExpressionCoeffs(pub Vec<f64>);

impl ExpressionCoeffs {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Neutral Gaussians, expression deltas, skinning weights, and a separate
/// expression-invariant mouth set bound to one joint.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendshapeModel {
    pub neutral: GaussianSet,
    /// `B_k - B_0` in raw parameter space, one per blendshape.
    pub deltas: Vec<GaussianSet>,
    pub skin_weights: SkinWeights,
    pub mouth: GaussianSet,
    pub mouth_joint: usize,
}

impl BlendshapeModel {
    pub const WEIGHT_TOLERANCE: f64 = 1e-6;

    pub fn sh_degree(&self) -> usize {
        self.neutral.sh_degree
    }

    pub fn expression_count(&self) -> usize {
        self.deltas.len()
    }

    pub fn joint_count(&self) -> usize {
        self.skin_weights.joints
    }

    pub fn validate(&self) -> Result<()> {
        self.neutral.validate()?;
        self.mouth.validate()?;
        let n = self.neutral.len();
        for (k, d) in self.deltas.iter().enumerate() {
            d.validate()?;
            if d.len() != n {
                return Err(Error::dims(
                    format!("blendshape delta {k} gaussian count"),
                    n,
                    d.len(),
                ));
            }
            if d.sh_degree != self.sh_degree() {
                return Err(Error::dims(
                    format!("blendshape delta {k} SH degree"),
                    self.sh_degree(),
                    d.sh_degree,
                ));
            }
        }
        if self.mouth.sh_degree != self.sh_degree() {
            return Err(Error::dims(
                "mouth SH degree",
                self.sh_degree(),
                self.mouth.sh_degree,
            ));
        }
        self.skin_weights.validate(n, Self::WEIGHT_TOLERANCE)?;
        if self.mouth_joint >= self.joint_count() {
            return Err(Error::InvalidJoint {
                index: self.mouth_joint,
                joints: self.joint_count(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn one(
        center: [f32; 3],
        log_scale: [f32; 3],
        rotation: [f32; 4],
        opacity_logit: f32,
    ) -> GaussianSet {
        let mut s = GaussianSet::new(0);
        s.push(&Gaussian {
            center,
            log_scale,
            rotation,
            opacity_logit,
            sh: vec![0.1, 0.2, 0.3],
        })
        .unwrap();
        s
    }

    #[test]
    fn activation_examples() {
        let a = activate(&one([1.0, 2.0, 3.0], [0.0; 3], [2.0, 0.0, 0.0, 0.0], 0.0)).unwrap();
        assert_eq!(a.scales[0], Vector3::new(1.0, 1.0, 1.0));
        assert_eq!(a.opacities[0], 0.5);
        assert_eq!(a.rotations[0], [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(a.centers[0], Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(a.sh, vec![0.1f32 as f64, 0.2f32 as f64, 0.3f32 as f64]);
    }

    #[test]
    fn zero_quaternion_names_index() {
        let mut s = one([0.0; 3], [0.0; 3], [1.0, 0.0, 0.0, 0.0], 0.0);
        s.extend(&one([0.0; 3], [0.0; 3], [0.0; 4], 0.0)).unwrap();
        match activate(&s) {
            Err(Error::ZeroQuaternion { index }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn axis_aligned_covariance() {
        let c = covariance3d(&Vector3::new(1.0, 2.0, 3.0), &math::QUAT_IDENTITY);
        assert_eq!(c, Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 9.0)));
    }

    #[test]
    fn rotated_covariance() {
        // Oracle: R diag(1,4,1) R^T composed directly for a 90 degree z rotation.
        let r = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let expected = r * Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0)) * r.transpose();
        let q = math::quat_from_axis_angle(&Vector3::z(), std::f64::consts::FRAC_PI_2);
        let c = covariance3d(&Vector3::new(1.0, 2.0, 1.0), &q);
        assert_relative_eq!(c, expected, epsilon = 1e-12);
        assert_relative_eq!(
            c,
            Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)),
            epsilon = 1e-12
        );
    }

    #[test]
    fn activation_is_idempotent_on_unit_quaternions() {
        let s = one(
            [0.5, -0.2, 0.1],
            [0.1, -0.3, 0.2],
            [0.5, 0.5, 0.5, 0.5],
            1.5,
        );
        let a = activate(&s).unwrap();
        let again = activate(&s).unwrap();
        assert_eq!(a, again);
        assert_eq!(a.rotations[0], [0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn activation_backward_matches_finite_differences() {
        let s = one(
            [0.5, -0.2, 0.1],
            [0.1, -0.3, 0.2],
            [0.9, -0.2, 0.3, 0.1],
            0.4,
        )
        .to_f64();
        // loss = sum of weighted activated values
        let w = [0.3, -0.7, 1.1, 0.5, -0.4, 0.9, 0.2, -1.3, 0.8, 0.6];
        let loss = |set: &GaussianSet<f64>| {
            let a = activate(set).unwrap();
            w[0] * a.scales[0].x
                + w[1] * a.scales[0].y
                + w[2] * a.scales[0].z
                + w[3] * a.opacities[0]
                + w[4] * a.rotations[0][0]
                + w[5] * a.rotations[0][1]
                + w[6] * a.rotations[0][2]
                + w[7] * a.rotations[0][3]
                + w[8] * a.centers[0].x
                + w[9] * a.sh[1]
        };
        let a = activate(&s).unwrap();
        let mut g = ActivatedGradients::zeros(1, 0);
        g.scales[0] = Vector3::new(w[0], w[1], w[2]);
        g.opacities[0] = w[3];
        g.rotations[0] = [w[4], w[5], w[6], w[7]];
        g.centers[0].x = w[8];
        g.sh[1] = w[9];
        let raw = activation_backward(&s, &a, &g).unwrap();
        let h = 1e-6;
        for group in ParamGroup::ALL {
            for k in 0..s.group(group).len() {
                let mut p = s.clone();
                let mut m = s.clone();
                p.group_mut(group)[k] += h;
                m.group_mut(group)[k] -= h;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                assert_relative_eq!(fd, raw.group(group)[k], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn rigid_rows_round_trip() {
        let t = RigidTransform::rotation_about(
            &Vector3::new(0.2, 1.0, 0.3),
            0.8,
            &Vector3::new(1.0, 2.0, 3.0),
        );
        let back = RigidTransform::from_rows(&t.to_rows());
        assert_eq!(t, back);
        assert!(t.check_rigid(1e-9).is_ok());
        let p = Vector3::new(0.3, -0.4, 2.0);
        assert_relative_eq!(t.inverse().apply(&t.apply(&p)), p, epsilon = 1e-12);
    }

    #[test]
    fn skin_weight_validation() {
        let w = SkinWeights {
            joints: 2,
            values: vec![0.5, 0.5, 0.7, 0.2],
        };
        assert!(matches!(
            w.validate(2, 1e-6),
            Err(Error::InvalidSkinWeights { row: 1, .. })
        ));
        let w = SkinWeights {
            joints: 2,
            values: vec![1.5, -0.5],
        };
        assert!(matches!(
            w.validate(1, 1e-6),
            Err(Error::NegativeSkinWeight { row: 0, .. })
        ));
    }

    proptest! {
        #[test]
        fn covariance_is_symmetric_psd(
            s in prop::array::uniform3(-3.0f64..3.0),
            q in prop::array::uniform4(-1.0f64..1.0),
        ) {
            let n = math::quat_norm(&q);
            prop_assume!(n > 1e-3);
            let q = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
            let scale = Vector3::new(s[0].exp(), s[1].exp(), s[2].exp());
            let c = covariance3d(&scale, &q);
            prop_assert_eq!(c, c.transpose());
            let eig = c.symmetric_eigenvalues();
            let mut got: Vec<f64> = eig.iter().copied().collect();
            got.sort_by(f64::total_cmp);
            let mut want: Vec<f64> = scale.iter().map(|v| v * v).collect();
            want.sort_by(f64::total_cmp);
            for (g, w) in got.iter().zip(&want) {
                prop_assert!(*g >= -1e-12 * want[2]);
                prop_assert!((g - w).abs() <= 1e-9 * want[2]);
            }
        }
    }
}
