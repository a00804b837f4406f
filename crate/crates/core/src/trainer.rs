//! Adam optimization of a blendshape model against posed target frames.

use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blendpose::{
    blend_expression, mouth_frames, pose_model, skin, skin_backward, skinning_frames,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::knn;
use crate::losses::{self, CylinderVolume, LossComponents, LossWeights};
use crate::math;
use crate::metrics::{QualityReport, VideoSequence};
use crate::model::{
    activate, activation_backward, BlendshapeModel, Camera, ExpressionCoeffs, Gaussian,
    GaussianSet, GradientSet, ParamGroup, PoseParams, SkinWeights,
};
use crate::rasterizer::{rasterize_backward, render_posed, RenderOutput, RenderSettings};
use crate::sh;

/// Per-group Adam step sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub center: f64,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub sh: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            center: 3.2e-7,
            scale: 5e-4,
            rotation: 1e-4,
            opacity: 5e-5,
            sh: 1.25e-3,
        }
    }
}

impl LearningRates {
    pub fn get(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Center => self.center,
            ParamGroup::Scale => self.scale,
            ParamGroup::Rotation => self.rotation,
            ParamGroup::Opacity => self.opacity,
            ParamGroup::Sh => self.sh,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rates: LearningRates,
    pub adam: AdamParams,
    pub iterations: u64,
    pub seed: u64,
    pub loss_weights: LossWeights,
    /// Mouth containment volume in the jaw's rest frame. When absent it is
    /// taken from the init spec or fitted to the mouth points.
    pub cylinder: Option<CylinderVolume>,
    pub neutral_count: usize,
    pub mouth_count: usize,
    pub sh_degree: usize,
    /// Multiplies the center learning rate (scene-extent scaling).
    pub position_lr_scale: f64,
    /// Per-iteration exponential decay factor applied to every rate.
    pub lr_decay: Option<f64>,
    /// Trailing frames withheld from training. Defaults to
    /// `min(350, frames / 5)`.
    pub holdout: Option<usize>,
    /// Write a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: u64,
    pub background: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rates: LearningRates::default(),
            adam: AdamParams::default(),
            iterations: 30_000,
            seed: 0,
            loss_weights: LossWeights::default(),
            cylinder: None,
            neutral_count: 50_000,
            mouth_count: 14_000,
            sh_degree: 3,
            position_lr_scale: 1.0,
            lr_decay: None,
            holdout: None,
            checkpoint_every: 0,
            background: [0.0; 3],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for g in ParamGroup::ALL {
            let r = self.learning_rates.get(g);
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "{} learning rate must be > 0, got {r}",
                    g.name()
                )));
            }
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "Adam needs 0 <= beta < 1 and epsilon > 0 (beta1={}, beta2={}, epsilon={})",
                a.beta1, a.beta2, a.epsilon
            )));
        }
        if self.neutral_count == 0 {
            return Err(Error::InvalidConfig("neutral count must be > 0".into()));
        }
        if self.sh_degree > sh::MAX_DEGREE {
            return Err(Error::InvalidConfig(format!(
                "SH degree {} exceeds {}",
                self.sh_degree,
                sh::MAX_DEGREE
            )));
        }
        if !(self.position_lr_scale > 0.0 && self.position_lr_scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "position_lr_scale must be > 0, got {}",
                self.position_lr_scale
            )));
        }
        if let Some(d) = self.lr_decay {
            if !(d > 0.0 && d <= 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "lr_decay must be in (0, 1], got {d}"
                )));
            }
        }
        if let Some(v) = &self.cylinder {
            v.validate()?;
        }
        self.loss_weights.validate()
    }

    /// Step size for `group` at zero-based iteration `iteration`.
    pub fn rate(&self, group: ParamGroup, iteration: u64) -> f64 {
        let mut r = self.learning_rates.get(group);
        if group == ParamGroup::Center {
            r *= self.position_lr_scale;
        }
        if let Some(d) = self.lr_decay {
            r *= d.powf(iteration as f64);
        }
        r
    }

    /// Number of trailing frames held out of a sequence of `frames`.
    pub fn holdout_for(&self, frames: usize) -> usize {
        self.holdout
            .unwrap_or((frames / 5).min(350))
            .min(frames.saturating_sub(1))
    }
}

/// Gradients shaped like every trainable block of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradients {
    pub neutral: GradientSet,
    pub deltas: Vec<GradientSet>,
    pub mouth: GradientSet,
}

impl ModelGradients {
    pub fn zeros_like(model: &BlendshapeModel) -> Self {
        let d = model.sh_degree();
        Self {
            neutral: GradientSet::zeros(model.neutral.len(), d),
            deltas: model
                .deltas
                .iter()
                .map(|x| GradientSet::zeros(x.len(), d))
                .collect(),
            mouth: GradientSet::zeros(model.mouth.len(), d),
        }
    }

    /// `(label, block)` in storage order: neutral, deltas, mouth.
    pub fn blocks(&self) -> Vec<(String, &GradientSet)> {
        let mut out = vec![("neutral".to_string(), &self.neutral)];
        out.extend(
            self.deltas
                .iter()
                .enumerate()
                .map(|(k, d)| (format!("delta[{k}]"), d)),
        );
        out.push(("mouth".to_string(), &self.mouth));
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut GradientSet> {
        let mut out = vec![&mut self.neutral];
        out.extend(self.deltas.iter_mut());
        out.push(&mut self.mouth);
        out
    }

    /// Whether the shapes match `model` block for block.
    pub fn matches(&self, model: &BlendshapeModel) -> bool {
        self.neutral.len() == model.neutral.len()
            && self.mouth.len() == model.mouth.len()
            && self.deltas.len() == model.deltas.len()
            && self
                .deltas
                .iter()
                .zip(&model.deltas)
                .all(|(a, b)| a.len() == b.len())
            && self
                .blocks()
                .iter()
                .all(|(_, b)| b.sh_degree == model.sh_degree())
    }
}

fn model_blocks_mut(model: &mut BlendshapeModel) -> Vec<&mut GaussianSet> {
    let mut out = vec![&mut model.neutral];
    out.extend(model.deltas.iter_mut());
    out.push(&mut model.mouth);
    out
}

/// Model plus optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: BlendshapeModel,
    pub first_moment: ModelGradients,
    pub second_moment: ModelGradients,
    /// Completed optimization steps.
    pub iteration: u64,
    /// Frame sampling is derived from `(seed, iteration)`.
    pub seed: u64,
    /// Mouth containment volume used by the regularizer.
    pub volume: Option<CylinderVolume>,
}

impl TrainState {
    pub fn new(model: BlendshapeModel, seed: u64, volume: Option<CylinderVolume>) -> Self {
        let zeros = ModelGradients::zeros_like(&model);
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            model,
            iteration: 0,
            seed,
            volume,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !self.first_moment.matches(&self.model) || !self.second_moment.matches(&self.model) {
            return Err(Error::InvalidConfig(
                "optimizer moments do not match the model".into(),
            ));
        }
        if let Some(v) = &self.volume {
            v.validate()?;
        }
        Ok(())
    }
}

/// One bias-corrected Adam update of every parameter. Nothing is modified
/// if any gradient is non-finite.
pub fn adam_step(
    state: &mut TrainState,
    grads: &ModelGradients,
    config: &TrainConfig,
) -> Result<()> {
    if !grads.matches(&state.model) {
        return Err(Error::InvalidConfig(
            "gradient shapes do not match the model".into(),
        ));
    }
    for (label, block) in grads.blocks() {
        for g in ParamGroup::ALL {
            let stride = block.group_stride(g);
            if let Some(pos) = block.group(g).iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    group: format!("{label}.{}", g.name()),
                    index: pos / stride,
                });
            }
        }
    }
    let AdamParams {
        beta1,
        beta2,
        epsilon,
    } = config.adam;
    let t = state.iteration;
    let bc1 = 1.0 - beta1.powf((t + 1) as f64);
    let bc2 = 1.0 - beta2.powf((t + 1) as f64);
    let rates: Vec<f64> = ParamGroup::ALL.iter().map(|g| config.rate(*g, t)).collect();

    let params = model_blocks_mut(&mut state.model);
    let firsts = state.first_moment.blocks_mut();
    let seconds = state.second_moment.blocks_mut();
    let blocks = grads.blocks();
    for (((p, m), v), (_, g)) in params.into_iter().zip(firsts).zip(seconds).zip(blocks) {
        for (gi, group) in ParamGroup::ALL.iter().enumerate() {
            let lr = rates[gi];
            let p = p.group_mut(*group);
            let m = m.group_mut(*group);
            let v = v.group_mut(*group);
            let g = g.group(*group);
            p.par_iter_mut()
                .zip(m.par_iter_mut())
                .zip(v.par_iter_mut())
                .zip(g.par_iter())
                .for_each(|(((p, m), v), g)| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let step = lr * (*m / bc1) / ((*v / bc2).sqrt() + epsilon);
                    if step != 0.0 {
                        *p = (*p as f64 - step) as f32;
                    }
                });
        }
    }
    state.iteration += 1;
    Ok(())
}

/// Everything needed to render and score one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameData {
    pub index: u32,
    pub psi: ExpressionCoeffs,
    pub pose: PoseParams,
    pub camera: Camera,
    pub target: Image,
    pub mask: Image,
}

/// Renders a model for one expression, pose and camera.
pub fn render_frame(
    model: &BlendshapeModel,
    psi: &ExpressionCoeffs,
    pose: &PoseParams,
    camera: &Camera,
    background: [f64; 3],
) -> Result<RenderOutput> {
    let posed = pose_model(model, psi, pose)?;
    render_posed(&posed, camera, background, &RenderSettings::default())
}

/// Weighted objective value of one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameLoss {
    pub components: LossComponents,
    pub total: f64,
}

fn check_frame(frame: &FrameData) -> Result<()> {
    frame.camera.validate()?;
    let (w, h) = (frame.camera.width as usize, frame.camera.height as usize);
    if frame.target.width() != w || frame.target.height() != h || frame.target.channels() != 3 {
        return Err(Error::InvalidSequence(format!(
            "frame {}: target is {}x{}x{}, camera renders {w}x{h}x3",
            frame.index,
            frame.target.width(),
            frame.target.height(),
            frame.target.channels()
        )));
    }
    frame
        .mask
        .check_same_shape(&Image::new(w, h, 1), "mask vs camera")
}

fn mouth_rest_centers(model: &BlendshapeModel) -> Vec<Vector3<f64>> {
    model
        .mouth
        .centers
        .iter()
        .map(|c| Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64))
        .collect()
}

/// Objective of one frame without gradients.
pub fn frame_loss(
    model: &BlendshapeModel,
    volume: Option<&CylinderVolume>,
    frame: &FrameData,
    config: &TrainConfig,
) -> Result<FrameLoss> {
    check_frame(frame)?;
    let out = render_frame(
        model,
        &frame.psi,
        &frame.pose,
        &frame.camera,
        config.background,
    )?;
    let w = &config.loss_weights;
    let components = LossComponents {
        rgb: losses::rgb_loss(&out.rgb, &frame.target, w.l1_fraction)?,
        alpha: losses::alpha_loss_with_grad(&out.alpha, &frame.mask)?.0,
        reg: match volume {
            Some(v) => losses::reg_loss(&mouth_rest_centers(model), v)?,
            None => 0.0,
        },
    };
    Ok(FrameLoss {
        total: losses::total_loss(&components, w),
        components,
    })
}

/// Objective of one frame and its gradient with respect to every raw
/// parameter of the model.
pub fn model_gradients(
    model: &BlendshapeModel,
    volume: Option<&CylinderVolume>,
    frame: &FrameData,
    config: &TrainConfig,
) -> Result<(FrameLoss, ModelGradients)> {
    check_frame(frame)?;
    frame.pose.validate()?;
    let n = model.neutral.len();

    let blended = blend_expression(model, &frame.psi)?;
    let head_rest = activate(&blended)?;
    let head_frames = skinning_frames(&model.skin_weights, &frame.pose, n)?;
    let mut posed = skin(&head_rest, &head_frames)?;
    let mouth_rest = activate(&model.mouth)?;
    let jaw_frames = mouth_frames(model, &frame.pose)?;
    posed.extend(&skin(&mouth_rest, &jaw_frames)?)?;

    let out = render_posed(
        &posed,
        &frame.camera,
        config.background,
        &RenderSettings::default(),
    )?;
    let obj = losses::frame_objective(
        &out.rgb,
        &out.alpha,
        &frame.target,
        &frame.mask,
        &mouth_rest_centers(model),
        volume,
        &config.loss_weights,
    )?;
    let g_posed = rasterize_backward(&out, &posed, &frame.camera, &obj.d_rgb, &obj.d_alpha)?;

    let g_head = skin_backward(&head_frames, &g_posed.slice(0..n))?;
    let g_blended = activation_backward(&blended, &head_rest, &g_head)?;
    let mut g_mouth = skin_backward(&jaw_frames, &g_posed.slice(n..posed.len()))?;
    for (g, r) in g_mouth.centers.iter_mut().zip(&obj.d_mouth_centers) {
        *g += r;
    }
    let g_mouth = activation_backward(&model.mouth, &mouth_rest, &g_mouth)?;

    // Blending is linear: the neutral set sees the full gradient, delta k
    // sees it scaled by psi_k.
    let deltas = frame
        .psi
        .0
        .iter()
        .map(|psi| {
            let mut d = GradientSet::zeros(n, model.sh_degree());
            if *psi != 0.0 {
                d.add_scaled(*psi, &g_blended)?;
            }
            Ok(d)
        })
        .collect::<Result<Vec<_>>>()?;
    let loss = FrameLoss {
        components: obj.components,
        total: obj.total,
    };
    Ok((
        loss,
        ModelGradients {
            neutral: g_blended,
            deltas,
            mouth: g_mouth,
        },
    ))
}

/// Forward, backward and one Adam update on `frame`.
pub fn train_step(
    state: &mut TrainState,
    frame: &FrameData,
    config: &TrainConfig,
) -> Result<FrameLoss> {
    let (loss, grads) = model_gradients(&state.model, state.volume.as_ref(), frame, config)?;
    adam_step(state, &grads, config)?;
    Ok(loss)
}

/// One line of the progress log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iter: u64,
    pub loss: f64,
    pub l_rgb: f64,
    pub l_alpha: f64,
    pub l_reg: f64,
    pub wall_ms: f64,
}

/// Frame used at zero-based `iteration`: uniform with replacement, a pure
/// function of the seed so that resumed runs continue identically.
pub fn sample_frame(seed: u64, iteration: u64, frames: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    rng.random_range(0..frames)
}

/// Runs until `config.iterations` steps have completed. `on_step` sees the
/// state after every step and may stop the run by returning an error.
pub fn train<F>(
    state: &mut TrainState,
    frames: &[FrameData],
    config: &TrainConfig,
    mut on_step: F,
) -> Result<()>
where
    F: FnMut(&TrainState, &StepRecord) -> Result<()>,
{
    config.validate()?;
    state.validate()?;
    if frames.is_empty() {
        return Err(Error::Empty("training frames"));
    }
    while state.iteration < config.iterations {
        let started = Instant::now();
        let frame = &frames[sample_frame(state.seed, state.iteration, frames.len())];
        let loss = train_step(state, frame, config)?;
        let record = StepRecord {
            iter: state.iteration,
            loss: loss.total,
            l_rgb: loss.components.rgb,
            l_alpha: loss.components.alpha,
            l_reg: loss.components.reg,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        on_step(state, &record)?;
    }
    Ok(())
}

/// Mean objective over `frames`.
pub fn mean_loss(
    model: &BlendshapeModel,
    volume: Option<&CylinderVolume>,
    frames: &[FrameData],
    config: &TrainConfig,
) -> Result<f64> {
    if frames.is_empty() {
        return Err(Error::Empty("frames"));
    }
    let losses = frames
        .par_iter()
        .map(|f| Ok(frame_loss(model, volume, f, config)?.total))
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / frames.len() as f64)
}

/// Renders every frame and scores it against its target.
pub fn evaluate(
    model: &BlendshapeModel,
    frames: &[FrameData],
    background: [f64; 3],
) -> Result<QualityReport> {
    if frames.is_empty() {
        return Err(Error::Empty("evaluation frames"));
    }
    let renders = frames
        .iter()
        .map(|f| Ok(render_frame(model, &f.psi, &f.pose, &f.camera, background)?.rgb))
        .collect::<Result<Vec<_>>>()?;
    let targets = frames.iter().map(|f| f.target.clone()).collect();
    QualityReport::compute(&VideoSequence::new(renders)?, &VideoSequence::new(targets)?)
}

/// Axis-aligned ellipsoid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

/// A seed point for initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitPoint {
    pub position: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<[f64; 3]>,
    /// One skinning weight per joint; normalized on use.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

/// Where to place the initial Gaussians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    pub expressions: usize,
    pub joints: usize,
    #[serde(default)]
    pub mouth_joint: usize,
    /// Rest positions of the joints, for nearest-joint skinning weights.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub joint_positions: Vec<[f64; 3]>,
    /// Sampling region when no points are supplied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Ellipsoid>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub points: Vec<InitPoint>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mouth_points: Vec<InitPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cylinder: Option<CylinderVolume>,
}

impl InitSpec {
    /// Bounds used when a spec supplies neither points nor bounds: a
    /// head-sized ellipsoid at the origin.
    pub const DEFAULT_BOUNDS: Ellipsoid = Ellipsoid {
        center: [0.0; 3],
        radii: [0.1, 0.12, 0.1],
    };

    pub fn new(expressions: usize, joints: usize) -> Self {
        Self {
            expressions,
            joints,
            mouth_joint: 0,
            joint_positions: Vec::new(),
            bounds: None,
            points: Vec::new(),
            mouth_points: Vec::new(),
            cylinder: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints == 0 {
            return Err(Error::InvalidConfig(
                "init spec needs at least one joint".into(),
            ));
        }
        if self.mouth_joint >= self.joints {
            return Err(Error::InvalidJoint {
                index: self.mouth_joint,
                joints: self.joints,
            });
        }
        if !self.joint_positions.is_empty() && self.joint_positions.len() != self.joints {
            return Err(Error::dims(
                "joint positions",
                self.joints,
                self.joint_positions.len(),
            ));
        }
        for p in self.points.iter().chain(&self.mouth_points) {
            if let Some(w) = &p.weights {
                if w.len() != self.joints {
                    return Err(Error::dims("init point weights", self.joints, w.len()));
                }
                let sum: f64 = w.iter().sum();
                if w.iter().any(|v| *v < 0.0) || !(sum > 0.0) {
                    return Err(Error::InvalidConfig(format!(
                        "init point weights must be nonnegative with positive sum, got {w:?}"
                    )));
                }
            }
        }
        if let Some(b) = &self.bounds {
            if !b.radii.iter().all(|r| *r > 0.0 && r.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "ellipsoid radii must be positive, got {:?}",
                    b.radii
                )));
            }
        }
        if let Some(v) = &self.cylinder {
            v.validate()?;
        }
        Ok(())
    }
}

/// Result of [`initialize_model`].
#[derive(Debug, Clone, PartialEq)]
pub struct Initialized {
    pub model: BlendshapeModel,
    pub volume: Option<CylinderVolume>,
}

/// Cylinder along +y around the bounding box of `points`, inflated 10%.
pub fn fit_cylinder(points: &[Vector3<f64>]) -> Option<CylinderVolume> {
    let first = points.first()?;
    let (mut lo, mut hi) = (*first, *first);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let c = (lo + hi) / 2.0;
    let h = (hi - lo) / 2.0;
    let floor = 1e-4;
    Some(CylinderVolume {
        center: c.into(),
        axis: [0.0, 1.0, 0.0],
        radius: (1.1 * h.x.hypot(h.z)).max(floor),
        half_height: (1.1 * h.y).max(floor),
    })
}

fn sample_in_ellipsoid(rng: &mut ChaCha8Rng, e: &Ellipsoid) -> Vector3<f64> {
    loop {
        let u = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if u.norm_squared() <= 1.0 {
            return Vector3::from(e.center) + u.component_mul(&Vector3::from(e.radii));
        }
    }
}

fn sample_in_cylinder(rng: &mut ChaCha8Rng, v: &CylinderVolume) -> Vector3<f64> {
    let axis = Vector3::from(v.axis);
    let helper = if axis.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let u = axis.cross(&helper).normalize();
    let w = axis.cross(&u);
    loop {
        let (a, b) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if a * a + b * b >= 0.98 {
            continue;
        }
        let t = rng.random_range(-0.99..0.99);
        return Vector3::from(v.center) + (u * a + w * b) * v.radius + axis * (t * v.half_height);
    }
}

/// Picks `count` points: a seeded subset when there are enough, otherwise
/// all of them plus jittered copies.
fn choose_points(rng: &mut ChaCha8Rng, points: &[InitPoint], count: usize) -> Vec<InitPoint> {
    if count <= points.len() {
        let mut idx = rand::seq::index::sample(rng, points.len(), count).into_vec();
        idx.sort_unstable();
        return idx.into_iter().map(|i| points[i].clone()).collect();
    }
    let pos: Vec<Vector3<f64>> = points.iter().map(|p| Vector3::from(p.position)).collect();
    let spacing = knn::mean_neighbor_distance(&pos, 3, 1e-3);
    let mut out = points.to_vec();
    while out.len() < count {
        let i = rng.random_range(0..points.len());
        let mut p = points[i].clone();
        let jitter = Vector3::new(
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
        ) * spacing[i];
        p.position = (pos[i] + jitter).into();
        out.push(p);
    }
    out
}

fn seed_gaussians(points: &[InitPoint], sh_degree: usize) -> GaussianSet {
    let pos: Vec<Vector3<f64>> = points.iter().map(|p| Vector3::from(p.position)).collect();
    let spacing = knn::mean_neighbor_distance(&pos, 3, 1e-2);
    let opacity = math::logit(0.1) as f32;
    let mut set = GaussianSet::new(sh_degree);
    for (p, d) in points.iter().zip(spacing) {
        let mut coeffs = vec![0.0f32; 3 * sh::coeff_count(sh_degree)];
        if let Some(c) = p.color {
            for ch in 0..3 {
                coeffs[ch] = sh::rgb_to_dc(c[ch]) as f32;
            }
        }
        let s = d.max(1e-6).ln() as f32;
        set.push(&Gaussian {
            center: p.position.map(|v| v as f32),
            log_scale: [s; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: opacity,
            sh: coeffs,
        })
        .expect("coefficient count matches degree");
    }
    set
}

fn skin_weight_row(p: &InitPoint, spec: &InitSpec) -> Vec<f32> {
    let mut row = vec![0.0f32; spec.joints];
    if let Some(w) = &p.weights {
        let sum: f64 = w.iter().sum();
        for (o, v) in row.iter_mut().zip(w) {
            *o = (v / sum) as f32;
        }
        return row;
    }
    let nearest = if spec.joint_positions.is_empty() {
        0
    } else {
        let x = Vector3::from(p.position);
        spec.joint_positions
            .iter()
            .map(|j| (Vector3::from(*j) - x).norm())
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
            .unwrap_or(0)
    };
    row[nearest] = 1.0;
    row
}

/// Builds the starting model: neutral Gaussians from the spec's points (or
/// sampled in its bounds), zero deltas, mouth Gaussians inside the mouth
/// volume. Deterministic per `config.seed`.
pub fn initialize_model(config: &TrainConfig, spec: &InitSpec) -> Result<Initialized> {
    config.validate()?;
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(u64::MAX);

    let neutral_points = if spec.points.is_empty() {
        let bounds = spec.bounds.unwrap_or(InitSpec::DEFAULT_BOUNDS);
        (0..config.neutral_count)
            .map(|_| InitPoint {
                position: sample_in_ellipsoid(&mut rng, &bounds).into(),
                color: None,
                weights: None,
            })
            .collect()
    } else {
        choose_points(&mut rng, &spec.points, config.neutral_count)
    };
    let neutral = seed_gaussians(&neutral_points, config.sh_degree);
    let weights = SkinWeights {
        joints: spec.joints,
        values: neutral_points
            .iter()
            .flat_map(|p| skin_weight_row(p, spec))
            .collect(),
    };

    let mouth_pos: Vec<Vector3<f64>> = spec
        .mouth_points
        .iter()
        .map(|p| Vector3::from(p.position))
        .collect();
    let volume = config
        .cylinder
        .or(spec.cylinder)
        .or_else(|| fit_cylinder(&mouth_pos));
    let mouth = if config.mouth_count == 0 {
        GaussianSet::new(config.sh_degree)
    } else {
        let v = volume.ok_or_else(|| {
            Error::InvalidConfig(
                "mouth Gaussians need a cylinder volume or mouth points to fit one".into(),
            )
        })?;
        let inside: Vec<InitPoint> = spec
            .mouth_points
            .iter()
            .filter(|p| losses::cylinder_sdf(&Vector3::from(p.position), &v) < 0.0)
            .cloned()
            .collect();
        let mut chosen = if inside.is_empty() {
            Vec::new()
        } else {
            let take = config.mouth_count.min(inside.len());
            choose_points(&mut rng, &inside, take)
        };
        while chosen.len() < config.mouth_count {
            chosen.push(InitPoint {
                position: sample_in_cylinder(&mut rng, &v).into(),
                color: None,
                weights: None,
            });
        }
        seed_gaussians(&chosen, config.sh_degree)
    };

    let model = BlendshapeModel {
        deltas: vec![GaussianSet::zeros(neutral.len(), config.sh_degree); spec.expressions],
        neutral,
        skin_weights: weights,
        mouth,
        mouth_joint: spec.mouth_joint,
    };
    model.validate()?;
    Ok(Initialized { model, volume })
}
