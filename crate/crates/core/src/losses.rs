//! Training objective: photometric, coverage and mouth-containment terms.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::ssim;

/// Term weights of the total objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub rgb: f64,
    pub alpha: f64,
    pub reg: f64,
    /// Share of L1 inside the photometric term; the rest is D-SSIM.
    pub l1_fraction: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rgb: 1.0,
            alpha: 10.0,
            reg: 100.0,
            l1_fraction: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rgb", self.rgb),
            ("alpha", self.alpha),
            ("reg", self.reg),
            ("l1_fraction", self.l1_fraction),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.l1_fraction > 1.0 {
            return Err(Error::InvalidConfig(format!(
                "l1_fraction must be in [0, 1], got {}",
                self.l1_fraction
            )));
        }
        Ok(())
    }
}

/// Finite cylinder, used to keep mouth Gaussians inside the mouth cavity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CylinderVolume {
    pub center: [f64; 3],
    /// Unit vector along the cylinder.
    pub axis: [f64; 3],
    pub radius: f64,
    pub half_height: f64,
}

impl CylinderVolume {
    pub const AXIS_TOLERANCE: f64 = 1e-6;

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::InvalidCylinder(format!(
                "radius must be positive, got {}",
                self.radius
            )));
        }
        if !(self.half_height > 0.0 && self.half_height.is_finite()) {
            return Err(Error::InvalidCylinder(format!(
                "half height must be positive, got {}",
                self.half_height
            )));
        }
        let n = Vector3::from(self.axis).norm();
        if !((n - 1.0).abs() <= Self::AXIS_TOLERANCE) {
            return Err(Error::InvalidCylinder(format!(
                "axis must be unit length, |axis| = {n}"
            )));
        }
        if !self.center.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidCylinder("center is not finite".into()));
        }
        Ok(())
    }

    /// `(axial offset, radial offset, radial unit vector)` of `x`.
    fn local(&self, x: &Vector3<f64>) -> (f64, f64, Vector3<f64>) {
        let axis = Vector3::from(self.axis);
        let p = x - Vector3::from(self.center);
        let a = p.dot(&axis);
        let radial = p - axis * a;
        let r = radial.norm();
        let dir = if r > 0.0 {
            radial / r
        } else {
            Vector3::zeros()
        };
        (a, r, dir)
    }
}

/// Mean absolute difference.
pub fn l1(img: &Image, target: &Image) -> Result<f64> {
    img.check_same_shape(target, "l1")?;
    if img.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = img
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(s / img.len() as f64)
}

/// L1 and its gradient with respect to `img` (zero where the inputs agree).
pub fn l1_with_grad(img: &Image, target: &Image) -> Result<(f64, Image)> {
    let v = l1(img, target)?;
    let n = img.len().max(1) as f64;
    let mut g = Image::new(img.width(), img.height(), img.channels());
    for (o, (a, b)) in g
        .data_mut()
        .iter_mut()
        .zip(img.data().iter().zip(target.data()))
    {
        *o = if a > b {
            1.0 / n
        } else if a < b {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok((v, g))
}

/// Structural dissimilarity `(1 - SSIM) / 2`.
pub fn dssim(img: &Image, target: &Image) -> Result<f64> {
    Ok((1.0 - ssim::ssim(img, target)?) / 2.0)
}

pub fn dssim_with_grad(img: &Image, target: &Image) -> Result<(f64, Image)> {
    let (s, g) = ssim::ssim_with_grad(img, target)?;
    Ok(((1.0 - s) / 2.0, g.scaled(-0.5)))
}

/// `l1_fraction * l1 + (1 - l1_fraction) * dssim`.
pub fn mix_rgb(l1: f64, dssim: f64, l1_fraction: f64) -> f64 {
    l1_fraction * l1 + (1.0 - l1_fraction) * dssim
}

/// Photometric term: L1 blended with D-SSIM.
pub fn rgb_loss(img: &Image, target: &Image, l1_fraction: f64) -> Result<f64> {
    Ok(mix_rgb(l1(img, target)?, dssim(img, target)?, l1_fraction))
}

pub fn rgb_loss_with_grad(img: &Image, target: &Image, l1_fraction: f64) -> Result<(f64, Image)> {
    let (a, ga) = l1_with_grad(img, target)?;
    let (b, gb) = dssim_with_grad(img, target)?;
    let mut g = ga.scaled(l1_fraction);
    for (o, v) in g.data_mut().iter_mut().zip(gb.data()) {
        *o += (1.0 - l1_fraction) * v;
    }
    Ok((mix_rgb(a, b, l1_fraction), g))
}

/// Per-frame mean squared difference between coverage and mask, averaged
/// over frames.
pub fn alpha_loss(coverage: &[Image], masks: &[Image]) -> Result<f64> {
    if coverage.len() != masks.len() {
        return Err(Error::CountMismatch {
            what: "mask frames",
            declared: coverage.len(),
            actual: masks.len(),
        });
    }
    if coverage.is_empty() {
        return Err(Error::Empty("alpha loss frames"));
    }
    let mut total = 0.0;
    for (a, m) in coverage.iter().zip(masks) {
        total += alpha_loss_with_grad(a, m)?.0;
    }
    Ok(total / coverage.len() as f64)
}

/// Single-frame coverage loss and its gradient with respect to `coverage`.
pub fn alpha_loss_with_grad(coverage: &Image, mask: &Image) -> Result<(f64, Image)> {
    coverage.check_same_shape(mask, "alpha loss")?;
    let n = coverage.len().max(1) as f64;
    let mut g = Image::new(coverage.width(), coverage.height(), coverage.channels());
    let mut s = 0.0;
    for (o, (a, m)) in g
        .data_mut()
        .iter_mut()
        .zip(coverage.data().iter().zip(mask.data()))
    {
        let d = a - m;
        s += d * d;
        *o = 2.0 * d / n;
    }
    Ok((s / n, g))
}

/// Exact signed distance to a finite cylinder; negative inside.
pub fn cylinder_sdf(x: &Vector3<f64>, v: &CylinderVolume) -> f64 {
    let (a, r, _) = v.local(x);
    let dx = r - v.radius;
    let dy = a.abs() - v.half_height;
    dx.max(dy).min(0.0) + dx.max(0.0).hypot(dy.max(0.0))
}

/// Gradient of [`cylinder_sdf`] where the point is outside the cylinder;
/// zero inside.
pub fn cylinder_sdf_gradient(x: &Vector3<f64>, v: &CylinderVolume) -> Vector3<f64> {
    let (a, r, dir) = v.local(x);
    let dx = (r - v.radius).max(0.0);
    let dy = (a.abs() - v.half_height).max(0.0);
    let outside = dx.hypot(dy);
    if outside == 0.0 {
        return Vector3::zeros();
    }
    let axis = Vector3::from(v.axis);
    (dir * dx + axis * (a.signum() * dy)) / outside
}

/// Mean squared positive signed distance of `centers` to `v`.
pub fn reg_loss(centers: &[Vector3<f64>], v: &CylinderVolume) -> Result<f64> {
    Ok(reg_loss_with_grad(centers, v)?.0)
}

pub fn reg_loss_with_grad(
    centers: &[Vector3<f64>],
    v: &CylinderVolume,
) -> Result<(f64, Vec<Vector3<f64>>)> {
    v.validate()?;
    if centers.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = centers.len() as f64;
    let mut total = 0.0;
    let grads = centers
        .iter()
        .map(|x| {
            let d = cylinder_sdf(x, v);
            if d > 0.0 {
                total += d * d;
                cylinder_sdf_gradient(x, v) * (2.0 * d / n)
            } else {
                Vector3::zeros()
            }
        })
        .collect();
    Ok((total / n, grads))
}

/// Unweighted objective terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub rgb: f64,
    pub alpha: f64,
    pub reg: f64,
}

/// `rgb_weight * L_rgb + alpha_weight * L_alpha + reg_weight * L_reg`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    w.rgb * c.rgb + w.alpha * c.alpha + w.reg * c.reg
}

/// Objective value of one frame with gradients for the backward chain.
#[derive(Debug, Clone)]
pub struct FrameObjective {
    pub components: LossComponents,
    pub total: f64,
    pub d_rgb: Image,
    pub d_alpha: Image,
    /// One entry per mouth center (empty without a volume).
    pub d_mouth_centers: Vec<Vector3<f64>>,
}

/// Evaluates the weighted objective for one rendered frame.
pub fn frame_objective(
    rgb: &Image,
    coverage: &Image,
    target: &Image,
    mask: &Image,
    mouth_centers: &[Vector3<f64>],
    volume: Option<&CylinderVolume>,
    weights: &LossWeights,
) -> Result<FrameObjective> {
    weights.validate()?;
    let (l_rgb, g_rgb) = rgb_loss_with_grad(rgb, target, weights.l1_fraction)?;
    let (l_alpha, g_alpha) = alpha_loss_with_grad(coverage, mask)?;
    let (l_reg, g_reg) = match volume {
        Some(v) => reg_loss_with_grad(mouth_centers, v)?,
        None => (0.0, Vec::new()),
    };
    let components = LossComponents {
        rgb: l_rgb,
        alpha: l_alpha,
        reg: l_reg,
    };
    Ok(FrameObjective {
        total: total_loss(&components, weights),
        components,
        d_rgb: g_rgb.scaled(weights.rgb),
        d_alpha: g_alpha.scaled(weights.alpha),
        d_mouth_centers: g_reg.into_iter().map(|g| g * weights.reg).collect(),
    })
}
