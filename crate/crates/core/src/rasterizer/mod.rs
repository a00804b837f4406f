//! Differentiable tile-based EWA splatting.
//!
//! Forward: [`project`] turns posed Gaussians into screen-space splats,
//! [`rasterize`] composites them front to back per 16x16 tile. A brute-force
//! [`rasterize_reference`] with the same compositing rules serves as an
//! oracle. [`rasterize_backward`] is the exact adjoint of the whole chain.

mod backward;
mod forward;
mod project;

pub use backward::{rasterize_backward, splat_backward, SplatGradients};
pub use forward::{rasterize, rasterize_reference, rasterize_reference_with, rasterize_with};
pub use project::{project, project_backward, project_with};

use crate::error::Result;
use crate::image::Image;
use crate::model::{
    activate, activation_backward, ActivatedGaussianSet, Camera, GaussianSet, GradientSet, Scalar,
};

/// Compositing and projection constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    pub tile_size: usize,
    /// Splat contributions below this alpha are skipped.
    pub alpha_cutoff: f64,
    /// Compositing stops once transmittance falls below this. Zero disables.
    pub min_transmittance: f64,
    /// Added to the diagonal of every screen-space covariance (pixels^2).
    pub dilation: f64,
    /// Centers projecting further than this fraction of the image size
    /// outside the viewport are culled.
    pub guard_band: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            tile_size: 16,
            alpha_cutoff: 1.0 / 255.0,
            min_transmittance: 1e-4,
            dilation: 0.3,
            guard_band: 0.3,
        }
    }
}

/// One projected Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatRecord {
    /// Pixel coordinates of the projected center.
    pub mean: [f64; 2],
    /// Dilated screen covariance `[xx, xy, yy]`.
    pub cov: [f64; 3],
    /// Inverse of `cov`, `[xx, xy, yy]`.
    pub conic: [f64; 3],
    /// Camera-space z.
    pub depth: f64,
    pub color: [f64; 3],
    pub opacity: f64,
    /// Index into the projected set.
    pub source: usize,
}

impl SplatRecord {
    pub fn is_finite(&self) -> bool {
        self.mean
            .iter()
            .chain(&self.cov)
            .chain(&self.conic)
            .chain(&self.color)
            .all(|v| v.is_finite())
            && self.depth.is_finite()
            && self.opacity.is_finite()
    }
}

/// Records binned to one screen tile, in global depth order.
#[derive(Debug, Clone, PartialEq)]
pub struct TileBin {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    /// Positions in [`RenderTrace::records`].
    pub list: Vec<u32>,
}

/// Everything the backward pass needs to replay compositing.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderTrace {
    /// Records sorted by `(depth, source)`.
    pub records: Vec<SplatRecord>,
    pub bins: Vec<TileBin>,
    pub background: [f64; 3],
    pub settings: RenderSettings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    /// `H x W x 3`.
    pub rgb: Image,
    /// Accumulated opacity `1 - T_final`, `H x W x 1`.
    pub alpha: Image,
    pub trace: RenderTrace,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.rgb.width()
    }

    pub fn height(&self) -> usize {
        self.rgb.height()
    }
}

/// Activates, projects and rasterizes a raw set with default settings.
pub fn render<T: Scalar>(
    set: &GaussianSet<T>,
    camera: &Camera,
    background: [f64; 3],
) -> Result<(ActivatedGaussianSet, RenderOutput)> {
    let activated = activate(set)?;
    let out = render_posed(&activated, camera, background, &RenderSettings::default())?;
    Ok((activated, out))
}

/// Projects and rasterizes an already-posed set.
pub fn render_posed(
    posed: &ActivatedGaussianSet,
    camera: &Camera,
    background: [f64; 3],
    settings: &RenderSettings,
) -> Result<RenderOutput> {
    let records = project_with(posed, camera, settings)?;
    rasterize_with(
        records,
        camera.width as usize,
        camera.height as usize,
        background,
        settings,
    )
}

/// Gradients of a scalar loss with respect to the raw parameters of `raw`,
/// given the loss gradients on the rendered images.
pub fn render_backward<T: Scalar>(
    raw: &GaussianSet<T>,
    activated: &ActivatedGaussianSet,
    camera: &Camera,
    output: &RenderOutput,
    d_rgb: &Image,
    d_alpha: &Image,
) -> Result<GradientSet> {
    let g = rasterize_backward(output, activated, camera, d_rgb, d_alpha)?;
    activation_backward(raw, activated, &g)
}
