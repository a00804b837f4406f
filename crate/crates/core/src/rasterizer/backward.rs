use rayon::prelude::*;

use super::forward::{pixel_center, splat_alpha};
use super::{project_backward, RenderOutput};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{ActivatedGradients, Camera, PosedGaussianSet};

/// Loss gradients with respect to each sorted splat record.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SplatGradients {
    pub mean: Vec<[f64; 2]>,
    pub conic: Vec<[f64; 3]>,
    pub opacity: Vec<f64>,
    pub color: Vec<[f64; 3]>,
}

impl SplatGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            mean: vec![[0.0; 2]; n],
            conic: vec![[0.0; 3]; n],
            opacity: vec![0.0; n],
            color: vec![[0.0; 3]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.opacity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity.is_empty()
    }
}

#[derive(Clone, Copy, Default)]
struct Partial {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
}

struct Contribution {
    slot: usize,
    alpha: f64,
    falloff: f64,
    transmittance: f64,
    dx: f64,
    dy: f64,
}

/// Adjoint of compositing: gradients of the loss with respect to every
/// record in `output.trace.records`, given `dL/d rgb` and `dL/d alpha`.
pub fn splat_backward(
    output: &RenderOutput,
    d_rgb: &Image,
    d_alpha: &Image,
) -> Result<SplatGradients> {
    let (w, h) = (output.width(), output.height());
    if d_rgb.width() != w || d_rgb.height() != h || d_rgb.channels() != 3 {
        return Err(Error::TraceMismatch(format!(
            "rgb gradient is {}x{}x{}, render is {w}x{h}x3",
            d_rgb.width(),
            d_rgb.height(),
            d_rgb.channels()
        )));
    }
    if d_alpha.width() != w || d_alpha.height() != h || d_alpha.channels() != 1 {
        return Err(Error::TraceMismatch(format!(
            "alpha gradient is {}x{}x{}, render is {w}x{h}x1",
            d_alpha.width(),
            d_alpha.height(),
            d_alpha.channels()
        )));
    }
    let trace = &output.trace;
    let settings = &trace.settings;
    let records = &trace.records;
    let bg = trace.background;

    let partials: Vec<Vec<Partial>> = trace
        .bins
        .par_iter()
        .map(|bin| {
            let mut acc = vec![Partial::default(); bin.list.len()];
            let mut contribs: Vec<Contribution> = Vec::new();
            for y in bin.y0..bin.y1 {
                for x in bin.x0..bin.x1 {
                    let g_rgb = [d_rgb.get(x, y, 0), d_rgb.get(x, y, 1), d_rgb.get(x, y, 2)];
                    let g_alpha = d_alpha.get(x, y, 0);
                    if g_rgb == [0.0; 3] && g_alpha == 0.0 {
                        continue;
                    }
                    let (px, py) = pixel_center(x, y);

                    // Replay the forward pass to recover who contributed.
                    contribs.clear();
                    let mut t = 1.0;
                    for (slot, pos) in bin.list.iter().enumerate() {
                        let rec = &records[*pos as usize];
                        let (alpha, falloff, dx, dy) = splat_alpha(rec, px, py);
                        if alpha < settings.alpha_cutoff {
                            continue;
                        }
                        contribs.push(Contribution {
                            slot,
                            alpha,
                            falloff,
                            transmittance: t,
                            dx,
                            dy,
                        });
                        t *= 1.0 - alpha;
                        if t < settings.min_transmittance {
                            break;
                        }
                    }

                    // Back to front. `behind` is the color seen through splat i
                    // (normalized by the transmittance after it); `through` is
                    // the transmittance of everything behind it.
                    let mut behind = bg;
                    let mut through = 1.0;
                    for c in contribs.iter().rev() {
                        let rec = &records[bin.list[c.slot] as usize];
                        let p = &mut acc[c.slot];
                        let weight = c.alpha * c.transmittance;
                        let mut d_alpha_i = g_alpha * c.transmittance * through;
                        for ch in 0..3 {
                            p.color[ch] += g_rgb[ch] * weight;
                            d_alpha_i += g_rgb[ch] * c.transmittance * (rec.color[ch] - behind[ch]);
                        }
                        for ch in 0..3 {
                            behind[ch] = c.alpha * rec.color[ch] + (1.0 - c.alpha) * behind[ch];
                        }
                        through *= 1.0 - c.alpha;

                        p.opacity += d_alpha_i * c.falloff;
                        let d_power = d_alpha_i * c.alpha;
                        let [a, b, cc] = rec.conic;
                        p.mean[0] += d_power * (a * c.dx + b * c.dy);
                        p.mean[1] += d_power * (b * c.dx + cc * c.dy);
                        p.conic[0] += d_power * (-0.5 * c.dx * c.dx);
                        p.conic[1] += d_power * (-c.dx * c.dy);
                        p.conic[2] += d_power * (-0.5 * c.dy * c.dy);
                    }
                }
            }
            acc
        })
        .collect();

    // Fixed reduction order: tiles in raster order.
    let mut out = SplatGradients::zeros(records.len());
    for (bin, acc) in trace.bins.iter().zip(partials) {
        for (pos, p) in bin.list.iter().zip(acc) {
            let r = *pos as usize;
            for k in 0..2 {
                out.mean[r][k] += p.mean[k];
            }
            for k in 0..3 {
                out.conic[r][k] += p.conic[k];
                out.color[r][k] += p.color[k];
            }
            out.opacity[r] += p.opacity;
        }
    }
    Ok(out)
}

/// Exact reverse-mode gradients with respect to the posed, activated
/// Gaussians that produced `output`. Culled Gaussians get zero.
pub fn rasterize_backward(
    output: &RenderOutput,
    posed: &PosedGaussianSet,
    camera: &Camera,
    d_rgb: &Image,
    d_alpha: &Image,
) -> Result<ActivatedGradients> {
    let splat = splat_backward(output, d_rgb, d_alpha)?;
    project_backward(
        posed,
        camera,
        &output.trace.settings,
        &output.trace.records,
        &splat,
    )
}
