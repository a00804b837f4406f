//! Windowed structural similarity and its gradient.
//!
//! 11x11 Gaussian window (sigma 1.5), zero-padded "same" filtering,
//! `C1 = 0.01^2`, `C2 = 0.03^2`, evaluated per channel and averaged over
//! every pixel and channel.

use rayon::prelude::*;

use crate::error::Result;
use crate::image::Image;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

/// Normalized 1-D Gaussian taps.
pub fn window() -> [f64; WINDOW] {
    let half = (WINDOW / 2) as f64;
    let mut w = [0.0; WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable zero-padded Gaussian filter of a `w x h` plane. The kernel is
/// symmetric, so this is also its own adjoint.
pub fn blur(plane: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = window();
    let r = (WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sx = x as isize + i as isize - r;
                if sx >= 0 && (sx as usize) < w {
                    acc += kv * plane[y * w + sx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sy = y as isize + i as isize - r;
                if sy >= 0 && (sy as usize) < h {
                    acc += kv * tmp[sy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

struct Stats {
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    e_xx: Vec<f64>,
    e_yy: Vec<f64>,
    e_xy: Vec<f64>,
}

fn stats(x: &[f64], y: &[f64], w: usize, h: usize) -> Stats {
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    Stats {
        mu_x: blur(x, w, h),
        mu_y: blur(y, w, h),
        e_xx: blur(&xx, w, h),
        e_yy: blur(&yy, w, h),
        e_xy: blur(&xy, w, h),
    }
}

/// Local SSIM at each pixel and its partials with respect to
/// `(mu_x, E[x^2], E[xy])`.
#[inline]
fn local(s: &Stats, i: usize) -> (f64, [f64; 3]) {
    let (mx, my) = (s.mu_x[i], s.mu_y[i]);
    let vx = s.e_xx[i] - mx * mx;
    let vy = s.e_yy[i] - my * my;
    let cxy = s.e_xy[i] - mx * my;
    let a1 = 2.0 * mx * my + C1;
    let a2 = 2.0 * cxy + C2;
    let b1 = mx * mx + my * my + C1;
    let b2 = vx + vy + C2;
    let d = b1 * b2;
    let ssim = a1 * a2 / d;
    let d_mu = 2.0 * my * (a2 - a1) / d - 2.0 * mx * ssim * (b2 - b1) / d;
    let d_exx = -ssim / b2;
    let d_exy = 2.0 * a1 / d;
    (ssim, [d_mu, d_exx, d_exy])
}

/// Mean SSIM over all pixels and channels.
pub fn ssim(img: &Image, target: &Image) -> Result<f64> {
    img.check_same_shape(target, "ssim")?;
    let (w, h, c) = (img.width(), img.height(), img.channels());
    if img.is_empty() {
        return Ok(1.0);
    }
    let sums: Vec<f64> = (0..c)
        .into_par_iter()
        .map(|ch| {
            let s = stats(&img.plane(ch), &target.plane(ch), w, h);
            (0..w * h).map(|i| local(&s, i).0).sum()
        })
        .collect();
    Ok(sums.iter().sum::<f64>() / img.len() as f64)
}

/// Mean SSIM and its gradient with respect to `img`.
pub fn ssim_with_grad(img: &Image, target: &Image) -> Result<(f64, Image)> {
    img.check_same_shape(target, "ssim")?;
    let (w, h, c) = (img.width(), img.height(), img.channels());
    if img.is_empty() {
        return Ok((1.0, img.clone()));
    }
    let n = img.len() as f64;
    let per_channel: Vec<(f64, Vec<f64>)> = (0..c)
        .into_par_iter()
        .map(|ch| {
            let x = img.plane(ch);
            let y = target.plane(ch);
            let s = stats(&x, &y, w, h);
            let mut sum = 0.0;
            let mut g_mu = vec![0.0; w * h];
            let mut g_xx = vec![0.0; w * h];
            let mut g_xy = vec![0.0; w * h];
            for i in 0..w * h {
                let (v, [a, b, cc]) = local(&s, i);
                sum += v;
                g_mu[i] = a / n;
                g_xx[i] = b / n;
                g_xy[i] = cc / n;
            }
            let b_mu = blur(&g_mu, w, h);
            let b_xx = blur(&g_xx, w, h);
            let b_xy = blur(&g_xy, w, h);
            let grad = (0..w * h)
                .map(|i| b_mu[i] + 2.0 * x[i] * b_xx[i] + y[i] * b_xy[i])
                .collect();
            (sum, grad)
        })
        .collect();
    let mut grad = Image::new(w, h, c);
    let mut total = 0.0;
    for (ch, (sum, g)) in per_channel.into_iter().enumerate() {
        total += sum;
        for (i, v) in g.into_iter().enumerate() {
            grad.data_mut()[i * c + ch] = v;
        }
    }
    Ok((total / n, grad))
}
