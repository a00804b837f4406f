use rayon::prelude::*;

use super::{RenderOutput, RenderSettings, RenderTrace, SplatRecord, TileBin};
use crate::error::{Error, Result};
use crate::image::Image;

/// Pixel centers sit at half-integer coordinates.
#[inline]
pub(super) fn pixel_center(x: usize, y: usize) -> (f64, f64) {
    (x as f64 + 0.5, y as f64 + 0.5)
}

/// `(alpha', gaussian falloff, dx, dy)` of a splat at a pixel center.
#[inline]
pub(super) fn splat_alpha(rec: &SplatRecord, px: f64, py: f64) -> (f64, f64, f64, f64) {
    let dx = px - rec.mean[0];
    let dy = py - rec.mean[1];
    let power = -0.5 * (rec.conic[0] * dx * dx + rec.conic[2] * dy * dy) - rec.conic[1] * dx * dy;
    let falloff = power.min(0.0).exp();
    (rec.opacity * falloff, falloff, dx, dy)
}

/// Front-to-back compositing of one pixel. Returns color and final
/// transmittance.
#[inline]
fn shade<'a>(
    candidates: impl Iterator<Item = &'a SplatRecord>,
    px: f64,
    py: f64,
    background: &[f64; 3],
    settings: &RenderSettings,
) -> ([f64; 3], f64) {
    let mut color = [0.0; 3];
    let mut t = 1.0;
    for rec in candidates {
        let (alpha, ..) = splat_alpha(rec, px, py);
        if alpha < settings.alpha_cutoff {
            continue;
        }
        for c in 0..3 {
            color[c] += rec.color[c] * alpha * t;
        }
        t *= 1.0 - alpha;
        if t < settings.min_transmittance {
            break;
        }
    }
    for c in 0..3 {
        color[c] += t * background[c];
    }
    (color, t)
}

fn sort_records(mut records: Vec<SplatRecord>) -> Result<Vec<SplatRecord>> {
    if let Some(r) = records.iter().find(|r| !r.is_finite()) {
        return Err(Error::NonFiniteRecord {
            source_index: r.source,
        });
    }
    records.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.source.cmp(&b.source)));
    Ok(records)
}

/// Inclusive pixel range whose centers can see `rec` above the alpha cutoff,
/// or `None` if the splat never reaches the cutoff.
fn pixel_extent(
    rec: &SplatRecord,
    width: usize,
    height: usize,
    cutoff: f64,
) -> Option<(usize, usize, usize, usize)> {
    if rec.opacity < cutoff {
        return None;
    }
    // alpha' >= cutoff  <=>  d^T conic d <= 2 ln(opacity / cutoff); that
    // ellipse spans sqrt(k2 * cov_xx) horizontally and sqrt(k2 * cov_yy)
    // vertically. One pixel of slack absorbs rounding.
    let k2 = 2.0 * (rec.opacity / cutoff).ln();
    let ex = (k2 * rec.cov[0]).sqrt() + 1.0;
    let ey = (k2 * rec.cov[2]).sqrt() + 1.0;
    let lo_x = (rec.mean[0] - ex - 0.5).ceil().max(0.0);
    let hi_x = (rec.mean[0] + ex - 0.5).floor().min(width as f64 - 1.0);
    let lo_y = (rec.mean[1] - ey - 0.5).ceil().max(0.0);
    let hi_y = (rec.mean[1] + ey - 0.5).floor().min(height as f64 - 1.0);
    if lo_x > hi_x || lo_y > hi_y {
        return None;
    }
    Some((lo_x as usize, hi_x as usize, lo_y as usize, hi_y as usize))
}

fn bin_records(
    records: &[SplatRecord],
    width: usize,
    height: usize,
    settings: &RenderSettings,
) -> Vec<TileBin> {
    let ts = settings.tile_size.max(1);
    let tiles_x = width.div_ceil(ts);
    let tiles_y = height.div_ceil(ts);
    let mut bins: Vec<TileBin> = (0..tiles_x * tiles_y)
        .map(|t| {
            let (tx, ty) = (t % tiles_x, t / tiles_x);
            TileBin {
                x0: tx * ts,
                y0: ty * ts,
                x1: ((tx + 1) * ts).min(width),
                y1: ((ty + 1) * ts).min(height),
                list: Vec::new(),
            }
        })
        .collect();
    for (pos, rec) in records.iter().enumerate() {
        let Some((x0, x1, y0, y1)) = pixel_extent(rec, width, height, settings.alpha_cutoff) else {
            continue;
        };
        for ty in y0 / ts..=y1 / ts {
            for tx in x0 / ts..=x1 / ts {
                bins[ty * tiles_x + tx].list.push(pos as u32);
            }
        }
    }
    bins
}

fn composite(
    records: &[SplatRecord],
    bins: &[TileBin],
    width: usize,
    height: usize,
    background: [f64; 3],
    settings: &RenderSettings,
) -> (Image, Image) {
    let shaded: Vec<Vec<([f64; 3], f64)>> = bins
        .par_iter()
        .map(|bin| {
            let mut out = Vec::with_capacity((bin.x1 - bin.x0) * (bin.y1 - bin.y0));
            for y in bin.y0..bin.y1 {
                for x in bin.x0..bin.x1 {
                    let (px, py) = pixel_center(x, y);
                    let candidates = bin.list.iter().map(|p| &records[*p as usize]);
                    out.push(shade(candidates, px, py, &background, settings));
                }
            }
            out
        })
        .collect();
    let mut rgb = Image::new(width, height, 3);
    let mut alpha = Image::new(width, height, 1);
    for (bin, pixels) in bins.iter().zip(shaded) {
        let mut it = pixels.into_iter();
        for y in bin.y0..bin.y1 {
            for x in bin.x0..bin.x1 {
                let (c, t) = it.next().expect("one shaded value per pixel");
                for ch in 0..3 {
                    rgb.set(x, y, ch, c[ch]);
                }
                alpha.set(x, y, 0, 1.0 - t);
            }
        }
    }
    (rgb, alpha)
}

/// Tile-based rasterization with default settings.
pub fn rasterize(
    records: Vec<SplatRecord>,
    width: usize,
    height: usize,
    background: [f64; 3],
) -> Result<RenderOutput> {
    rasterize_with(
        records,
        width,
        height,
        background,
        &RenderSettings::default(),
    )
}

/// Tile-based rasterization: global depth sort, per-tile candidate lists,
/// per-pixel front-to-back compositing.
pub fn rasterize_with(
    records: Vec<SplatRecord>,
    width: usize,
    height: usize,
    background: [f64; 3],
    settings: &RenderSettings,
) -> Result<RenderOutput> {
    let records = sort_records(records)?;
    let bins = bin_records(&records, width, height, settings);
    let (rgb, alpha) = composite(&records, &bins, width, height, background, settings);
    Ok(RenderOutput {
        rgb,
        alpha,
        trace: RenderTrace {
            records,
            bins,
            background,
            settings: *settings,
        },
    })
}

/// Brute-force oracle: every pixel walks every depth-sorted record.
pub fn rasterize_reference(
    records: Vec<SplatRecord>,
    width: usize,
    height: usize,
    background: [f64; 3],
) -> Result<RenderOutput> {
    rasterize_reference_with(
        records,
        width,
        height,
        background,
        &RenderSettings::default(),
    )
}

pub fn rasterize_reference_with(
    records: Vec<SplatRecord>,
    width: usize,
    height: usize,
    background: [f64; 3],
    settings: &RenderSettings,
) -> Result<RenderOutput> {
    let records = sort_records(records)?;
    let mut rgb = Image::new(width, height, 3);
    let mut alpha = Image::new(width, height, 1);
    for y in 0..height {
        for x in 0..width {
            let (px, py) = pixel_center(x, y);
            let (c, t) = shade(records.iter(), px, py, &background, settings);
            for ch in 0..3 {
                rgb.set(x, y, ch, c[ch]);
            }
            alpha.set(x, y, 0, 1.0 - t);
        }
    }
    let bins = vec![TileBin {
        x0: 0,
        y0: 0,
        x1: width,
        y1: height,
        list: (0..records.len() as u32).collect(),
    }];
    Ok(RenderOutput {
        rgb,
        alpha,
        trace: RenderTrace {
            records,
            bins,
            background,
            settings: *settings,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(
        mean: [f64; 2],
        var: f64,
        opacity: f64,
        color: [f64; 3],
        depth: f64,
        source: usize,
    ) -> SplatRecord {
        SplatRecord {
            mean,
            cov: [var, 0.0, var],
            conic: [1.0 / var, 0.0, 1.0 / var],
            depth,
            color,
            opacity,
            source,
        }
    }

    #[test]
    fn empty_scene_is_background() {
        let bg = [0.2, 0.4, 0.6];
        let out = rasterize(Vec::new(), 20, 10, bg).unwrap();
        for y in 0..10 {
            for x in 0..20 {
                for c in 0..3 {
                    assert_eq!(out.rgb.get(x, y, c), bg[c]);
                }
                assert_eq!(out.alpha.get(x, y, 0), 0.0);
            }
        }
    }

    #[test]
    fn opaque_splat_saturates_alpha() {
        let r = rec([4.5, 4.5], 0.01, 1.0 - 1e-9, [1.0, 0.0, 0.0], 1.0, 0);
        let out = rasterize(vec![r], 9, 9, [0.0; 3]).unwrap();
        assert!(out.alpha.get(4, 4, 0) > 1.0 - 1e-6);
        assert!((out.rgb.get(4, 4, 0) - 1.0).abs() < 1e-6);
        assert_eq!(out.alpha.get(0, 0, 0), 0.0);
    }

    #[test]
    fn tile_edge_splat_matches_reference() {
        let records = vec![
            rec([16.0, 16.0], 9.0, 0.8, [0.9, 0.2, 0.1], 2.0, 0),
            rec([16.0, 8.0], 4.0, 0.6, [0.1, 0.7, 0.3], 1.0, 1),
            rec([32.0, 32.0], 30.0, 0.99, [0.2, 0.2, 0.9], 3.0, 2),
        ];
        let a = rasterize(records.clone(), 48, 40, [0.0; 3]).unwrap();
        let b = rasterize_reference(records, 48, 40, [0.0; 3]).unwrap();
        assert_eq!(a.rgb, b.rgb);
        assert_eq!(a.alpha, b.alpha);
    }

    #[test]
    fn non_finite_record_is_rejected() {
        let mut r = rec([1.0, 1.0], 1.0, 0.5, [0.5; 3], 1.0, 7);
        r.mean[0] = f64::NAN;
        assert!(matches!(
            rasterize(vec![r], 4, 4, [0.0; 3]),
            Err(Error::NonFiniteRecord { source_index: 7 })
        ));
    }

    #[test]
    fn depth_ties_break_by_source() {
        let a = rec([2.0, 2.0], 2.0, 0.7, [1.0, 0.0, 0.0], 1.0, 1);
        let b = rec([2.0, 2.0], 2.0, 0.7, [0.0, 1.0, 0.0], 1.0, 0);
        let one = rasterize(vec![a, b], 4, 4, [0.0; 3]).unwrap();
        let two = rasterize(vec![b, a], 4, 4, [0.0; 3]).unwrap();
        assert_eq!(one.rgb, two.rgb);
        // source 0 (green) is in front
        assert!(one.rgb.get(1, 1, 1) > one.rgb.get(1, 1, 0));
    }
}
