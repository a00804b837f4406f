//! Image quality (PSNR, SSIM) and video stability (ITF, ISI).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub use crate::ssim::ssim;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

/// `10 log10(1 / MSE)` for images in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(img: &Image, target: &Image) -> Result<f64> {
    img.check_same_shape(target, "psnr")?;
    if img.is_empty() {
        return Ok(PSNR_CAP);
    }
    let mse = img
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / img.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Ordered frames of equal size.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSequence {
    frames: Vec<Image>,
    pub fps: Option<f64>,
}

impl VideoSequence {
    pub fn new(frames: Vec<Image>) -> Result<Self> {
        if let Some(first) = frames.first() {
            for (i, f) in frames.iter().enumerate().skip(1) {
                if !f.same_shape(first) {
                    return Err(Error::InvalidSequence(format!(
                        "frame {i} is {}x{}x{}, frame 0 is {}x{}x{}",
                        f.width(),
                        f.height(),
                        f.channels(),
                        first.width(),
                        first.height(),
                        first.channels()
                    )));
                }
            }
        }
        Ok(Self { frames, fps: None })
    }

    pub fn frames(&self) -> &[Image] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    fn pairwise(&self, f: impl Fn(&Image, &Image) -> Result<f64> + Sync) -> Result<Vec<f64>> {
        if self.frames.len() < 2 {
            return Err(Error::InsufficientFrames {
                needed: 2,
                found: self.frames.len(),
            });
        }
        self.frames
            .par_windows(2)
            .map(|w| f(&w[0], &w[1]))
            .collect()
    }
}

/// PSNR of every adjacent frame pair.
pub fn adjacent_psnr(video: &VideoSequence) -> Result<Vec<f64>> {
    video.pairwise(psnr)
}

/// SSIM of every adjacent frame pair.
pub fn adjacent_ssim(video: &VideoSequence) -> Result<Vec<f64>> {
    video.pairwise(ssim)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Inter-frame transformation fidelity: mean adjacent-frame PSNR.
pub fn itf(video: &VideoSequence) -> Result<f64> {
    Ok(mean(&adjacent_psnr(video)?))
}

/// Inter-frame similarity index: mean adjacent-frame SSIM.
pub fn isi(video: &VideoSequence) -> Result<f64> {
    Ok(mean(&adjacent_ssim(video)?))
}

/// Translates every frame by an independent uniform integer offset in
/// `[-max_shift, max_shift]^2`, replicating edge pixels.
pub fn inject_jitter(video: &VideoSequence, max_shift: u32, seed: u64) -> VideoSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = max_shift as i64;
    let frames = video
        .frames
        .iter()
        .map(|f| {
            let dx = rng.random_range(-m..=m);
            let dy = rng.random_range(-m..=m);
            f.shifted(dx, dy)
        })
        .collect();
    VideoSequence {
        frames,
        fps: video.fps,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub frames: usize,
    pub itf_db: f64,
    pub isi: f64,
    pub pair_psnr_db: Vec<f64>,
    pub pair_ssim: Vec<f64>,
}

impl StabilityReport {
    pub fn compute(video: &VideoSequence) -> Result<Self> {
        let pair_psnr_db = adjacent_psnr(video)?;
        let pair_ssim = adjacent_ssim(video)?;
        Ok(Self {
            frames: video.len(),
            itf_db: mean(&pair_psnr_db),
            isi: mean(&pair_ssim),
            pair_psnr_db,
            pair_ssim,
        })
    }

    pub fn to_text(&self) -> String {
        format!(
            "frames {}\nITF {:.4} dB\nISI {:.6}\n",
            self.frames, self.itf_db, self.isi
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub frames: usize,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub psnr_db: Vec<f64>,
    pub ssim: Vec<f64>,
}

impl QualityReport {
    /// Per-frame PSNR and SSIM of `rendered` against `reference`.
    pub fn compute(rendered: &VideoSequence, reference: &VideoSequence) -> Result<Self> {
        if rendered.len() != reference.len() {
            return Err(Error::CountMismatch {
                what: "reference frames",
                declared: rendered.len(),
                actual: reference.len(),
            });
        }
        if rendered.is_empty() {
            return Err(Error::Empty("quality frames"));
        }
        let pairs: Vec<(f64, f64)> = rendered
            .frames
            .par_iter()
            .zip(&reference.frames)
            .map(|(a, b)| Ok((psnr(a, b)?, ssim(a, b)?)))
            .collect::<Result<_>>()?;
        let (psnr_db, ssim): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        Ok(Self {
            frames: rendered.len(),
            mean_psnr_db: mean(&psnr_db),
            mean_ssim: mean(&ssim),
            psnr_db,
            ssim,
        })
    }

    pub fn to_text(&self) -> String {
        format!(
            "frames {}\nPSNR {:.4} dB\nSSIM {:.6}\n",
            self.frames, self.mean_psnr_db, self.mean_ssim
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(v: f64) -> Image {
        Image::filled(8, 8, 3, v)
    }

    #[test]
    fn psnr_hand_cases() {
        assert_eq!(psnr(&constant(0.3), &constant(0.3)).unwrap(), PSNR_CAP);
        assert!((psnr(&constant(0.0), &constant(0.1)).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&constant(0.0), &constant(1.0)).unwrap(), 0.0);
    }

    #[test]
    fn itf_hand_cases() {
        let still = VideoSequence::new(vec![constant(0.4); 3]).unwrap();
        assert_eq!(itf(&still).unwrap(), PSNR_CAP);
        assert!((isi(&still).unwrap() - 1.0).abs() < 1e-12);
        let pair = VideoSequence::new(vec![constant(0.0), constant(0.1)]).unwrap();
        assert!((itf(&pair).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn single_frame_is_rejected() {
        let one = VideoSequence::new(vec![constant(0.0)]).unwrap();
        assert!(matches!(
            itf(&one),
            Err(Error::InsufficientFrames {
                needed: 2,
                found: 1
            })
        ));
    }

    #[test]
    fn mixed_sizes_are_rejected() {
        assert!(VideoSequence::new(vec![constant(0.0), Image::new(4, 4, 3)]).is_err());
    }

    #[test]
    fn zero_shift_is_identity() {
        let v = VideoSequence::new((0..4).map(|i| constant(i as f64 / 4.0)).collect()).unwrap();
        assert_eq!(inject_jitter(&v, 0, 7), v);
    }
}
