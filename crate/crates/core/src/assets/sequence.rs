//! Image files and on-disk frame sequences.
//!
//! A sequence directory holds `frames.json`, `images/NNNNN.{png,ppm}` and
//! `masks/NNNNN.{png,pgm}`, where `NNNNN` is the zero-padded frame index.

use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, RgbImage};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::frames::FrameParamsFile;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::VideoSequence;
use crate::trainer::FrameData;

pub const FRAMES_FILE: &str = "frames.json";
pub const IMAGES_DIR: &str = "images";
pub const MASKS_DIR: &str = "masks";

const IMAGE_EXTENSIONS: [&str; 2] = ["png", "ppm"];
const MASK_EXTENSIONS: [&str; 2] = ["png", "pgm"];

fn image_error(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let reader = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|e| image_error(path, e))
}

fn is_wide(img: &DynamicImage) -> bool {
    !matches!(
        img,
        DynamicImage::ImageLuma8(_)
            | DynamicImage::ImageLumaA8(_)
            | DynamicImage::ImageRgb8(_)
            | DynamicImage::ImageRgba8(_)
    )
}

/// Reads an RGB image with values in `[0, 1]`. 8-bit value `v` maps to
/// `v / 255` exactly; 16-bit files keep their precision.
pub fn read_rgb(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if is_wide(&img) {
        let data = img
            .to_rgb16()
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 65535.0)
            .collect();
        Image::from_vec(w, h, 3, data)
    } else {
        Image::from_u8(w, h, 3, img.to_rgb8().as_raw())
    }
}

/// Reads a single-channel image with values in `[0, 1]`.
pub fn read_gray(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if is_wide(&img) {
        let data = img
            .to_luma16()
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 65535.0)
            .collect();
        Image::from_vec(w, h, 1, data)
    } else {
        Image::from_u8(w, h, 1, img.to_luma8().as_raw())
    }
}

/// Reads a mask and binarizes it: values at or above 0.5 become 1.
pub fn read_mask(path: impl AsRef<Path>) -> Result<Image> {
    let mut m = read_gray(path)?;
    binarize(&mut m);
    Ok(m)
}

pub fn binarize(mask: &mut Image) {
    for v in mask.data_mut() {
        *v = if *v >= 0.5 { 1.0 } else { 0.0 };
    }
}

/// Writes a 1- or 3-channel image as 8-bit PNG.
pub fn write_png(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = (img.width() as u32, img.height() as u32);
    let bytes = img.to_u8();
    let result = match img.channels() {
        1 => GrayImage::from_raw(w, h, bytes)
            .expect("buffer matches size")
            .save(path),
        3 => RgbImage::from_raw(w, h, bytes)
            .expect("buffer matches size")
            .save(path),
        c => return Err(Error::dims("PNG channel count (1 or 3)", 3, c)),
    };
    result.map_err(|e| image_error(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn frame_stem(index: u32) -> String {
    format!("{index:05}")
}

fn find_frame_file(
    dir: &Path,
    index: u32,
    extensions: &[&str],
    kind: &'static str,
) -> Result<PathBuf> {
    let stem = frame_stem(index);
    for ext in extensions {
        let p = dir.join(format!("{stem}.{ext}"));
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::MissingFrameFile {
        frame: index,
        kind,
        path: dir.join(format!("{stem}.{}", extensions[0])),
    })
}

/// Target image and head mask of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameImagePair {
    pub index: u32,
    pub image: Image,
    pub mask: Image,
}

/// A loaded, validated sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub params: FrameParamsFile,
    pub pairs: Vec<FrameImagePair>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Training records, one per frame, in index order.
    pub fn frame_data(&self) -> Vec<FrameData> {
        self.params
            .frames
            .iter()
            .zip(&self.pairs)
            .map(|(r, p)| FrameData {
                index: r.index,
                psi: r.psi(),
                pose: r.pose(),
                camera: r.camera(),
                target: p.image.clone(),
                mask: p.mask.clone(),
            })
            .collect()
    }
}

/// Reads and validates `frames.json` from a sequence directory.
pub fn load_frame_params(dir: impl AsRef<Path>) -> Result<FrameParamsFile> {
    let params: FrameParamsFile = read_json(dir.as_ref().join(FRAMES_FILE))?;
    params.validate()?;
    Ok(params)
}

/// Loads a sequence directory. Frames are decoded in parallel; any missing
/// or inconsistent file fails the whole load.
pub fn load_sequence(dir: impl AsRef<Path>) -> Result<Sequence> {
    let dir = dir.as_ref();
    let params = load_frame_params(dir)?;
    let images_dir = dir.join(IMAGES_DIR);
    let masks_dir = dir.join(MASKS_DIR);

    // Resolve every path first so a missing file is reported before any
    // decoding work, naming the lowest affected frame.
    let paths = params
        .frames
        .iter()
        .map(|r| {
            Ok((
                find_frame_file(&images_dir, r.index, &IMAGE_EXTENSIONS, "image")?,
                find_frame_file(&masks_dir, r.index, &MASK_EXTENSIONS, "mask")?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let pairs = params
        .frames
        .par_iter()
        .zip(paths.par_iter())
        .map(|(r, (ip, mp))| {
            let image = read_rgb(ip)?;
            let mask = read_mask(mp)?;
            let (w, h) = (r.camera.width as usize, r.camera.height as usize);
            for (what, img) in [("image", &image), ("mask", &mask)] {
                if img.width() != w || img.height() != h {
                    return Err(Error::InvalidSequence(format!(
                        "frame {}: {what} is {}x{}, camera declares {w}x{h}",
                        r.index,
                        img.width(),
                        img.height()
                    )));
                }
            }
            Ok(FrameImagePair {
                index: r.index,
                image,
                mask,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    if let Some(first) = pairs.first() {
        let (w, h) = (first.image.width(), first.image.height());
        if let Some(p) = pairs
            .iter()
            .find(|p| p.image.width() != w || p.image.height() != h)
        {
            return Err(Error::InvalidSequence(format!(
                "frame {} is {}x{}, frame {} is {w}x{h}",
                p.index,
                p.image.width(),
                p.image.height(),
                first.index
            )));
        }
    }
    Ok(Sequence { params, pairs })
}

/// Writes a sequence directory readable by [`load_sequence`].
pub fn write_sequence(
    dir: impl AsRef<Path>,
    params: &FrameParamsFile,
    images: &[Image],
    masks: &[Image],
) -> Result<()> {
    let dir = dir.as_ref();
    params.validate()?;
    for (what, n) in [("images", images.len()), ("masks", masks.len())] {
        if n != params.frames.len() {
            return Err(Error::dims(
                format!("sequence {what}"),
                params.frames.len(),
                n,
            ));
        }
    }
    for sub in [IMAGES_DIR, MASKS_DIR] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    write_json(dir.join(FRAMES_FILE), params)?;
    for ((r, img), mask) in params.frames.iter().zip(images).zip(masks) {
        let stem = frame_stem(r.index);
        write_png(dir.join(IMAGES_DIR).join(format!("{stem}.png")), img)?;
        write_png(dir.join(MASKS_DIR).join(format!("{stem}.png")), mask)?;
    }
    Ok(())
}

/// Image files (`png`, `ppm`, `pgm`) in a directory, sorted by file name.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = p
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if p.is_file() && matches!(ext.as_deref(), Some("png" | "ppm" | "pgm")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Loads every image in a directory, in file-name order, as one clip.
pub fn load_video_dir(dir: impl AsRef<Path>) -> Result<VideoSequence> {
    let frames = list_images(dir)?
        .par_iter()
        .map(read_rgb)
        .collect::<Result<Vec<_>>>()?;
    VideoSequence::new(frames)
}
