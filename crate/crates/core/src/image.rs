use crate::error::{Error, Result};

/// Interleaved `f64` image, row-major, `channels` values per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::dims(
                "image data",
                width * height * channels,
                data.len(),
            ));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Every pixel set to `color` (one entry per channel).
    pub fn solid(width: usize, height: usize, color: &[f64]) -> Self {
        let data = (0..width * height)
            .flat_map(|_| color.iter().copied())
            .collect();
        Self {
            width,
            height,
            channels: color.len(),
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_same_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                what: format!(
                    "{what}: {}x{}x{} vs {}x{}x{}",
                    self.width,
                    self.height,
                    self.channels,
                    other.width,
                    other.height,
                    other.channels
                ),
                expected: self.len(),
                found: other.len(),
            })
        }
    }

    /// One channel as a contiguous plane.
    pub fn plane(&self, c: usize) -> Vec<f64> {
        self.data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    pub fn scaled(&self, factor: f64) -> Image {
        Image {
            data: self.data.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }

    /// Quantizes to 8 bits per channel with rounding.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(width: usize, height: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::from_vec(
            width,
            height,
            channels,
            bytes.iter().map(|b| *b as f64 / 255.0).collect(),
        )
    }

    /// Copy translated by `(dx, dy)` pixels with edge replication.
    pub fn shifted(&self, dx: i64, dy: i64) -> Image {
        let mut out = Image::new(self.width, self.height, self.channels);
        let (w, h) = (self.width as i64, self.height as i64);
        for y in 0..self.height {
            let sy = (y as i64 - dy).clamp(0, h - 1) as usize;
            for x in 0..self.width {
                let sx = (x as i64 - dx).clamp(0, w - 1) as usize;
                for c in 0..self.channels {
                    out.set(x, y, c, self.get(sx, sy, c));
                }
            }
        }
        out
    }
}
