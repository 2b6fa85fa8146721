//! Pixel-level primitives: rasters, color conversion, chroma keying, morphology,
//! geometric resampling and photometric jitter.

mod color;
mod geometry;
pub mod io;
mod jitter;
mod morph;

pub use color::{chroma_key, hsv_to_rgb, rgb_to_hsv, HsvThresholds};
pub use geometry::{crop_resize, resize, resize_mask_nearest, rotate, sample_bilinear, CropBox};
pub use jitter::{apply_jitter, chromatic_jitter, JitterDraw, JitterParams};
pub use morph::{cleanup_mask, morphology, morphology_with_border, Border, MorphOp};

use crate::error::{Error, Result};

/// 8-bit sRGB raster, row-major interleaved RGB.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageU8 {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl ImageU8 {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimensions(format!("empty image {height}x{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Dimensions(format!(
                "rgb buffer of {} bytes for {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        assert!(height > 0 && width > 0);
        let data = rgb.iter().copied().cycle().take(height * width * 3).collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Exact `v / 255` conversion.
    pub fn to_f32(&self) -> ImageF32 {
        ImageF32 {
            height: self.height,
            width: self.width,
            channels: 3,
            data: self.data.iter().map(|&v| v as f32 / 255.0).collect(),
        }
    }
}

/// Float raster with `channels` interleaved channels, nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageF32 {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageF32 {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Dimensions(format!(
                "empty image {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Dimensions(format!(
                "buffer of {} floats for {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::new(height, width, channels, vec![0.0; height * width * channels])
            .expect("non-empty dimensions")
    }

    pub fn filled(height: usize, width: usize, value: &[f32]) -> Self {
        let data = value
            .iter()
            .copied()
            .cycle()
            .take(height * width * value.len())
            .collect();
        Self::new(height, width, value.len(), data).expect("non-empty dimensions")
    }

    /// Builds an image by evaluating `f(y, x)` for every pixel.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize) -> Vec<f32>,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                let px = f(y, x);
                debug_assert_eq!(px.len(), channels);
                data.extend_from_slice(&px);
            }
        }
        Self::new(height, width, channels, data).expect("non-empty dimensions")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn rgb(&self, y: usize, x: usize) -> [f32; 3] {
        let p = self.pixel(y, x);
        [p[0], p[1], p[2]]
    }

    pub fn same_size(&self, height: usize, width: usize) -> bool {
        self.height == height && self.width == width
    }

    /// Quantizes to 8 bits with rounding; values are clamped to `[0, 1]` first.
    pub fn to_u8(&self) -> Result<ImageU8> {
        if self.channels != 3 {
            return Err(Error::Dimensions(format!(
                "expected 3 channels, got {}",
                self.channels
            )));
        }
        let data = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        ImageU8::new(self.height, self.width, data)
    }
}

/// Per-pixel foreground labels: 0 = background, 1 = foreground.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimensions(format!(
                "mask buffer of {} for {height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Data(format!("mask value {v} is not 0 or 1")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }
}
