//! PNG read/write for RGB images, binary masks and alpha mattes.

use std::path::Path;

use image::{GrayImage, RgbImage};

use super::{BinaryMask, ImageU8};
use crate::error::{Error, Result};

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn save_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// Reads any PNG as 8-bit RGB.
pub fn read_rgb(path: &Path) -> Result<ImageU8> {
    let img = open(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    ImageU8::new(h as usize, w as usize, img.into_raw())
}

pub fn write_rgb(path: &Path, image: &ImageU8) -> Result<()> {
    ensure_parent(path)?;
    let buf = RgbImage::from_raw(
        image.width() as u32,
        image.height() as u32,
        image.as_bytes().to_vec(),
    )
    .expect("buffer sized by construction");
    buf.save(path).map_err(save_err(path))
}

/// Reads a single-channel mask; values >= 128 are foreground.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let img = open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| (v >= 128) as u8).collect();
    BinaryMask::new(h as usize, w as usize, data)
}

/// Writes a mask as 0 / 255.
pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    ensure_parent(path)?;
    let data = mask.as_slice().iter().map(|&v| v * 255).collect();
    let buf = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, data)
        .expect("buffer sized by construction");
    buf.save(path).map_err(save_err(path))
}

/// Reads an 8-bit gray image as values `v / 255`; returns `(height, width, values)`.
pub fn read_gray(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let img = open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Ok((h as usize, w as usize, data))
}

/// Writes values in `[0, 1]` as `round(v * 255)`.
pub fn write_gray(path: &Path, height: usize, width: usize, values: &[f32]) -> Result<()> {
    ensure_parent(path)?;
    let data = values
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = GrayImage::from_raw(width as u32, height as u32, data)
        .ok_or_else(|| Error::Dimensions("gray buffer size".into()))?;
    buf.save(path).map_err(save_err(path))
}
