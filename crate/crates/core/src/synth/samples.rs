//! Loading manifest records into memory as image/mask pairs.

use std::path::Path;

use rayon::prelude::*;

use super::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::imgproc::{io, resize, resize_mask_nearest, BinaryMask, ImageF32};

/// An RGB image in `[0, 1]` with its human mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: ImageF32,
    pub mask: BinaryMask,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: ImageF32, mask: BinaryMask) -> Result<Self> {
        let id = id.into();
        if image.channels() != 3 || !image.same_size(mask.height(), mask.width()) {
            return Err(Error::Dimensions(format!(
                "sample {id}: image {}x{}x{} vs mask {}x{}",
                image.height(),
                image.width(),
                image.channels(),
                mask.height(),
                mask.width()
            )));
        }
        Ok(Self { id, image, mask })
    }

    /// Whole-frame resize to `size x size` (bilinear image, nearest-neighbor mask).
    pub fn resized(&self, size: usize) -> Result<Self> {
        Ok(Self {
            id: self.id.clone(),
            image: resize(&self.image, size, size)?,
            mask: if self.mask.height() == size && self.mask.width() == size {
                self.mask.clone()
            } else {
                resize_mask_nearest(&self.mask, size, size)
            },
        })
    }
}

/// Reads every record of `split` (paths relative to `base`), in manifest order,
/// optionally resizing each to `size x size`.
pub fn load_samples(
    manifest: &DatasetManifest,
    base: &Path,
    split: Split,
    size: Option<usize>,
) -> Result<Vec<Sample>> {
    manifest
        .split(split)
        .par_iter()
        .map(|r| {
            let image = io::read_rgb(&base.join(&r.image_path))?.to_f32();
            let mask = io::read_mask(&base.join(&r.mask_path))?;
            let s = Sample::new(r.id.clone(), image, mask)?;
            match size {
                Some(n) => s.resized(n),
                None => Ok(s),
            }
        })
        .collect()
}

/// Human and background pixel counts over the masks of `split`.
pub fn count_pixels(manifest: &DatasetManifest, base: &Path, split: Split) -> Result<(u64, u64)> {
    manifest
        .split(split)
        .par_iter()
        .map(|r| {
            let m = io::read_mask(&base.join(&r.mask_path))?;
            let fg = m.count_ones() as u64;
            Ok(((m.as_slice().len() as u64) - fg, fg))
        })
        .try_reduce(|| (0, 0), |a, b| Ok((a.0 + b.0, a.1 + b.1)))
}
