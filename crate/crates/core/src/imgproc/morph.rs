use serde::{Deserialize, Serialize};

use super::BinaryMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MorphOp {
    Erode,
    Dilate,
    /// `dilate(erode(m))`
    Open,
    /// `erode(dilate(m))`
    Close,
}

/// How pixels outside the raster are treated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Border {
    /// Outside is background: erosion eats into shapes touching the border.
    Zero,
    /// Outside pixels are ignored, so shapes touching the border are kept intact.
    Replicate,
}

/// Square `(2r+1)x(2r+1)` structuring element, zero border.
pub fn morphology(mask: &BinaryMask, op: MorphOp, radius: usize) -> BinaryMask {
    morphology_with_border(mask, op, radius, Border::Zero)
}

pub fn morphology_with_border(
    mask: &BinaryMask,
    op: MorphOp,
    radius: usize,
    border: Border,
) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    match op {
        MorphOp::Erode => erode(mask, radius, border),
        MorphOp::Dilate => dilate(mask, radius),
        MorphOp::Open => dilate(&erode(mask, radius, border), radius),
        MorphOp::Close => erode(&dilate(mask, radius), radius, border),
    }
}

/// Keying cleanup: open radius 1 removes specks, close radius 2 fills pinholes.
pub fn cleanup_mask(mask: &BinaryMask) -> BinaryMask {
    let opened = morphology_with_border(mask, MorphOp::Open, 1, Border::Replicate);
    morphology_with_border(&opened, MorphOp::Close, 2, Border::Replicate)
}

fn dilate(mask: &BinaryMask, r: usize) -> BinaryMask {
    separable(mask, r, |window, _| window.iter().any(|&v| v == 1))
}

fn erode(mask: &BinaryMask, r: usize, border: Border) -> BinaryMask {
    separable(mask, r, |window, clipped| {
        !(clipped && border == Border::Zero) && window.iter().all(|&v| v == 1)
    })
}

/// Applies a 1-D window reduction along rows, then along columns. The reducer gets
/// the in-bounds window and whether the full window was clipped by the border.
fn separable(mask: &BinaryMask, r: usize, reduce: impl Fn(&[u8], bool) -> bool) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    let src = mask.as_slice();
    let mut rows = vec![0u8; h * w];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            let clipped = x < r || x + r >= w;
            rows[y * w + x] = reduce(&line[lo..=hi], clipped) as u8;
        }
    }
    let mut out = vec![0u8; h * w];
    let mut column = vec![0u8; h];
    for x in 0..w {
        for y in 0..h {
            column[y] = rows[y * w + x];
        }
        for y in 0..h {
            let lo = y.saturating_sub(r);
            let hi = (y + r).min(h - 1);
            let clipped = y < r || y + r >= h;
            out[y * w + x] = reduce(&column[lo..=hi], clipped) as u8;
        }
    }
    BinaryMask::new(h, w, out).expect("binary values")
}
