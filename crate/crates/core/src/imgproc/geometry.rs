use super::{BinaryMask, ImageF32};
use crate::error::{Error, Result};

/// Axis-aligned pixel box: top-left corner `(x, y)`, size `w x h`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl CropBox {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            x: 0,
            y: 0,
            w: width,
            h: height,
        }
    }
}

/// Bilinear sample at continuous pixel coordinates, clamped to the inclusive region
/// `[y0, y1] x [x0, x1]`. Writes one value per channel into `out`.
fn sample_in(
    img: &ImageF32,
    fy: f64,
    fx: f64,
    (y0, y1, x0, x1): (usize, usize, usize, usize),
    out: &mut [f32],
) {
    let fy = fy.clamp(y0 as f64, y1 as f64);
    let fx = fx.clamp(x0 as f64, x1 as f64);
    let ya = fy.floor() as usize;
    let xa = fx.floor() as usize;
    let yb = (ya + 1).min(y1);
    let xb = (xa + 1).min(x1);
    let ty = fy - ya as f64;
    let tx = fx - xa as f64;
    let (p00, p01, p10, p11) = (
        img.pixel(ya, xa),
        img.pixel(ya, xb),
        img.pixel(yb, xa),
        img.pixel(yb, xb),
    );
    for c in 0..img.channels() {
        let top = p00[c] as f64 * (1.0 - tx) + p01[c] as f64 * tx;
        let bottom = p10[c] as f64 * (1.0 - tx) + p11[c] as f64 * tx;
        out[c] = (top * (1.0 - ty) + bottom * ty) as f32;
    }
}

/// Bilinear sample clamped to the image; `out.len()` must equal the channel count.
pub fn sample_bilinear(img: &ImageF32, fy: f64, fx: f64, out: &mut [f32]) {
    sample_in(img, fy, fx, (0, img.height() - 1, 0, img.width() - 1), out);
}

/// Resamples `bx` to `out_h x out_w`: the image bilinearly (half-pixel centers, clamped
/// to the box) and the mask, if any, nearest-neighbor over the same box.
pub fn crop_resize(
    image: &ImageF32,
    mask: Option<&BinaryMask>,
    bx: CropBox,
    out_h: usize,
    out_w: usize,
) -> Result<(ImageF32, Option<BinaryMask>)> {
    if bx.w < 2 || bx.h < 2 || bx.x + bx.w > image.width() || bx.y + bx.h > image.height() {
        return Err(Error::InvalidArgument(format!(
            "crop box {bx:?} invalid for {}x{} image",
            image.height(),
            image.width()
        )));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("empty output size".into()));
    }
    if let Some(m) = mask {
        if m.height() != image.height() || m.width() != image.width() {
            return Err(Error::Dimensions(format!(
                "mask {}x{} vs image {}x{}",
                m.height(),
                m.width(),
                image.height(),
                image.width()
            )));
        }
    }
    let sy = bx.h as f64 / out_h as f64;
    let sx = bx.w as f64 / out_w as f64;
    let region = (bx.y, bx.y + bx.h - 1, bx.x, bx.x + bx.w - 1);
    let mut out = ImageF32::zeros(out_h, out_w, image.channels());
    for i in 0..out_h {
        let fy = bx.y as f64 + (i as f64 + 0.5) * sy - 0.5;
        for j in 0..out_w {
            let fx = bx.x as f64 + (j as f64 + 0.5) * sx - 0.5;
            sample_in(image, fy, fx, region, out.pixel_mut(i, j));
        }
    }
    let mask = mask.map(|m| {
        BinaryMask::from_fn(out_h, out_w, |i, j| {
            let y = (bx.y + ((i as f64 + 0.5) * sy) as usize).min(bx.y + bx.h - 1);
            let x = (bx.x + ((j as f64 + 0.5) * sx) as usize).min(bx.x + bx.w - 1);
            m.get(y, x) == 1
        })
    });
    Ok((out, mask))
}

/// Bilinear resize of the whole image.
pub fn resize(image: &ImageF32, out_h: usize, out_w: usize) -> Result<ImageF32> {
    if image.height() == out_h && image.width() == out_w {
        return Ok(image.clone());
    }
    if image.height() < 2 || image.width() < 2 {
        return Err(Error::Dimensions("image too small to resample".into()));
    }
    let full = CropBox::full(image.height(), image.width());
    Ok(crop_resize(image, None, full, out_h, out_w)?.0)
}

pub fn resize_mask_nearest(mask: &BinaryMask, out_h: usize, out_w: usize) -> BinaryMask {
    let sy = mask.height() as f64 / out_h as f64;
    let sx = mask.width() as f64 / out_w as f64;
    BinaryMask::from_fn(out_h, out_w, |i, j| {
        let y = (((i as f64 + 0.5) * sy) as usize).min(mask.height() - 1);
        let x = (((j as f64 + 0.5) * sx) as usize).min(mask.width() - 1);
        mask.get(y, x) == 1
    })
}

/// Rotates clockwise by 45, 90 or 180 degrees.
///
/// 90 and 180 are exact index permutations. 45 requires a square input: the image is
/// rotated about its center with bilinear sampling, then the largest inscribed
/// axis-aligned square (side `floor(W / sqrt 2)`) is cropped and resized back to `W x W`,
/// so no fill color ever enters the frame.
pub fn rotate(image: &ImageF32, degrees: u32) -> Result<ImageF32> {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    match degrees {
        90 => {
            let mut out = ImageF32::zeros(w, h, c);
            for y in 0..w {
                for x in 0..h {
                    out.pixel_mut(y, x).copy_from_slice(image.pixel(h - 1 - x, y));
                }
            }
            Ok(out)
        }
        180 => {
            let mut out = ImageF32::zeros(h, w, c);
            for y in 0..h {
                for x in 0..w {
                    out.pixel_mut(y, x)
                        .copy_from_slice(image.pixel(h - 1 - y, w - 1 - x));
                }
            }
            Ok(out)
        }
        45 => {
            if h != w {
                return Err(Error::InvalidArgument(format!(
                    "45 degree rotation needs a square image, got {h}x{w}"
                )));
            }
            if w < 3 {
                return Err(Error::Dimensions("image too small for 45 degree rotation".into()));
            }
            let center = (w as f64 - 1.0) / 2.0;
            let (sin, cos) = std::f64::consts::FRAC_PI_4.sin_cos();
            let mut rotated = ImageF32::zeros(h, w, c);
            for y in 0..h {
                for x in 0..w {
                    // inverse map of a clockwise rotation in y-down coordinates
                    let (dy, dx) = (y as f64 - center, x as f64 - center);
                    let sx = cos * dx + sin * dy + center;
                    let sy = -sin * dx + cos * dy + center;
                    sample_bilinear(image, sy, sx, rotated.pixel_mut(y, x));
                }
            }
            let side = (w as f64 / std::f64::consts::SQRT_2).floor() as usize;
            let offset = (w - side) / 2;
            let bx = CropBox {
                x: offset,
                y: offset,
                w: side,
                h: side,
            };
            Ok(crop_resize(&rotated, None, bx, w, w)?.0)
        }
        other => Err(Error::InvalidArgument(format!(
            "rotation of {other} degrees not supported (45, 90, 180)"
        ))),
    }
}
