use serde::{Deserialize, Serialize};

use super::{BinaryMask, ImageU8};
use crate::error::{Error, Result};

/// Hexcone RGB -> HSV. Hue in degrees `[0, 360)`, saturation and value in `[0, 1]`.
/// Achromatic pixels get hue 0.
pub fn rgb_to_hsv(rgb: [f32; 3]) -> (f32, f32, f32) {
    let [r, g, b] = rgb.map(f64::from);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let hue = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let sat = if max == 0.0 { 0.0 } else { delta / max };
    // values just below 360 can round up when narrowed
    let hue = hue as f32;
    let hue = if hue >= 360.0 { hue - 360.0 } else { hue };
    (hue, sat as f32, max as f32)
}

/// Inverse of [`rgb_to_hsv`]; hue is taken modulo 360.
pub fn hsv_to_rgb(hue: f32, sat: f32, val: f32) -> [f32; 3] {
    let h = f64::from(hue).rem_euclid(360.0) / 60.0;
    let s = f64::from(sat);
    let v = f64::from(val);
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [(r + m) as f32, (g + m) as f32, (b + m) as f32]
}

/// Backdrop color window. A pixel is backdrop when its hue lies in `[hue_lo, hue_hi]`
/// (wrapping through 0 when `hue_lo > hue_hi`) and it is saturated and bright enough.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HsvThresholds {
    pub hue_lo: f32,
    pub hue_hi: f32,
    pub sat_min: f32,
    pub val_min: f32,
}

impl Default for HsvThresholds {
    fn default() -> Self {
        Self {
            hue_lo: 90.0,
            hue_hi: 150.0,
            sat_min: 0.25,
            val_min: 0.20,
        }
    }
}

impl HsvThresholds {
    pub fn validate(&self) -> Result<()> {
        let in_hue = |h: f32| (0.0..360.0).contains(&h);
        if !in_hue(self.hue_lo) || !in_hue(self.hue_hi) {
            return Err(Error::InvalidArgument(format!(
                "hue window [{}, {}] outside [0, 360)",
                self.hue_lo, self.hue_hi
            )));
        }
        if !(0.0..=1.0).contains(&self.sat_min) || !(0.0..=1.0).contains(&self.val_min) {
            return Err(Error::InvalidArgument(format!(
                "sat_min {} / val_min {} outside [0, 1]",
                self.sat_min, self.val_min
            )));
        }
        Ok(())
    }

    pub fn hue_in_window(&self, hue: f32) -> bool {
        if self.hue_lo <= self.hue_hi {
            hue >= self.hue_lo && hue <= self.hue_hi
        } else {
            hue >= self.hue_lo || hue <= self.hue_hi
        }
    }

    pub fn is_backdrop(&self, rgb: [f32; 3]) -> bool {
        let (h, s, v) = rgb_to_hsv(rgb);
        self.hue_in_window(h) && s >= self.sat_min && v >= self.val_min
    }
}

/// Labels backdrop pixels 0 and everything else 1. Purely per-pixel.
pub fn chroma_key(image: &ImageU8, thr: &HsvThresholds) -> BinaryMask {
    let data = image
        .as_bytes()
        .chunks_exact(3)
        .map(|p| {
            let rgb = [p[0], p[1], p[2]].map(|v| v as f32 / 255.0);
            (!thr.is_backdrop(rgb)) as u8
        })
        .collect();
    BinaryMask::new(image.height(), image.width(), data).expect("one label per pixel")
}
