use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{hsv_to_rgb, rgb_to_hsv, ImageF32};
use crate::error::{Error, Result};

/// Jitter magnitudes; each factor is drawn uniformly from `[-m, m]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JitterParams {
    /// Additive brightness shift, fraction of full scale.
    pub brightness: f32,
    /// Relative contrast change around the image mean.
    pub contrast: f32,
    /// Hue rotation in degrees.
    pub hue_deg: f32,
}

impl Default for JitterParams {
    fn default() -> Self {
        Self {
            brightness: 0.2,
            contrast: 0.2,
            hue_deg: 15.0,
        }
    }
}

impl JitterParams {
    pub fn none() -> Self {
        Self {
            brightness: 0.0,
            contrast: 0.0,
            hue_deg: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.brightness)
            || !unit.contains(&self.contrast)
            || !(0.0..=60.0).contains(&self.hue_deg)
        {
            return Err(Error::InvalidArgument(format!(
                "jitter magnitudes out of range: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn draw(&self, rng: &mut impl Rng) -> JitterDraw {
        let mut sym = |m: f32| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
        JitterDraw {
            hue_deg: sym(self.hue_deg),
            contrast: sym(self.contrast),
            brightness: sym(self.brightness),
        }
    }
}

/// One concrete jitter, applied as hue rotation, then contrast, then brightness.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct JitterDraw {
    pub hue_deg: f32,
    pub contrast: f32,
    pub brightness: f32,
}

pub fn chromatic_jitter(
    image: &ImageF32,
    params: &JitterParams,
    rng: &mut impl Rng,
) -> Result<ImageF32> {
    params.validate()?;
    let draw = params.draw(rng);
    apply_jitter(image, &draw)
}

/// Zero-valued components are skipped entirely, so a zero draw is an exact identity.
pub fn apply_jitter(image: &ImageF32, draw: &JitterDraw) -> Result<ImageF32> {
    let mut out = image.clone();
    if draw.hue_deg != 0.0 {
        if image.channels() != 3 {
            return Err(Error::Dimensions("hue jitter needs an RGB image".into()));
        }
        for px in out.as_mut_slice().chunks_exact_mut(3) {
            let (h, s, v) = rgb_to_hsv([px[0], px[1], px[2]]);
            px.copy_from_slice(&hsv_to_rgb(h + draw.hue_deg, s, v));
        }
    }
    if draw.contrast != 0.0 {
        let data = out.as_mut_slice();
        let mean = (data.iter().map(|&v| v as f64).sum::<f64>() / data.len() as f64) as f32;
        let gain = 1.0 + draw.contrast;
        for v in data.iter_mut() {
            *v = (*v - mean) * gain + mean;
        }
    }
    if draw.brightness != 0.0 {
        for v in out.as_mut_slice() {
            *v += draw.brightness;
        }
    }
    for v in out.as_mut_slice() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}
