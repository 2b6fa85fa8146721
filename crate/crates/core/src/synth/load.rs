//! Directory loaders for the `synth` command.
//!
//! Foregrounds: `<dir>/<user_id>/<upper|lower>/<outfit>__<frame>.png`, optionally with a
//! matte next to it as `<outfit>__<frame>.alpha.png`. Captures without a matte are keyed,
//! cleaned and matted on load.
//!
//! Backgrounds: `<dir>/<stand_front|stand_floor|sit_floor>/<scene_id>__<frame>.png`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{BackgroundAsset, BodyRegion, ForegroundAsset, Pose};
use crate::error::{Error, Result};
use crate::imgproc::{chroma_key, cleanup_mask, io, HsvThresholds};
use crate::matting::{matte_from_mask, AlphaMatte, MattingParams};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KeyingOptions {
    pub thresholds: HsvThresholds,
    pub matting: MattingParams,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn is_png(p: &Path) -> bool {
    p.is_file() && file_name(p).ends_with(".png")
}

pub fn load_foregrounds(dir: &Path, opts: &KeyingOptions) -> Result<Vec<ForegroundAsset>> {
    let mut jobs = Vec::new();
    for user_dir in sorted_entries(dir)?.into_iter().filter(|p| p.is_dir()) {
        let user = file_name(&user_dir);
        for region_dir in sorted_entries(&user_dir)?.into_iter().filter(|p| p.is_dir()) {
            let region = match file_name(&region_dir).as_str() {
                "upper" => BodyRegion::Upper,
                "lower" => BodyRegion::Lower,
                other => {
                    log::warn!("skipping unknown body region directory {other:?}");
                    continue;
                }
            };
            for file in sorted_entries(&region_dir)?.into_iter().filter(|p| is_png(p)) {
                let name = file_name(&file);
                if name.ends_with(".alpha.png") {
                    continue;
                }
                let stem = name.trim_end_matches(".png").to_string();
                let outfit = stem.split_once("__").map_or("default", |(o, _)| o).to_string();
                let alpha_path = region_dir.join(format!("{stem}.alpha.png"));
                jobs.push((file, alpha_path, user.clone(), region, outfit));
            }
        }
    }
    jobs.into_par_iter()
        .map(|(file, alpha_path, user, region, outfit)| {
            let rgb = io::read_rgb(&file)?;
            let image = rgb.to_f32();
            let alpha = if alpha_path.is_file() {
                let (h, w, values) = io::read_gray(&alpha_path)?;
                AlphaMatte::new(h, w, values)?
            } else {
                let mask = cleanup_mask(&chroma_key(&rgb, &opts.thresholds));
                matte_from_mask(&image, &mask, &opts.matting)?.alpha
            };
            ForegroundAsset::new(image, alpha, user, region, outfit)
        })
        .collect()
}

/// Picks `n` evenly spaced frames per scene (all frames if fewer), preserving order.
pub fn sample_background_frames(frames: Vec<BackgroundAsset>, n: usize) -> Vec<BackgroundAsset> {
    let mut scenes: BTreeMap<(Pose, String), Vec<BackgroundAsset>> = BTreeMap::new();
    for f in frames {
        scenes.entry((f.pose, f.scene_id.clone())).or_default().push(f);
    }
    let mut out = Vec::new();
    for (_, mut list) in scenes {
        if list.len() <= n {
            out.append(&mut list);
            continue;
        }
        let len = list.len();
        for i in 0..n {
            let k = ((i as f64 + 0.5) * len as f64 / n as f64) as usize;
            out.push(list[k.min(len - 1)].clone());
        }
    }
    out
}

pub fn load_backgrounds(dir: &Path, frames_per_background: usize) -> Result<Vec<BackgroundAsset>> {
    let mut found = Vec::new();
    for pose_dir in sorted_entries(dir)?.into_iter().filter(|p| p.is_dir()) {
        let Some(pose) = Pose::parse(&file_name(&pose_dir)) else {
            log::warn!("skipping unknown pose directory {}", pose_dir.display());
            continue;
        };
        for file in sorted_entries(&pose_dir)?.into_iter().filter(|p| is_png(p)) {
            let name = file_name(&file);
            let stem = name.trim_end_matches(".png");
            let scene = stem.split_once("__").map_or(stem, |(s, _)| s).to_string();
            found.push((file, pose, scene));
        }
    }
    let frames = found
        .into_par_iter()
        .map(|(file, pose, scene_id)| {
            Ok(BackgroundAsset {
                image: io::read_rgb(&file)?.to_f32(),
                pose,
                scene_id,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(sample_background_frames(frames, frames_per_background))
}
