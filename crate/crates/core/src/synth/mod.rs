//! Semi-synthetic dataset assembly: matted foreground captures are composited over
//! categorized backgrounds, users are balanced and split disjointly, and plain
//! backgrounds are added as negatives.

mod load;
mod manifest;
mod samples;

pub use load::{load_backgrounds, load_foregrounds, sample_background_frames, KeyingOptions};
pub use manifest::{DatasetManifest, ManifestRecord, Source, Split};
pub use samples::{count_pixels, load_samples, Sample};

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgproc::{io, resize, rotate, BinaryMask, ImageF32};
use crate::matting::AlphaMatte;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BodyRegion {
    Upper,
    Lower,
}

/// Camera position of a background capture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pose {
    StandFront,
    StandFloor,
    SitFloor,
}

impl Pose {
    pub const ALL: [Pose; 3] = [Pose::StandFront, Pose::StandFloor, Pose::SitFloor];

    pub fn is_floor(self) -> bool {
        matches!(self, Pose::StandFloor | Pose::SitFloor)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Pose::StandFront => "stand_front",
            Pose::StandFloor => "stand_floor",
            Pose::SitFloor => "sit_floor",
        }
    }

    pub fn parse(s: &str) -> Option<Pose> {
        Pose::ALL.into_iter().find(|p| p.as_str() == s)
    }
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug)]
pub struct ForegroundAsset {
    pub image: ImageF32,
    pub alpha: AlphaMatte,
    pub user_id: String,
    pub body_region: BodyRegion,
    pub outfit: String,
}

impl ForegroundAsset {
    pub fn new(
        image: ImageF32,
        alpha: AlphaMatte,
        user_id: impl Into<String>,
        body_region: BodyRegion,
        outfit: impl Into<String>,
    ) -> Result<Self> {
        let user_id = user_id.into();
        if user_id.is_empty() {
            return Err(Error::InvalidArgument("foreground user_id is empty".into()));
        }
        if !image.same_size(alpha.height(), alpha.width()) {
            return Err(Error::Dimensions(format!(
                "foreground {}x{} vs alpha {}x{}",
                image.height(),
                image.width(),
                alpha.height(),
                alpha.width()
            )));
        }
        Ok(Self {
            image,
            alpha,
            user_id,
            body_region,
            outfit: outfit.into(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct BackgroundAsset {
    pub image: ImageF32,
    pub pose: Pose,
    pub scene_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub frames_per_background: usize,
    pub floor_rotations: Vec<u32>,
    pub per_user_cap: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames_per_background: 2,
            floor_rotations: vec![45, 90, 180],
            per_user_cap: 1000,
            // 2743 / 15401
            val_fraction: 0.178,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "val_fraction {} not in (0, 1)",
                self.val_fraction
            )));
        }
        if self.frames_per_background < 1 {
            return Err(Error::InvalidArgument("frames_per_background must be >= 1".into()));
        }
        if self.per_user_cap == 0 {
            return Err(Error::InvalidArgument("per_user_cap must be >= 1".into()));
        }
        Ok(())
    }
}

/// Which background poses a foreground body region may be placed over.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseRules {
    pub allowed: BTreeMap<BodyRegion, Vec<Pose>>,
}

impl Default for PoseRules {
    fn default() -> Self {
        let mut allowed = BTreeMap::new();
        allowed.insert(BodyRegion::Upper, Pose::ALL.to_vec());
        allowed.insert(BodyRegion::Lower, vec![Pose::StandFloor, Pose::SitFloor]);
        Self { allowed }
    }
}

impl PoseRules {
    pub fn allows(&self, region: BodyRegion, pose: Pose) -> bool {
        self.allowed
            .get(&region)
            .is_some_and(|poses| poses.contains(&pose))
    }
}

/// `alpha * fg + (1 - alpha) * bg` per channel; label mask is `alpha >= 0.5`.
pub fn composite(
    fg: &ImageF32,
    alpha: &AlphaMatte,
    bg: &ImageF32,
) -> Result<(ImageF32, BinaryMask)> {
    let (h, w) = (alpha.height(), alpha.width());
    if !fg.same_size(h, w) || !bg.same_size(h, w) || fg.channels() != bg.channels() {
        return Err(Error::Dimensions(format!(
            "composite of fg {}x{}x{}, alpha {h}x{w}, bg {}x{}x{}",
            fg.height(),
            fg.width(),
            fg.channels(),
            bg.height(),
            bg.width(),
            bg.channels()
        )));
    }
    let c = fg.channels();
    let mut out = bg.clone();
    for (i, &a) in alpha.as_slice().iter().enumerate() {
        let f = &fg.as_slice()[i * c..(i + 1) * c];
        for (o, &fv) in out.as_mut_slice()[i * c..(i + 1) * c].iter_mut().zip(f) {
            *o = a * fv + (1.0 - a) * *o;
        }
    }
    Ok((out, alpha.to_mask()))
}

/// Floor-pose backgrounds gain one rotated copy per angle, placed right after the
/// original; front-facing backgrounds pass through.
pub fn expand_backgrounds(
    assets: &[BackgroundAsset],
    rotations: &[u32],
) -> Result<Vec<BackgroundAsset>> {
    let mut out = Vec::with_capacity(assets.len() * (1 + rotations.len()));
    for asset in assets {
        out.push(asset.clone());
        if asset.pose.is_floor() {
            for &deg in rotations {
                out.push(BackgroundAsset {
                    image: rotate(&asset.image, deg)?,
                    pose: asset.pose,
                    scene_id: format!("{}@rot{deg}", asset.scene_id),
                });
            }
        }
    }
    Ok(out)
}

/// How to render one manifest record.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CompositeJob {
    /// Index into the foreground list; `None` for background-only negatives.
    pub foreground: Option<usize>,
    pub background: usize,
}

/// A manifest plus the recipe for each of its records.
#[derive(Clone, Debug)]
pub struct DatasetPlan {
    pub manifest: DatasetManifest,
    pub jobs: Vec<CompositeJob>,
    pub warnings: Vec<String>,
}

pub fn build_dataset(
    fgs: &[ForegroundAsset],
    bgs: &[BackgroundAsset],
    cfg: &SynthConfig,
) -> Result<DatasetPlan> {
    build_dataset_with_rules(fgs, bgs, cfg, &PoseRules::default())
}

pub fn build_dataset_with_rules(
    fgs: &[ForegroundAsset],
    bgs: &[BackgroundAsset],
    cfg: &SynthConfig,
    rules: &PoseRules,
) -> Result<DatasetPlan> {
    cfg.validate()?;
    if fgs.is_empty() || bgs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "need foregrounds and backgrounds, got {} and {}",
            fgs.len(),
            bgs.len()
        )));
    }
    let mut rng = rng::stream(cfg.seed, &[0]);

    let mut by_user: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, fg) in fgs.iter().enumerate() {
        by_user.entry(fg.user_id.as_str()).or_default().push(i);
    }

    let mut records = Vec::new();
    let mut jobs = Vec::new();
    for indices in by_user.values() {
        let kept: Vec<usize> = if indices.len() > cfg.per_user_cap {
            let mut picked = index::sample(&mut rng, indices.len(), cfg.per_user_cap).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|k| indices[k]).collect()
        } else {
            indices.clone()
        };
        for fi in kept {
            let fg = &fgs[fi];
            let compatible: Vec<usize> = (0..bgs.len())
                .filter(|&b| rules.allows(fg.body_region, bgs[b].pose))
                .collect();
            if compatible.is_empty() {
                return Err(Error::Data(format!(
                    "no background compatible with {:?} foreground of user {}",
                    fg.body_region, fg.user_id
                )));
            }
            let bi = compatible[rng.gen_range(0..compatible.len())];
            let id = format!("c{:06}", records.len());
            records.push(ManifestRecord::new(
                id,
                fg.user_id.clone(),
                bgs[bi].pose,
                Split::Train,
                Source::Composite,
            ));
            jobs.push(CompositeJob {
                foreground: Some(fi),
                background: bi,
            });
        }
    }

    let mut warnings = Vec::new();
    let mut manifest = DatasetManifest { records };
    if by_user.len() < 2 {
        let msg = "a single user cannot be split; validation split left empty".to_string();
        log::warn!("{msg}");
        warnings.push(msg);
    } else {
        manifest = split_by_user(&manifest, cfg.val_fraction, cfg.seed)?;
    }

    for (bi, bg) in bgs.iter().enumerate() {
        let id = format!("b{:06}", bi);
        manifest.records.push(ManifestRecord::new(
            id,
            String::new(),
            bg.pose,
            Split::Train,
            Source::BackgroundOnly,
        ));
        jobs.push(CompositeJob {
            foreground: None,
            background: bi,
        });
    }
    Ok(DatasetPlan {
        manifest,
        jobs,
        warnings,
    })
}

/// Moves whole users into validation, in seeded random order, until the validation
/// composites reach `val_fraction` of all composites. At least one user always stays in
/// training. Background-only records are always training data.
pub fn split_by_user(
    manifest: &DatasetManifest,
    val_fraction: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "val_fraction {val_fraction} not in (0, 1)"
        )));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in manifest.records.iter().filter(|r| r.source == Source::Composite) {
        *counts.entry(r.user_id.as_str()).or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "user split needs at least 2 users, found {}",
            counts.len()
        )));
    }
    let total: usize = counts.values().sum();
    let target = val_fraction * total as f64;
    let mut users: Vec<&str> = counts.keys().copied().collect();
    users.shuffle(&mut rng::stream(seed, &[1]));

    let mut val_users = std::collections::BTreeSet::new();
    let mut val_count = 0usize;
    for (k, user) in users.iter().enumerate() {
        let last = k + 1 == users.len();
        if (val_count as f64) < target && !last {
            val_users.insert(*user);
            val_count += counts[user];
        }
    }
    let mut out = manifest.clone();
    for r in &mut out.records {
        r.split = if r.source == Source::Composite && val_users.contains(r.user_id.as_str()) {
            Split::Val
        } else {
            Split::Train
        };
    }
    Ok(out)
}

impl DatasetPlan {
    /// Renders every record into `out_dir` (images, masks and `manifest.jsonl`).
    /// Backgrounds whose size differs from the foreground are resized to it.
    pub fn materialize(
        &self,
        fgs: &[ForegroundAsset],
        bgs: &[BackgroundAsset],
        out_dir: &Path,
    ) -> Result<()> {
        self.manifest
            .records
            .par_iter()
            .zip(&self.jobs)
            .try_for_each(|(record, job)| -> Result<()> {
                let bg = &bgs[job.background].image;
                let (image, mask) = match job.foreground {
                    Some(fi) => {
                        let fg = &fgs[fi];
                        let bg = resize(bg, fg.image.height(), fg.image.width())?;
                        composite(&fg.image, &fg.alpha, &bg)?
                    }
                    None => (bg.clone(), BinaryMask::zeros(bg.height(), bg.width())),
                };
                io::write_rgb(&out_dir.join(&record.image_path), &image.to_u8()?)?;
                io::write_mask(&out_dir.join(&record.mask_path), &mask)
            })?;
        self.manifest.write(&out_dir.join("manifest.jsonl"))
    }
}
