//! Training: class-weight estimation, synchronized crop/jitter augmentation, Adam with
//! coupled L2 weight decay, and a resumable epoch loop with per-epoch checkpoints.
//!
//! Randomness comes from streams keyed by `(seed, epoch)` for the data order and
//! `(seed, epoch, sample)` for augmentation, so a run is reproducible at any thread
//! count and can be resumed from any epoch checkpoint bit-exactly.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::ConfusionMatrix;
use crate::imgproc::{apply_jitter, crop_resize, BinaryMask, CropBox, ImageF32, JitterParams};
use crate::nn::{weighted_cross_entropy, Element, Module, Tensor};
use crate::rng;
use crate::synth::{count_pixels, load_samples, DatasetManifest, Sample, Split};
use crate::thundernet::checkpoint::{self, CheckpointError, Entry};
use crate::thundernet::{argmax_masks, image_batch, Model, ModelConfig};

const SHUFFLE_STREAM: u64 = 0x7368_7566;
const AUGMENT_STREAM: u64 = 0x6175_676d;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub jitter: JitterParams,
    /// Range of the crop's area as a fraction of the frame.
    pub crop_scale: [f64; 2],
    /// Fixed `(background, human)` weights; estimated from the training masks if absent.
    pub class_weights: Option<[f64; 2]>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            weight_decay: 2e-4,
            batch_size: 8,
            epochs: 25,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            jitter: JitterParams::default(),
            crop_scale: [0.6, 1.0],
            class_weights: None,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be at least 1".into());
        }
        let [lo, hi] = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!("crop_scale {:?} must satisfy 0 < lo <= hi <= 1", self.crop_scale));
        }
        if let Some(w) = self.class_weights {
            ClassWeights::new(w[0], w[1])?;
        }
        self.jitter.validate()?;
        self.adam().validate()?;
        self.model.validate()
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub background: f64,
    pub human: f64,
}

impl ClassWeights {
    pub fn new(background: f64, human: f64) -> Result<Self> {
        if !(background > 0.0 && human > 0.0 && background.is_finite() && human.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "class weights must be positive, got ({background}, {human})"
            )));
        }
        Ok(Self { background, human })
    }

    /// Two-class median-frequency balancing: `w_c = 0.5 / f_c`, computed as
    /// `total / (2 n_c)` so integer counts give exactly rounded weights.
    pub fn from_counts(background_px: u64, human_px: u64) -> Result<Self> {
        if background_px == 0 || human_px == 0 {
            return Err(Error::Data(format!(
                "class weights undefined: {background_px} background and {human_px} human pixels"
            )));
        }
        let total = (background_px + human_px) as f64;
        Self::new(total / (2.0 * background_px as f64), total / (2.0 * human_px as f64))
    }

    pub fn from_masks<'a>(masks: impl IntoIterator<Item = &'a BinaryMask>) -> Result<Self> {
        let (mut bg, mut fg) = (0u64, 0u64);
        for m in masks {
            let ones = m.count_ones() as u64;
            fg += ones;
            bg += m.as_slice().len() as u64 - ones;
        }
        Self::from_counts(bg, fg)
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.background, self.human]
    }
}

/// Weights from the pixel counts of every training mask in the manifest.
pub fn compute_class_weights(manifest: &DatasetManifest, base: &Path) -> Result<ClassWeights> {
    if manifest.split(Split::Train).is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let (bg, fg) = count_pixels(manifest, base, Split::Train)?;
    ClassWeights::from_counts(bg, fg)
}

/// Per-channel mean and standard deviation of the images, over all pixels.
pub fn input_statistics(samples: &[Sample]) -> Result<([f64; 3], [f64; 3])> {
    let (mut sum, mut sq, mut n) = ([0.0f64; 3], [0.0f64; 3], 0u64);
    for s in samples {
        for px in s.image.as_slice().chunks_exact(3) {
            for c in 0..3 {
                let v = px[c] as f64;
                sum[c] += v;
                sq[c] += v * v;
            }
        }
        n += (s.image.height() * s.image.width()) as u64;
    }
    if n == 0 {
        return Err(Error::Data("no images to estimate input statistics".into()));
    }
    let n = n as f64;
    let mean = sum.map(|s| s / n);
    let std = [0, 1, 2].map(|c| (sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt().max(1e-3));
    Ok((mean, std))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamParams {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !(self.lr > 0.0) || !unit(self.beta1) || !unit(self.beta2) || !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(format!("invalid Adam parameters {self:?}")));
        }
        Ok(())
    }
}

/// First and second moments of one trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub name: String,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    /// Trainable tensors in visiting order; filled on the first step.
    pub moments: Vec<Moments<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            moments: Vec::new(),
        }
    }

    /// Container entries (`meta.*` scalars plus `m.<name>` / `v.<name>` tensors).
    pub fn to_entries(&self, epoch: usize) -> Vec<Entry> {
        let mut out = vec![
            Entry::new("meta.step", vec![1], vec![self.step as f32]),
            Entry::new("meta.epoch", vec![1], vec![epoch as f32]),
        ];
        for mo in &self.moments {
            for (tag, t) in [("m", &mo.m), ("v", &mo.v)] {
                out.push(Entry::new(
                    format!("{tag}.{}", mo.name),
                    t.shape().to_vec(),
                    t.data().iter().map(|v| v.f64() as f32).collect(),
                ));
            }
        }
        out
    }

    /// Inverse of [`AdamState::to_entries`]; returns the state and its epoch.
    pub fn from_entries(entries: &[Entry]) -> Result<(Self, usize)> {
        let scalar = |name: &str| -> Result<u64> {
            let e = entries
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| CheckpointError::MissingTensor { name: name.to_string() })?;
            match e.data.as_slice() {
                [v] if *v >= 0.0 && v.fract() == 0.0 => Ok(*v as u64),
                _ => Err(CheckpointError::BadMetadata(format!("{name} must be a non-negative integer")).into()),
            }
        };
        let step = scalar("meta.step")?;
        let epoch = scalar("meta.epoch")? as usize;
        let tensors: Vec<&Entry> = entries.iter().filter(|e| !e.name.starts_with("meta.")).collect();
        if tensors.len() % 2 != 0 {
            return Err(CheckpointError::BadMetadata("unpaired optimizer moments".into()).into());
        }
        let to_tensor = |e: &Entry| -> Result<Tensor<T>> {
            let shape: [usize; 4] = e.dims.as_slice().try_into().map_err(|_| CheckpointError::ShapeMismatch {
                name: e.name.clone(),
                expected: vec![0; 4],
                found: e.dims.clone(),
            })?;
            Tensor::new(shape, e.data.iter().map(|&v| T::of(v as f64)).collect())
        };
        let mut moments = Vec::with_capacity(tensors.len() / 2);
        for pair in tensors.chunks(2) {
            let (m, v) = (pair[0], pair[1]);
            let name = m.name.strip_prefix("m.");
            if name.is_none() || Some(name.unwrap()) != v.name.strip_prefix("v.") {
                return Err(CheckpointError::BadMetadata(format!("unexpected moment pair {} / {}", m.name, v.name)).into());
            }
            moments.push(Moments {
                name: name.unwrap().to_string(),
                m: to_tensor(m)?,
                v: to_tensor(v)?,
            });
        }
        Ok((Self { step, moments }, epoch))
    }

    pub fn save(&self, path: &Path, epoch: usize) -> Result<()> {
        checkpoint::write_entries(path, &self.to_entries(epoch))
    }

    pub fn load(path: &Path) -> Result<(Self, usize)> {
        Self::from_entries(&checkpoint::read_entries(path)?)
    }
}

/// One Adam update over every trainable tensor of `module`, using its accumulated
/// gradients. Kernels (`ParamKind::Weight`) get `weight_decay * theta` added to their
/// gradient; normalization parameters and biases are not decayed.
pub fn adam_step<T: Element, M: Module<T>>(module: &mut M, state: &mut AdamState<T>, hp: &AdamParams) -> Result<()> {
    hp.validate()?;
    let init = state.moments.is_empty();
    let step = state.step + 1;
    let bc1 = 1.0 - hp.beta1.powf(step as f64);
    let bc2 = 1.0 - hp.beta2.powf(step as f64);
    let mut index = 0;
    let mut failure: Option<Error> = None;
    module.visit_mut("", &mut |name, p, kind| {
        if !kind.trainable() || failure.is_some() {
            return;
        }
        if init {
            state.moments.push(Moments {
                name: name.to_string(),
                m: Tensor::zeros(p.shape()),
                v: Tensor::zeros(p.shape()),
            });
        }
        let Some(mo) = state.moments.get_mut(index) else {
            failure = Some(Error::InvalidArgument(format!("optimizer state has no entry for {name}")));
            return;
        };
        index += 1;
        if mo.name != name || mo.m.shape() != p.shape() {
            failure = Some(Error::InvalidArgument(format!(
                "optimizer state {} {:?} does not match parameter {name} {:?}",
                mo.name,
                mo.m.shape(),
                p.shape()
            )));
            return;
        }
        let decay = if kind.decayed() { hp.weight_decay } else { 0.0 };
        let (theta, grad) = p.data_and_grad();
        let Some(grad) = grad else {
            failure = Some(Error::InvalidArgument(format!("no gradient for {name}")));
            return;
        };
        (theta, grad, mo.m.data_mut(), mo.v.data_mut())
            .into_par_iter()
            .for_each(|(th, &g, m, v)| {
                let t = th.f64();
                let g = g.f64() + decay * t;
                let m1 = hp.beta1 * m.f64() + (1.0 - hp.beta1) * g;
                let v1 = hp.beta2 * v.f64() + (1.0 - hp.beta2) * g * g;
                *m = T::of(m1);
                *v = T::of(v1);
                *th = T::of(t - hp.lr * (m1 / bc1) / ((v1 / bc2).sqrt() + hp.eps));
            });
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if index != state.moments.len() {
        return Err(Error::InvalidArgument(format!(
            "optimizer state has {} entries, module has {index} trainable tensors",
            state.moments.len()
        )));
    }
    state.step = step;
    Ok(())
}

/// One random crop (area fraction drawn from `cfg.crop_scale`, frame aspect ratio kept)
/// applied identically to image and mask and resized to `size x size`, then chromatic
/// jitter on the image only.
pub fn augment_sample(
    image: &ImageF32,
    mask: &BinaryMask,
    cfg: &TrainConfig,
    size: usize,
    rng: &mut impl Rng,
) -> Result<(ImageF32, BinaryMask)> {
    let (h, w) = (image.height(), image.width());
    let [lo, hi] = cfg.crop_scale;
    let scale = if lo < hi { rng.gen_range(lo..=hi) } else { lo };
    let side = scale.sqrt();
    let ch = ((h as f64 * side).round() as usize).clamp(2.min(h), h);
    let cw = ((w as f64 * side).round() as usize).clamp(2.min(w), w);
    let y = if ch < h { rng.gen_range(0..=h - ch) } else { 0 };
    let x = if cw < w { rng.gen_range(0..=w - cw) } else { 0 };
    let bx = CropBox { x, y, w: cw, h: ch };
    let (img, m) = crop_resize(image, Some(mask), bx, size, size)?;
    let draw = cfg.jitter.draw(rng);
    Ok((apply_jitter(&img, &draw)?, m.expect("mask was provided")))
}

fn labels_of<'a>(masks: impl IntoIterator<Item = &'a BinaryMask>) -> Vec<u8> {
    masks.into_iter().flat_map(|m| m.as_slice().iter().copied()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_iou_bg: f64,
    pub val_iou_human: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Loss of every optimizer step of this process, in order.
    pub step_losses: Vec<f64>,
}

const CSV_HEADER: &str = "epoch,train_loss,val_loss,val_iou_bg,val_iou_human";

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.epoch, r.train_loss, r.val_loss, r.val_iou_bg, r.val_iou_human
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(CSV_HEADER) {
            return Err(Error::Data("history CSV header mismatch".into()));
        }
        let epochs = lines
            .filter(|l| !l.trim().is_empty())
            .map(|line| {
                let f: Vec<&str> = line.split(',').collect();
                let bad = || Error::Data(format!("bad history row {line:?}"));
                if f.len() != 5 {
                    return Err(bad());
                }
                let num = |i: usize| f[i].trim().parse::<f64>().map_err(|_| bad());
                Ok(EpochRecord {
                    epoch: f[0].trim().parse().map_err(|_| bad())?,
                    train_loss: num(1)?,
                    val_loss: num(2)?,
                    val_iou_bg: num(3)?,
                    val_iou_human: num(4)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            epochs,
            step_losses: Vec::new(),
        })
    }

    fn best_val_loss(&self) -> Option<f64> {
        self.epochs.iter().map(|r| r.val_loss).min_by(f64::total_cmp)
    }
}

/// Validation loss and confusion matrix in eval mode.
pub fn validate(model: &Model<f32>, samples: &[Sample], weights: &ClassWeights, batch_size: usize) -> Result<(f64, ConfusionMatrix)> {
    if samples.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    let (mut loss_sum, mut pixels, mut conf) = (0.0, 0usize, ConfusionMatrix::default());
    for chunk in samples.chunks(batch_size.max(1)) {
        let images: Vec<&ImageF32> = chunk.iter().map(|s| &s.image).collect();
        let logits = model.infer(&image_batch(&images)?)?;
        let labels = labels_of(chunk.iter().map(|s| &s.mask));
        let (loss, _) = weighted_cross_entropy(&logits, &labels, &weights.as_array())?;
        loss_sum += loss * labels.len() as f64;
        pixels += labels.len();
        for (p, s) in argmax_masks(&logits)?.iter().zip(chunk) {
            conf += crate::eval::confusion(p, &s.mask)?;
        }
    }
    Ok((loss_sum / pixels as f64, conf))
}

pub const HISTORY_FILE: &str = "history.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

pub fn epoch_checkpoint(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:03}.ckpt"))
}

/// Optimizer state stored next to a model checkpoint.
pub fn optimizer_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("adam")
}

/// Model, optimizer and schedule position.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
    pub cfg: TrainConfig,
    pub weights: ClassWeights,
    pub history: History,
    /// Completed epochs.
    epoch: usize,
    batch: usize,
}

impl Trainer {
    /// Fresh model from `cfg.model`, input standardization from `train`.
    pub fn new(cfg: TrainConfig, weights: ClassWeights, train: &[Sample]) -> Result<Self> {
        cfg.validate()?;
        let mut model = Model::new(cfg.model.clone())?;
        let (mean, std) = input_statistics(train)?;
        model.set_input_stats(mean, std)?;
        Ok(Self {
            model,
            adam: AdamState::new(),
            cfg,
            weights,
            history: History::default(),
            epoch: 0,
            batch: 0,
        })
    }

    /// Restores model, optimizer and epoch from a per-epoch checkpoint; the history
    /// CSV next to it, if any, is kept up to that epoch.
    pub fn resume(checkpoint_path: &Path, cfg: TrainConfig, weights: ClassWeights) -> Result<Self> {
        cfg.validate()?;
        let model = Model::<f32>::load(checkpoint_path)?;
        let mut expected = cfg.model.clone();
        expected.seed = model.config().seed;
        if *model.config() != expected {
            return Err(Error::InvalidArgument(format!(
                "checkpoint architecture {:?} differs from the configured {:?}",
                model.config(),
                cfg.model
            )));
        }
        let (adam, epoch) = AdamState::load(&optimizer_path(checkpoint_path))?;
        let mut history = History::default();
        if let Some(csv) = checkpoint_path.parent().map(|d| d.join(HISTORY_FILE)).filter(|p| p.is_file()) {
            history = History::from_csv(&std::fs::read_to_string(&csv).map_err(|e| Error::io(&csv, e))?)?;
            history.epochs.retain(|r| r.epoch <= epoch);
        }
        Ok(Self {
            model,
            adam,
            cfg,
            weights,
            history,
            epoch,
            batch: 0,
        })
    }

    pub fn completed_epochs(&self) -> usize {
        self.epoch
    }

    /// Forward, weighted loss, backward and one Adam update on a prepared batch.
    pub fn step(&mut self, images: &Tensor<f32>, labels: &[u8]) -> Result<f64> {
        self.model.zero_grad();
        let (logits, cache) = self.model.forward_train(images)?;
        let (loss, dlogits) = weighted_cross_entropy(&logits, labels, &self.weights.as_array())?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: self.epoch + 1,
                batch: self.batch,
                param_norm: self.model.param_norm(),
            });
        }
        self.model.backward(&cache, &dlogits, false)?;
        adam_step(&mut self.model, &mut self.adam, &self.cfg.adam())?;
        self.history.step_losses.push(loss);
        Ok(loss)
    }

    /// Sample order of epoch `epoch` (1-based).
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(self.cfg.seed, &[SHUFFLE_STREAM, epoch as u64]));
        order
    }

    /// Augmented batch for the given dataset indices.
    pub fn make_batch(&self, epoch: usize, indices: &[usize], train: &[Sample]) -> Result<(Tensor<f32>, Vec<u8>)> {
        let size = self.cfg.model.input_size;
        let pairs = indices
            .par_iter()
            .map(|&i| {
                let mut r = rng::stream(self.cfg.seed, &[AUGMENT_STREAM, epoch as u64, i as u64]);
                augment_sample(&train[i].image, &train[i].mask, &self.cfg, size, &mut r)
            })
            .collect::<Result<Vec<_>>>()?;
        let images: Vec<&ImageF32> = pairs.iter().map(|p| &p.0).collect();
        Ok((image_batch(&images)?, labels_of(pairs.iter().map(|p| &p.1))))
    }

    /// Runs one epoch and records it in the history; returns the record.
    pub fn run_epoch(&mut self, train: &[Sample], val: &[Sample]) -> Result<EpochRecord> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::Data(format!(
                "need non-empty splits, got {} train and {} val samples",
                train.len(),
                val.len()
            )));
        }
        let epoch = self.epoch + 1;
        let order = self.epoch_order(epoch, train.len());
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (b, idx) in order.chunks(self.cfg.batch_size).enumerate() {
            self.batch = b;
            let (x, labels) = self.make_batch(epoch, idx, train)?;
            loss_sum += self.step(&x, &labels)? * idx.len() as f64;
            seen += idx.len();
        }
        let (val_loss, conf) = validate(&self.model, val, &self.weights, self.cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_loss,
            val_iou_bg: conf.iou_background().value,
            val_iou_human: conf.iou_human().value,
        };
        log::info!(
            "epoch {epoch}: train loss {:.5}, val loss {:.5}, val IoU bg {:.4} human {:.4}",
            record.train_loss,
            record.val_loss,
            record.val_iou_bg,
            record.val_iou_human
        );
        self.epoch = epoch;
        self.history.epochs.push(record);
        Ok(record)
    }

    /// Writes the epoch checkpoint with its optimizer state and the history CSV.
    pub fn save_epoch(&self, dir: &Path) -> Result<PathBuf> {
        let path = epoch_checkpoint(dir, self.epoch);
        self.model.save(&path)?;
        self.adam.save(&optimizer_path(&path), self.epoch)?;
        let csv = dir.join(HISTORY_FILE);
        std::fs::write(&csv, self.history.to_csv()).map_err(|e| Error::io(&csv, e))?;
        Ok(path)
    }
}

/// Trains until `cfg.epochs` epochs are complete. With `out_dir`, each epoch writes
/// `epoch_NNN.ckpt` (+ `.adam`), `history.csv`, and `best.ckpt` whenever the
/// validation loss improves.
pub fn fit(trainer: &mut Trainer, train: &[Sample], val: &[Sample], out_dir: Option<&Path>) -> Result<History> {
    let mut best = trainer.history.best_val_loss();
    while trainer.epoch < trainer.cfg.epochs {
        let record = trainer.run_epoch(train, val)?;
        if let Some(dir) = out_dir {
            trainer.save_epoch(dir)?;
            if best.is_none_or(|b| record.val_loss < b) {
                trainer.model.save(&dir.join(BEST_CHECKPOINT))?;
            }
        }
        if best.is_none_or(|b| record.val_loss < b) {
            best = Some(record.val_loss);
        }
    }
    Ok(trainer.history.clone())
}

/// Loads a manifest's splits: training samples at native resolution (augmentation
/// resizes them), validation samples resized to the model input.
pub fn load_splits(manifest_path: &Path, input_size: usize) -> Result<(DatasetManifest, Vec<Sample>, Vec<Sample>)> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let train = load_samples(&manifest, base, Split::Train, None)?;
    let val = load_samples(&manifest, base, Split::Val, Some(input_size))?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(format!(
            "manifest needs train and val records, found {} and {}",
            train.len(),
            val.len()
        )));
    }
    Ok((manifest, train, val))
}

/// End-to-end training from a manifest file, optionally resuming from an epoch checkpoint.
pub fn fit_manifest(manifest_path: &Path, cfg: &TrainConfig, out_dir: &Path, resume: Option<&Path>) -> Result<History> {
    cfg.validate()?;
    let (manifest, train, val) = load_splits(manifest_path, cfg.model.input_size)?;
    let weights = match cfg.class_weights {
        Some([b, h]) => ClassWeights::new(b, h)?,
        None => compute_class_weights(&manifest, manifest_path.parent().unwrap_or(Path::new(".")))?,
    };
    log::info!("class weights: background {:.4}, human {:.4}", weights.background, weights.human);
    let mut trainer = match resume {
        Some(ckpt) => Trainer::resume(ckpt, cfg.clone(), weights)?,
        None => Trainer::new(cfg.clone(), weights, &train)?,
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    fit(&mut trainer, &train, &val, Some(out_dir))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ParamKind, Tensor};

    struct Scalar {
        p: Tensor<f64>,
        kind: ParamKind,
    }

    impl Scalar {
        fn new(v: f64, kind: ParamKind) -> Self {
            Self {
                p: Tensor::filled([1, 1, 1, 1], v),
                kind,
            }
        }

        fn set_grad(&mut self, g: f64) {
            self.p.grad_mut()[0] = g;
        }

        fn value(&self) -> f64 {
            self.p.data()[0]
        }
    }

    impl Module<f64> for Scalar {
        fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<f64>, ParamKind)) {
            f(&crate::nn::layers::join(prefix, "theta"), &self.p, self.kind);
        }

        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<f64>, ParamKind)) {
            f(&crate::nn::layers::join(prefix, "theta"), &mut self.p, self.kind);
        }
    }

    fn hp(lr: f64, wd: f64) -> AdamParams {
        AdamParams {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
        }
    }

    #[test]
    fn class_weight_examples() {
        let w = ClassWeights::from_counts(50, 50).unwrap();
        assert_eq!(w.as_array(), [1.0, 1.0]);
        let w = ClassWeights::from_counts(80, 20).unwrap();
        assert_eq!(w.as_array(), [0.625, 2.5]);
        assert!(ClassWeights::from_counts(10, 0).is_err());
        assert!(ClassWeights::from_counts(0, 10).is_err());
        for (b, h) in [(7u64, 3u64), (1000, 1), (123_457, 98_765)] {
            let w = ClassWeights::from_counts(b, h).unwrap();
            let t = (b + h) as f64;
            assert!((b as f64 / t * w.background + h as f64 / t * w.human - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut s = Scalar::new(0.7, ParamKind::Weight);
        let mut st = AdamState::new();
        for _ in 0..5 {
            s.set_grad(0.0);
            adam_step(&mut s, &mut st, &hp(0.1, 0.0)).unwrap();
        }
        assert_eq!(s.value(), 0.7);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn adam_first_step_is_about_lr() {
        for g in [3.0, -0.02, 1e-4] {
            let mut s = Scalar::new(1.0, ParamKind::Weight);
            let mut st = AdamState::new();
            s.set_grad(g);
            adam_step(&mut s, &mut st, &hp(1e-3, 0.0)).unwrap();
            let moved = 1.0 - s.value();
            let expected = 1e-3 * g / (g.abs() + 1e-8);
            assert!((moved - expected).abs() < 1e-15, "{moved} vs {expected}");
            assert!((moved.abs() - 1e-3).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_minimizes_a_parabola_like_the_scalar_recurrence() {
        let mut s = Scalar::new(1.0, ParamKind::Weight);
        let mut st = AdamState::new();
        let (mut th, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            s.set_grad(2.0 * s.value());
            adam_step(&mut s, &mut st, &hp(0.1, 0.0)).unwrap();
            let g = 2.0 * th;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            th -= 0.1 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        }
        assert!(s.value().abs() < 0.1, "{}", s.value());
        assert!((s.value() - th).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_only_touches_kernels() {
        for (kind, moves) in [(ParamKind::Weight, true), (ParamKind::Affine, false), (ParamKind::Bias, false)] {
            let mut s = Scalar::new(2.0, kind);
            let mut st = AdamState::new();
            s.set_grad(0.0);
            adam_step(&mut s, &mut st, &hp(0.01, 0.5)).unwrap();
            assert_eq!(s.value() != 2.0, moves, "{kind:?}");
        }
        let mut s = Scalar::new(2.0, ParamKind::Buffer);
        let mut st = AdamState::new();
        adam_step(&mut s, &mut st, &hp(0.01, 0.5)).unwrap();
        assert!(st.moments.is_empty());
    }

    #[test]
    fn adam_requires_gradients() {
        let mut s = Scalar::new(1.0, ParamKind::Weight);
        assert!(adam_step(&mut s, &mut AdamState::new(), &hp(0.1, 0.0)).is_err());
    }

    #[test]
    fn adam_state_roundtrip() {
        let mut s = Scalar::new(1.0, ParamKind::Weight);
        let mut st = AdamState::<f64>::new();
        s.set_grad(0.5);
        adam_step(&mut s, &mut st, &hp(0.1, 0.0)).unwrap();
        let (back, epoch) = AdamState::<f64>::from_entries(&st.to_entries(4)).unwrap();
        assert_eq!(epoch, 4);
        assert_eq!(back.step, 1);
        assert_eq!(back.moments[0].name, "theta");
        assert_eq!(back.moments[0].m.data()[0], st.moments[0].m.data()[0] as f32 as f64);
    }

    #[test]
    fn history_csv_roundtrip() {
        let h = History {
            epochs: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.693,
                val_loss: 0.5,
                val_iou_bg: 0.9,
                val_iou_human: 1.0 / 3.0,
            }],
            step_losses: vec![],
        };
        let csv = h.to_csv();
        assert!(csv.starts_with("epoch,train_loss,val_loss,val_iou_bg,val_iou_human\n"));
        assert_eq!(History::from_csv(&csv).unwrap(), h);
    }

    #[test]
    fn config_toml_roundtrip_and_validation() {
        let cfg = TrainConfig::default();
        assert_eq!((cfg.lr, cfg.weight_decay, cfg.batch_size, cfg.epochs), (1e-5, 2e-4, 8, 25));
        assert_eq!(TrainConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
        let partial = TrainConfig::from_toml_str("lr = 0.001\nepochs = 3\n[model]\ninput_size = 48\nstem_channels = 8\nstage_channels = [8, 8, 8]\nppm_bins = [1, 2]\nppm_branch_channels = 8\ndecoder_channels = [8, 8]\n").unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.model.input_size, 48);
        assert!(TrainConfig::from_toml_str("lr = 0.0").is_err());
        assert!(TrainConfig::from_toml_str("batch_size = 0").is_err());
        assert!(TrainConfig::from_toml_str("bogus = 1").is_err());
        assert!(TrainConfig::from_toml_str("crop_scale = [0.9, 0.5]").is_err());
    }

    fn sample_pair(h: usize, w: usize) -> (ImageF32, BinaryMask) {
        let img = ImageF32::from_fn(h, w, 3, |y, x| (0..3).map(|c| ((y * 7 + x * 3 + c * 5) % 17) as f32 / 16.0).collect());
        let mask = BinaryMask::from_fn(h, w, |y, x| (y + 2 * x) % 5 < 2);
        (img, mask)
    }

    #[test]
    fn augmentation_identity_binary_and_deterministic() {
        let (img, mask) = sample_pair(24, 24);
        let cfg = TrainConfig {
            crop_scale: [1.0, 1.0],
            jitter: JitterParams::none(),
            ..TrainConfig::default()
        };
        let (a, m) = augment_sample(&img, &mask, &cfg, 24, &mut rng::stream(1, &[])).unwrap();
        assert_eq!((a, m), (img.clone(), mask.clone()));

        let cfg = TrainConfig::default();
        let run = |seed| augment_sample(&img, &mask, &cfg, 16, &mut rng::stream(seed, &[])).unwrap();
        for seed in 0..20 {
            let (a, m) = run(seed);
            assert_eq!((a.height(), a.width(), m.height()), (16, 16, 16));
            assert!(m.as_slice().iter().all(|&v| v <= 1));
            assert_eq!(run(seed), (a, m));
        }
        assert_ne!(run(0), run(1));
    }
}
