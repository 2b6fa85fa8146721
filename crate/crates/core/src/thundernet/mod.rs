//! Segmentation network: truncated ResNet-18 encoder (stem plus three stages), a
//! pyramid pooling module, a two-deconvolution decoder with three additive long
//! skips, and a two-class head upsampled to the input resolution.
//!
//! Models are generic over the element type so the same code runs in `f32` for
//! training and inference and in `f64` for gradient verification.

pub mod checkpoint;
mod encoder;
mod gradcheck;
mod head;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgproc::{BinaryMask, ImageF32};
use crate::nn::layers::join;
use crate::nn::{Element, Module, ParamKind, Tensor};
use checkpoint::{CheckpointError, Entry};

pub use encoder::{BasicBlock, BlockCache, Encoder, EncoderCache, Features};
pub use gradcheck::{model_grad_check, ModelGradCheck, ModelGradCheckOptions};
pub use head::{Decoder, DecoderCache, Ppm, PpmCache, HEAD_INIT_STD};

/// Total downsampling of the encoder.
pub const OUTPUT_STRIDE: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_size: usize,
    pub stem_channels: usize,
    pub stage_channels: [usize; 3],
    pub ppm_bins: Vec<usize>,
    pub ppm_branch_channels: usize,
    pub decoder_channels: [usize; 2],
    pub num_classes: usize,
    /// Additive encoder-to-decoder skips at strides 16, 8 and 4.
    pub long_skips: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 720,
            stem_channels: 64,
            stage_channels: [64, 128, 256],
            ppm_bins: vec![6, 12, 18, 24],
            ppm_branch_channels: 64,
            decoder_channels: [128, 64],
            num_classes: 2,
            long_skips: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Full-width network at 384x384, the largest square that fits the default bins
    /// with a small stride-16 map.
    pub fn desk() -> Self {
        Self {
            input_size: 384,
            ..Self::default()
        }
    }

    /// Tiny network for gradient checks and overfitting tests.
    pub fn toy() -> Self {
        Self {
            input_size: 48,
            stem_channels: 8,
            stage_channels: [8, 8, 8],
            ppm_bins: vec![1, 2],
            ppm_branch_channels: 8,
            decoder_channels: [8, 8],
            num_classes: 2,
            long_skips: true,
            seed: 0,
        }
    }

    pub fn max_bin(&self) -> usize {
        self.ppm_bins.iter().copied().max().unwrap_or(0)
    }

    pub fn ppm_concat_channels(&self) -> usize {
        self.stage_channels[2] + self.ppm_bins.len() * self.ppm_branch_channels
    }

    /// Checks that a square input of side `size` can run through this architecture.
    pub fn check_size(&self, size: usize) -> Result<()> {
        if size == 0 || size % OUTPUT_STRIDE != 0 {
            return Err(Error::InvalidArgument(format!(
                "input size {size} must be a positive multiple of {OUTPUT_STRIDE}"
            )));
        }
        if size / OUTPUT_STRIDE < self.max_bin() {
            return Err(Error::InvalidArgument(format!(
                "input size {size} gives a {0}x{0} stride-16 map, smaller than pyramid bin {1}",
                size / OUTPUT_STRIDE,
                self.max_bin()
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.ppm_bins.is_empty() || self.ppm_bins.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "pyramid bins {:?} must be non-empty and positive",
                self.ppm_bins
            )));
        }
        let widths = [self.stem_channels, self.ppm_branch_channels]
            .into_iter()
            .chain(self.stage_channels)
            .chain(self.decoder_channels);
        if widths.into_iter().any(|c| c == 0) {
            return Err(Error::InvalidArgument("channel counts must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least two classes, got {}",
                self.num_classes
            )));
        }
        self.check_size(self.input_size)
    }

    fn meta_entries(&self) -> Vec<Entry> {
        let e = |name: &str, v: Vec<usize>| Entry::new(format!("meta.{name}"), vec![v.len()], v.iter().map(|&x| x as f32).collect());
        vec![
            e("input_size", vec![self.input_size]),
            e("stem_channels", vec![self.stem_channels]),
            e("stage_channels", self.stage_channels.to_vec()),
            e("ppm_bins", self.ppm_bins.clone()),
            e("ppm_branch_channels", vec![self.ppm_branch_channels]),
            e("decoder_channels", self.decoder_channels.to_vec()),
            e("num_classes", vec![self.num_classes]),
            e("long_skips", vec![self.long_skips as usize]),
        ]
    }

    fn from_meta(entries: &HashMap<&str, &Entry>) -> std::result::Result<Self, CheckpointError> {
        let get = |name: &str, len: Option<usize>| -> std::result::Result<Vec<usize>, CheckpointError> {
            let full = format!("meta.{name}");
            let e = entries
                .get(full.as_str())
                .ok_or_else(|| CheckpointError::MissingTensor { name: full.clone() })?;
            if len.is_some_and(|l| e.data.len() != l) || e.dims.len() != 1 {
                return Err(CheckpointError::BadMetadata(format!("{full} has dims {:?}", e.dims)));
            }
            e.data
                .iter()
                .map(|&v| {
                    if v >= 0.0 && v.fract() == 0.0 && v < 1e7 {
                        Ok(v as usize)
                    } else {
                        Err(CheckpointError::BadMetadata(format!("{full} holds non-integer {v}")))
                    }
                })
                .collect()
        };
        let cfg = Self {
            input_size: get("input_size", Some(1))?[0],
            stem_channels: get("stem_channels", Some(1))?[0],
            stage_channels: get("stage_channels", Some(3))?.try_into().expect("length checked"),
            ppm_bins: get("ppm_bins", None)?,
            ppm_branch_channels: get("ppm_branch_channels", Some(1))?[0],
            decoder_channels: get("decoder_channels", Some(2))?.try_into().expect("length checked"),
            num_classes: get("num_classes", Some(1))?[0],
            long_skips: get("long_skips", Some(1))?[0] != 0,
            seed: 0,
        };
        cfg.validate().map_err(|e| CheckpointError::BadMetadata(e.to_string()))?;
        Ok(cfg)
    }
}

/// Network parameters, buffers and the per-channel input standardization.
#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    pub input_mean: Tensor<T>,
    pub input_std: Tensor<T>,
    pub encoder: Encoder<T>,
    pub ppm: Ppm<T>,
    pub decoder: Decoder<T>,
}

/// Everything `backward` needs from a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct ModelCache<T> {
    features: Features<T>,
    encoder: EncoderCache<T>,
    ppm: PpmCache<T>,
    decoder: DecoderCache<T>,
}

/// Builds a freshly initialized model (He-normal kernels drawn from `cfg.seed`).
pub fn build_model<T: Element>(cfg: &ModelConfig) -> Result<Model<T>> {
    Model::new(cfg.clone())
}

impl<T: Element> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::rng::stream(config.seed, &[0x7468_756e]);
        let encoder = Encoder::new(config.stem_channels, config.stage_channels, &mut rng);
        let ppm = Ppm::new(config.stage_channels[2], &config.ppm_bins, config.ppm_branch_channels, &mut rng);
        let decoder = Decoder::new(
            config.stage_channels,
            config.decoder_channels,
            config.num_classes,
            config.long_skips,
            &mut rng,
        );
        Ok(Self {
            config,
            input_mean: Tensor::zeros([3, 1, 1, 1]),
            input_std: Tensor::filled([3, 1, 1, 1], T::one()),
            encoder,
            ppm,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn set_input_stats(&mut self, mean: [f64; 3], std: [f64; 3]) -> Result<()> {
        if std.iter().any(|s| !(*s > 0.0) || !s.is_finite()) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument(format!("input statistics mean {mean:?} std {std:?}")));
        }
        self.input_mean = Tensor::from_fn([3, 1, 1, 1], |i| T::of(mean[i]));
        self.input_std = Tensor::from_fn([3, 1, 1, 1], |i| T::of(std[i]));
        Ok(())
    }

    pub fn input_stats(&self) -> ([f64; 3], [f64; 3]) {
        let m = self.input_mean.data();
        let s = self.input_std.data();
        ([0, 1, 2].map(|i| m[i].f64()), [0, 1, 2].map(|i| s[i].f64()))
    }

    /// Validates an `N x 3 x s x s` batch of `[0, 1]` images.
    pub fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        let [n, c, h, w] = x.shape();
        if n == 0 || c != 3 || h != w {
            return Err(Error::Dimensions(format!(
                "expected a non-empty N x 3 x S x S batch, got {:?}",
                x.shape()
            )));
        }
        self.config.check_size(h)?;
        Ok(h)
    }

    fn standardize(&self, x: &Tensor<T>) -> Tensor<T> {
        let plane = x.plane();
        let (mean, std) = (self.input_mean.data(), self.input_std.data());
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = (i / plane) % 3;
            *v = (*v - mean[c]) / std[c];
        }
        out
    }

    /// Eval-mode encoder features (after input standardization).
    pub fn features(&self, x: &Tensor<T>) -> Result<Features<T>> {
        self.check_input(x)?;
        self.encoder.infer(&self.standardize(x))
    }

    /// Eval-mode logits `N x classes x s x s`; a pure function of weights and input.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let size = self.check_input(x)?;
        let f = self.encoder.infer(&self.standardize(x))?;
        let fused = self.ppm.infer(&f.s16)?;
        self.decoder.infer(&fused, &f, size)
    }

    /// Training-mode forward (batch statistics; running statistics are updated).
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, ModelCache<T>)> {
        let size = self.check_input(x)?;
        let (features, encoder) = self.encoder.forward_train(&self.standardize(x))?;
        let (fused, ppm) = self.ppm.forward_train(&features.s16)?;
        let (logits, decoder) = self.decoder.forward_train(&fused, &features, size)?;
        Ok((
            logits,
            ModelCache {
                features,
                encoder,
                ppm,
                decoder,
            },
        ))
    }

    /// Accumulates parameter gradients; optionally returns the gradient wrt the input images.
    pub fn backward(&mut self, cache: &ModelCache<T>, dlogits: &Tensor<T>, need_input_grad: bool) -> Result<Option<Tensor<T>>> {
        let (dfused, mut dfeat) = self.decoder.backward(&cache.decoder, &cache.features, dlogits)?;
        let d16 = self.ppm.backward(&cache.ppm, &dfused)?;
        crate::nn::add_assign(&mut dfeat.s16, &d16)?;
        let dx = self.encoder.backward(&cache.encoder, dfeat, need_input_grad)?;
        Ok(dx.map(|mut d| {
            let plane = d.plane();
            let std = self.input_std.data().to_vec();
            for (i, v) in d.data_mut().iter_mut().enumerate() {
                *v = *v / std[(i / plane) % 3];
            }
            d
        }))
    }

    /// Per-image human masks; ties between logits go to the background class.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<BinaryMask>> {
        argmax_masks(&self.infer(x)?)
    }

    pub fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, t, _| t.zero_grad());
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t, k| {
            if k.trainable() {
                n += t.len();
            }
        });
        n
    }

    /// Root of the sum of squares over trainable parameters.
    pub fn param_norm(&self) -> f64 {
        let mut s = 0.0;
        self.visit("", &mut |_, t, k| {
            if k.trainable() {
                s += t.sum_sq();
            }
        });
        s.sqrt()
    }

    /// Names in visiting order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |n, _, _| names.push(n.to_string()));
        names
    }

    pub fn to_entries(&self) -> Vec<Entry> {
        let mut entries = self.config.meta_entries();
        self.visit("", &mut |name, t, kind| {
            entries.push(Entry::new(
                name,
                stored_dims(t, kind),
                t.data().iter().map(|v| v.f64() as f32).collect(),
            ));
        });
        entries
    }

    /// Rebuilds a model from container entries, validating every name and shape.
    pub fn from_entries(entries: &[Entry]) -> Result<Self> {
        let by_name: HashMap<&str, &Entry> = entries.iter().map(|e| (e.name.as_str(), e)).collect();
        let config = ModelConfig::from_meta(&by_name)?;
        let mut model = Self::new(config)?;
        let mut failure: Option<CheckpointError> = None;
        let mut used = std::collections::HashSet::new();
        model.visit_mut("", &mut |name, t, kind| {
            if failure.is_some() {
                return;
            }
            let Some(e) = by_name.get(name) else {
                failure = Some(CheckpointError::MissingTensor { name: name.to_string() });
                return;
            };
            let expected = stored_dims(t, kind);
            if e.dims != expected {
                failure = Some(CheckpointError::ShapeMismatch {
                    name: name.to_string(),
                    expected,
                    found: e.dims.clone(),
                });
                return;
            }
            for (d, &v) in t.data_mut().iter_mut().zip(&e.data) {
                *d = T::of(v as f64);
            }
            used.insert(name.to_string());
        });
        if let Some(f) = failure {
            return Err(f.into());
        }
        if let Some(extra) = entries
            .iter()
            .find(|e| !e.name.starts_with("meta.") && !used.contains(&e.name))
        {
            return Err(CheckpointError::UnexpectedTensor { name: extra.name.clone() }.into());
        }
        let (mean, std) = model.input_stats();
        model
            .set_input_stats(mean, std)
            .map_err(|e| CheckpointError::BadMetadata(e.to_string()))?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_entries(path, &self.to_entries())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_entries(&checkpoint::read_entries(path)?)
    }
}

pub fn save_checkpoint<T: Element>(model: &Model<T>, path: &Path) -> Result<()> {
    model.save(path)
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<Model<T>> {
    Model::load(path)
}

/// Kernels are stored at rank 4; every other tensor as a flat vector.
fn stored_dims<T: Element>(t: &Tensor<T>, kind: ParamKind) -> Vec<usize> {
    match kind {
        ParamKind::Weight => t.shape().to_vec(),
        _ => vec![t.len()],
    }
}

/// Packs equally sized RGB images (interleaved `[0, 1]` values) into an `N x 3 x H x W` batch.
pub fn image_batch<T: Element>(images: &[&ImageF32]) -> Result<Tensor<T>> {
    let Some(first) = images.first() else {
        return Err(Error::InvalidArgument("empty image batch".into()));
    };
    let (h, w) = (first.height(), first.width());
    let plane = h * w;
    let mut data = Vec::with_capacity(images.len() * 3 * plane);
    for img in images {
        if img.channels() != 3 || !img.same_size(h, w) {
            return Err(Error::Dimensions(format!(
                "batch of {h}x{w} RGB images got {}x{}x{}",
                img.height(),
                img.width(),
                img.channels()
            )));
        }
        let px = img.as_slice();
        for c in 0..3 {
            data.extend((0..plane).map(|i| T::of(px[i * 3 + c] as f64)));
        }
    }
    Tensor::new([images.len(), 3, h, w], data)
}

/// Foreground masks from logits: class 0 is background, and a pixel is background
/// unless some other class scores strictly higher.
pub fn argmax_masks<T: Element>(logits: &Tensor<T>) -> Result<Vec<BinaryMask>> {
    let [n, c, h, w] = logits.shape();
    let plane = h * w;
    (0..n)
        .map(|s| {
            let x = logits.sample(s);
            BinaryMask::from_fn(h, w, |y, xx| {
                let p = y * w + xx;
                let bg = x[p];
                (1..c).any(|k| x[k * plane + p] > bg)
            })
        })
        .map(Ok)
        .collect()
}

impl<T: Element> Module<T> for Model<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        f(&join(prefix, "input.mean"), &self.input_mean, ParamKind::Buffer);
        f(&join(prefix, "input.std"), &self.input_std, ParamKind::Buffer);
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.ppm.visit(&join(prefix, "ppm"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        f(&join(prefix, "input.mean"), &mut self.input_mean, ParamKind::Buffer);
        f(&join(prefix, "input.std"), &mut self.input_std, ParamKind::Buffer);
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.ppm.visit_mut(&join(prefix, "ppm"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
    }
}
