//! IoU scoring and inference latency measurement.
//!
//! Scores are reported two ways: dataset-level IoU from the confusion matrix summed
//! over all images (the primary figure) and the mean of per-image IoUs.

use std::ops::{Add, AddAssign};
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgproc::{io, BinaryMask, ImageF32};
use crate::nn::Tensor;
use crate::synth::Sample;
use crate::thundernet::{image_batch, Model};

/// Pixel counts with the human class as positive.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// The same counts with background as the positive class.
    pub fn flipped(&self) -> Self {
        Self {
            tp: self.tn,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tp,
        }
    }

    pub fn iou_human(&self) -> Iou {
        iou(self)
    }

    pub fn iou_background(&self) -> Iou {
        iou(&self.flipped())
    }
}

impl Add for ConfusionMatrix {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionMatrix {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionMatrix {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionMatrix> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::Dimensions(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let mut m = ConfusionMatrix::default();
    for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
        match (p, g) {
            (1, 1) => m.tp += 1,
            (1, _) => m.fp += 1,
            (_, 1) => m.fn_ += 1,
            _ => m.tn += 1,
        }
    }
    Ok(m)
}

/// An IoU value; `empty_union` marks the 0/0 case, scored as 1.0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Iou {
    pub value: f64,
    pub empty_union: bool,
}

pub fn iou(m: &ConfusionMatrix) -> Iou {
    let union = m.tp + m.fp + m.fn_;
    if union == 0 {
        Iou {
            value: 1.0,
            empty_union: true,
        }
    } else {
        Iou {
            value: m.tp as f64 / union as f64,
            empty_union: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub background: f64,
    pub human: f64,
    pub mean: f64,
}

impl ClassIou {
    fn new(background: f64, human: f64) -> Self {
        Self {
            background,
            human,
            mean: 0.5 * (background + human),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub pixels: u64,
    pub confusion: ConfusionMatrix,
    /// IoU of the summed confusion matrix.
    pub dataset: ClassIou,
    /// Mean of per-image IoUs (empty unions count as 1.0).
    pub per_image_mean: ClassIou,
    pub empty_union_background: usize,
    pub empty_union_human: usize,
}

/// Scores paired prediction and ground-truth masks.
pub fn evaluate_masks(preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<EvalReport> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "need equal non-empty mask lists, got {} and {}",
            preds.len(),
            gts.len()
        )));
    }
    let per_image = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| confusion(p, g))
        .collect::<Result<Vec<_>>>()?;
    let total: ConfusionMatrix = per_image.iter().copied().sum();
    let n = per_image.len() as f64;
    let (mut bg_sum, mut fg_sum, mut bg_empty, mut fg_empty) = (0.0, 0.0, 0, 0);
    for m in &per_image {
        let (b, f) = (m.iou_background(), m.iou_human());
        bg_sum += b.value;
        fg_sum += f.value;
        bg_empty += b.empty_union as usize;
        fg_empty += f.empty_union as usize;
    }
    Ok(EvalReport {
        images: per_image.len(),
        pixels: total.total(),
        confusion: total,
        dataset: ClassIou::new(total.iou_background().value, total.iou_human().value),
        per_image_mean: ClassIou::new(bg_sum / n, fg_sum / n),
        empty_union_background: bg_empty,
        empty_union_human: fg_empty,
    })
}

/// Eval-mode predictions for `samples`, which must already be at a valid model size.
pub fn predict_samples(model: &Model<f32>, samples: &[Sample], batch_size: usize) -> Result<Vec<BinaryMask>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size) {
        let images: Vec<&ImageF32> = chunk.iter().map(|s| &s.image).collect();
        out.extend(model.predict(&image_batch(&images)?)?);
    }
    Ok(out)
}

/// Runs the model over `samples` and scores its masks; also returns the predictions.
pub fn evaluate(
    model: &Model<f32>,
    samples: &[Sample],
    batch_size: usize,
) -> Result<(EvalReport, Vec<BinaryMask>)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("evaluation split is empty".into()));
    }
    let preds = predict_samples(model, samples, batch_size)?;
    let gts: Vec<BinaryMask> = samples.iter().map(|s| s.mask.clone()).collect();
    Ok((evaluate_masks(&preds, &gts)?, preds))
}

/// Prediction blended over the image: human pixels are mixed 50/50 with red.
pub fn overlay(image: &ImageF32, pred: &BinaryMask) -> Result<ImageF32> {
    if image.channels() != 3 || !image.same_size(pred.height(), pred.width()) {
        return Err(Error::Dimensions("overlay needs an RGB image matching the mask".into()));
    }
    const TINT: [f32; 3] = [1.0, 0.0, 0.0];
    let mut out = image.clone();
    for (px, &m) in out.as_mut_slice().chunks_exact_mut(3).zip(pred.as_slice()) {
        if m == 1 {
            for (v, t) in px.iter_mut().zip(TINT) {
                *v = 0.5 * *v + 0.5 * t;
            }
        }
    }
    Ok(out)
}

/// Writes `<id>.png` overlays into `dir`.
pub fn write_overlays(dir: &Path, samples: &[Sample], preds: &[BinaryMask]) -> Result<()> {
    for (s, p) in samples.iter().zip(preds) {
        io::write_rgb(&dir.join(format!("{}.png", s.id)), &overlay(&s.image, p)?.to_u8()?)?;
    }
    Ok(())
}

/// Published single-GPU latency at 720 x 720, carried in reports for comparison only.
pub const REFERENCE_GPU_MS_720: f64 = 16.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub input_size: usize,
    pub warmup_iters: usize,
    pub timed_iters: usize,
    pub per_iter_ms: Vec<f64>,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub mean_ms: f64,
    pub threads: usize,
    pub reference_gpu_ms_720: f64,
}

impl LatencyReport {
    pub fn from_timings(input_size: usize, warmup_iters: usize, per_iter_ms: Vec<f64>) -> Result<Self> {
        if per_iter_ms.is_empty() || per_iter_ms.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument("timings must be non-empty and finite".into()));
        }
        let mut sorted = per_iter_ms.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median_ms = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        // Nearest-rank percentile.
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        Ok(Self {
            input_size,
            warmup_iters,
            timed_iters: n,
            mean_ms: sorted.iter().sum::<f64>() / n as f64,
            median_ms,
            p95_ms: sorted[rank - 1],
            per_iter_ms,
            threads: rayon::current_num_threads(),
            reference_gpu_ms_720: REFERENCE_GPU_MS_720,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Times single-image eval-mode forward passes on one fixed random input.
pub fn benchmark_inference(
    model: &Model<f32>,
    size: usize,
    warmup: usize,
    iters: usize,
) -> Result<LatencyReport> {
    if iters < 10 {
        return Err(Error::InvalidArgument(format!("need at least 10 timed iterations, got {iters}")));
    }
    model.config().check_size(size)?;
    let mut rng = crate::rng::stream(model.config().seed, &[0x6265_6e63, size as u64]);
    let x = Tensor::<f32>::from_fn([1, 3, size, size], |_| rng.gen::<f32>());
    for _ in 0..warmup {
        std::hint::black_box(model.infer(&x)?);
    }
    let mut times = Vec::with_capacity(iters);
    for _ in 0..iters {
        let start = Instant::now();
        std::hint::black_box(model.infer(&x)?);
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    LatencyReport::from_timings(size, warmup, times)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(h: usize, w: usize, y0: usize, x0: usize, size: usize) -> BinaryMask {
        BinaryMask::from_fn(h, w, |y, x| (y0..y0 + size).contains(&y) && (x0..x0 + size).contains(&x))
    }

    #[test]
    fn confusion_examples() {
        let ones = BinaryMask::ones(3, 4);
        let m = confusion(&ones, &ones).unwrap();
        assert_eq!(m, ConfusionMatrix { tp: 12, ..Default::default() });
        let gt = block(4, 4, 0, 0, 2);
        let m = confusion(&gt.complement(), &gt).unwrap();
        assert_eq!((m.tp, m.tn), (0, 0));
        let m = confusion(&block(4, 4, 0, 1, 2), &gt).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_, m.tn), (2, 2, 2, 10));
        assert!((iou(&m).value - 1.0 / 3.0).abs() < 1e-15);
        assert!(confusion(&ones, &BinaryMask::ones(4, 3)).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = block(5, 5, 1, 1, 2);
        assert_eq!(iou(&confusion(&a, &a).unwrap()).value, 1.0);
        assert_eq!(iou(&confusion(&a, &block(5, 5, 3, 3, 2)).unwrap()).value, 0.0);
        let empty = BinaryMask::zeros(5, 5);
        let e = iou(&confusion(&empty, &empty).unwrap());
        assert!(e.empty_union && e.value == 1.0);
    }

    #[test]
    fn dataset_and_per_image_conventions_differ() {
        let gts = vec![block(4, 4, 0, 0, 2), block(4, 4, 0, 0, 4)];
        let preds = vec![block(4, 4, 0, 0, 1), gts[1].clone()];
        let r = evaluate_masks(&preds, &gts).unwrap();
        assert_eq!(r.confusion.tp, 17);
        assert!((r.dataset.human - 17.0 / 20.0).abs() < 1e-15);
        assert!((r.per_image_mean.human - 0.5 * (0.25 + 1.0)).abs() < 1e-15);
        assert_eq!(r.pixels, 32);
    }

    #[test]
    fn oracle_and_constant_predictors() {
        let gts = vec![block(6, 6, 1, 1, 3), BinaryMask::zeros(6, 6)];
        let r = evaluate_masks(&gts, &gts).unwrap();
        assert_eq!((r.dataset.background, r.dataset.human), (1.0, 1.0));
        assert_eq!(r.empty_union_human, 1);
        let bg = vec![BinaryMask::zeros(6, 6); 2];
        assert_eq!(evaluate_masks(&bg, &gts).unwrap().dataset.human, 0.0);
    }

    #[test]
    fn latency_statistics() {
        let r = LatencyReport::from_timings(96, 2, (1..=10).rev().map(f64::from).collect()).unwrap();
        assert_eq!(r.timed_iters, 10);
        assert_eq!(r.median_ms, 5.5);
        assert_eq!(r.p95_ms, 10.0);
        assert!(r.median_ms <= r.p95_ms);
        let back: LatencyReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn overlay_tints_only_predicted_pixels() {
        let img = ImageF32::filled(2, 2, &[0.2, 0.4, 0.6]);
        let o = overlay(&img, &block(2, 2, 0, 0, 1)).unwrap();
        assert_eq!(o.rgb(0, 0), [0.6, 0.2, 0.3]);
        assert_eq!(o.rgb(1, 1), [0.2, 0.4, 0.6]);
    }
}
