//! Trimap construction and shared-sampling alpha matting.
//!
//! Matting runs three stages over the unknown band of the trimap:
//!
//! 1. *Gathering*: from each unknown pixel, `rays` equiangular rays are walked outward
//!    and the first `samples_per_ray` known-foreground and known-background pixels hit
//!    on each ray become candidate samples. The candidate pair with the lowest
//!    [`pair_cost`] is kept.
//! 2. *Refinement*: every unknown pixel re-scores the best pairs of its neighbors
//!    (sample sharing) against its own color and adopts the cheapest.
//! 3. *Smoothing*: alpha from the chosen pair is Gaussian-smoothed inside the unknown
//!    band. Known pixels always keep their exact 0 / 1 label.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgproc::{morphology, BinaryMask, ImageF32, MorphOp};

pub const TRIMAP_BACKGROUND: u8 = 0;
pub const TRIMAP_FOREGROUND: u8 = 1;
pub const TRIMAP_UNKNOWN: u8 = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trimap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Trimap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimensions(format!(
                "trimap buffer of {} for {height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > TRIMAP_UNKNOWN) {
            return Err(Error::Data(format!("trimap label {v} not in {{0, 1, 2}}")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn unknown_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == TRIMAP_UNKNOWN).count()
    }
}

/// Per-pixel opacity in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaMatte {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl AlphaMatte {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimensions(format!(
                "alpha buffer of {} for {height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("alpha value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self::new(height, width, vec![value; height * width]).expect("value in [0, 1]")
    }

    pub fn from_mask(mask: &BinaryMask) -> Self {
        Self {
            height: mask.height(),
            width: mask.width(),
            data: mask.as_slice().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Hardens to labels: foreground where `alpha >= 0.5`.
    pub fn to_mask(&self) -> BinaryMask {
        let data = self.data.iter().map(|&a| (a >= 0.5) as u8).collect();
        BinaryMask::new(self.height, self.width, data).expect("binary values")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MattingParams {
    /// Half-width of the unknown band around the mask boundary.
    pub band_radius: usize,
    pub rays: usize,
    pub samples_per_ray: usize,
    /// Side of the square refinement window.
    pub neighborhood: usize,
    /// Gaussian sigma of the final smoothing; 0 disables it.
    pub smooth_sigma: f64,
    /// Weight of the spatial term in [`pair_cost`].
    pub lambda: f64,
}

impl Default for MattingParams {
    fn default() -> Self {
        Self {
            band_radius: 4,
            rays: 8,
            samples_per_ray: 2,
            neighborhood: 5,
            smooth_sigma: 1.0,
            lambda: 0.5,
        }
    }
}

impl MattingParams {
    pub fn validate(&self) -> Result<()> {
        if self.rays < 4 || self.band_radius < 1 || self.samples_per_ray < 1 {
            return Err(Error::InvalidArgument(format!(
                "matting needs rays >= 4, band_radius >= 1, samples_per_ray >= 1: {self:?}"
            )));
        }
        if !(self.smooth_sigma >= 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "smooth_sigma and lambda must be non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Unknown band = `dilate(mask, r) xor erode(mask, r)`; eroded pixels are foreground,
/// pixels outside the dilation are background.
pub fn trimap_from_mask(mask: &BinaryMask, band_radius: usize) -> Result<Trimap> {
    if band_radius < 1 {
        return Err(Error::InvalidArgument("band_radius must be >= 1".into()));
    }
    let dilated = morphology(mask, MorphOp::Dilate, band_radius);
    let eroded = morphology(mask, MorphOp::Erode, band_radius);
    let data = dilated
        .as_slice()
        .iter()
        .zip(eroded.as_slice())
        .map(|(&d, &e)| match (d, e) {
            (_, 1) => TRIMAP_FOREGROUND,
            (1, 0) => TRIMAP_UNKNOWN,
            _ => TRIMAP_BACKGROUND,
        })
        .collect();
    Trimap::new(mask.height(), mask.width(), data)
}

/// Alpha of `c` projected onto the segment from `b` to `f`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairAlpha {
    pub alpha: f64,
    /// Set when `f == b` and the projection is undefined.
    pub low_confidence: bool,
}

pub fn alpha_from_pair(c: [f32; 3], f: [f32; 3], b: [f32; 3]) -> PairAlpha {
    alpha_f64(widen(c), widen(f), widen(b))
}

fn widen(v: [f32; 3]) -> [f64; 3] {
    v.map(f64::from)
}

fn alpha_f64(c: [f64; 3], f: [f64; 3], b: [f64; 3]) -> PairAlpha {
    let fb = sub(f, b);
    let denom = dot(fb, fb);
    if denom == 0.0 {
        let alpha = if c == f { 1.0 } else { 0.5 };
        return PairAlpha {
            alpha,
            low_confidence: true,
        };
    }
    PairAlpha {
        alpha: (dot(sub(c, b), fb) / denom).clamp(0.0, 1.0),
        low_confidence: false,
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

/// Spatial weighting for [`pair_cost`]: `lambda` scales the sample distances, which are
/// normalized by the image `diagonal`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostWeights {
    pub lambda: f64,
    pub diagonal: f64,
}

impl CostWeights {
    pub fn for_image(height: usize, width: usize, lambda: f64) -> Self {
        Self {
            lambda,
            diagonal: ((height * height + width * width) as f64).sqrt(),
        }
    }
}

/// Chromatic distortion of `c` against the best blend of `f` and `b`, plus the
/// normalized distance from `pc` to both samples. Lower is better.
pub fn pair_cost(
    c: [f32; 3],
    f: [f32; 3],
    b: [f32; 3],
    pc: (usize, usize),
    pf: (usize, usize),
    pb: (usize, usize),
    w: CostWeights,
) -> f64 {
    cost_f64(widen(c), widen(f), widen(b), pc, pf, pb, w)
}

fn dist(a: (usize, usize), b: (usize, usize)) -> f64 {
    let dy = a.0 as f64 - b.0 as f64;
    let dx = a.1 as f64 - b.1 as f64;
    (dy * dy + dx * dx).sqrt()
}

fn cost_f64(
    c: [f64; 3],
    f: [f64; 3],
    b: [f64; 3],
    pc: (usize, usize),
    pf: (usize, usize),
    pb: (usize, usize),
    w: CostWeights,
) -> f64 {
    let a = alpha_f64(c, f, b).alpha;
    let blend = [0, 1, 2].map(|i| a * f[i] + (1.0 - a) * b[i]);
    let distortion = norm(sub(c, blend));
    let spatial = (dist(pc, pf) + dist(pc, pb)) / w.diagonal;
    distortion + w.lambda * spatial
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MattingDiagnostics {
    pub unknown_pixels: usize,
    /// Unknown pixels whose rays found no foreground or no background sample.
    pub fallback_pixels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MattingOutput {
    pub alpha: AlphaMatte,
    pub diagnostics: MattingDiagnostics,
}

#[derive(Clone, Copy, Debug)]
struct Sample {
    pos: (usize, usize),
    color: [f64; 3],
}

#[derive(Clone, Copy, Debug)]
struct Pair {
    f: Sample,
    b: Sample,
}

/// Strictly lower cost wins. Exact ties (typical when alpha clamps to 0 or 1 and the
/// distortion no longer depends on one sample) go to the pair with the larger color
/// separation, which keeps selection independent of ray order under mirroring; remaining
/// ties keep the earlier candidate.
fn beats(cost: f64, pair: &Pair, best_cost: f64, best: &Pair) -> bool {
    if cost != best_cost {
        return cost < best_cost;
    }
    let sep = |p: &Pair| {
        let d = sub(p.f.color, p.b.color);
        dot(d, d)
    };
    sep(pair) > sep(best)
}

/// Ray directions `(dy, dx)` rounded so that mirrored angles are exact negations.
fn ray_directions(rays: usize) -> Vec<(f64, f64)> {
    let snap = |v: f64| (v * 1e12).round() / 1e12;
    (0..rays)
        .map(|k| {
            let theta = 2.0 * std::f64::consts::PI * k as f64 / rays as f64;
            (snap(theta.sin()), snap(theta.cos()))
        })
        .collect()
}

struct Context<'a> {
    image: &'a ImageF32,
    trimap: &'a Trimap,
    params: &'a MattingParams,
    weights: CostWeights,
    directions: Vec<(f64, f64)>,
}

impl Context<'_> {
    fn color(&self, (y, x): (usize, usize)) -> [f64; 3] {
        let p = self.image.pixel(y, x);
        [p[0] as f64, p[1] as f64, p[2] as f64]
    }

    /// Candidate samples in ray order, then in order of distance along each ray.
    fn gather(&self, p: (usize, usize)) -> (Vec<Sample>, Vec<Sample>) {
        let (h, w) = (self.trimap.height() as f64, self.trimap.width() as f64);
        let quota = self.params.samples_per_ray;
        let mut fg = Vec::new();
        let mut bg = Vec::new();
        for &(dy, dx) in &self.directions {
            let (mut nf, mut nb) = (0, 0);
            let mut last = p;
            for t in 1.. {
                let fy = (p.0 as f64 + t as f64 * dy).round();
                let fx = (p.1 as f64 + t as f64 * dx).round();
                if fy < 0.0 || fx < 0.0 || fy >= h || fx >= w {
                    break;
                }
                let q = (fy as usize, fx as usize);
                if q == last {
                    continue;
                }
                last = q;
                match self.trimap.get(q.0, q.1) {
                    TRIMAP_FOREGROUND if nf < quota => {
                        fg.push(Sample {
                            pos: q,
                            color: self.color(q),
                        });
                        nf += 1;
                    }
                    TRIMAP_BACKGROUND if nb < quota => {
                        bg.push(Sample {
                            pos: q,
                            color: self.color(q),
                        });
                        nb += 1;
                    }
                    _ => {}
                }
                if nf == quota && nb == quota {
                    break;
                }
            }
        }
        (fg, bg)
    }

    fn cost(&self, p: (usize, usize), c: [f64; 3], pair: &Pair) -> f64 {
        cost_f64(
            c,
            pair.f.color,
            pair.b.color,
            p,
            pair.f.pos,
            pair.b.pos,
            self.weights,
        )
    }

    fn best_gathered(&self, p: (usize, usize)) -> Option<Pair> {
        let (fg, bg) = self.gather(p);
        let c = self.color(p);
        let mut best: Option<(f64, Pair)> = None;
        for f in &fg {
            for b in &bg {
                let pair = Pair { f: *f, b: *b };
                let cost = self.cost(p, c, &pair);
                if best.as_ref().map_or(true, |(bc, bp)| beats(cost, &pair, *bc, bp)) {
                    best = Some((cost, pair));
                }
            }
        }
        best.map(|(_, pair)| pair)
    }

    fn nearest_known(&self, p: (usize, usize)) -> f32 {
        let (h, w) = (self.trimap.height() as i64, self.trimap.width() as i64);
        let (py, px) = (p.0 as i64, p.1 as i64);
        let mut best: Option<(i64, u8)> = None;
        for r in 1..h.max(w) {
            if let Some((d2, _)) = best {
                if r * r > d2 {
                    break;
                }
            }
            for y in (py - r).max(0)..=(py + r).min(h - 1) {
                for x in (px - r).max(0)..=(px + r).min(w - 1) {
                    if (y - py).abs() != r && (x - px).abs() != r {
                        continue;
                    }
                    let label = self.trimap.get(y as usize, x as usize);
                    if label == TRIMAP_UNKNOWN {
                        continue;
                    }
                    let d2 = (y - py).pow(2) + (x - px).pow(2);
                    if best.map_or(true, |(bd, _)| d2 < bd) {
                        best = Some((d2, label));
                    }
                }
            }
        }
        match best {
            Some((_, TRIMAP_FOREGROUND)) => 1.0,
            _ => 0.0,
        }
    }
}

/// Estimates alpha over the unknown band of `trimap`. Deterministic for any thread count.
pub fn shared_matting(
    image: &ImageF32,
    trimap: &Trimap,
    params: &MattingParams,
) -> Result<MattingOutput> {
    params.validate()?;
    let (h, w) = (trimap.height(), trimap.width());
    if !image.same_size(h, w) {
        return Err(Error::Dimensions(format!(
            "image {}x{} vs trimap {h}x{w}",
            image.height(),
            image.width()
        )));
    }
    if image.channels() != 3 {
        return Err(Error::Dimensions("matting needs an RGB image".into()));
    }
    let mut alpha: Vec<f32> = trimap
        .as_slice()
        .iter()
        .map(|&t| if t == TRIMAP_FOREGROUND { 1.0 } else { 0.0 })
        .collect();
    let unknown: Vec<(usize, usize)> = (0..h * w)
        .filter(|&i| trimap.as_slice()[i] == TRIMAP_UNKNOWN)
        .map(|i| (i / w, i % w))
        .collect();
    let mut diagnostics = MattingDiagnostics {
        unknown_pixels: unknown.len(),
        fallback_pixels: 0,
    };
    if unknown.is_empty() {
        return Ok(MattingOutput {
            alpha: AlphaMatte::new(h, w, alpha)?,
            diagnostics,
        });
    }

    let ctx = Context {
        image,
        trimap,
        params,
        weights: CostWeights::for_image(h, w, params.lambda),
        directions: ray_directions(params.rays),
    };

    let gathered: Vec<Option<Pair>> = unknown.par_iter().map(|&p| ctx.best_gathered(p)).collect();
    let mut pair_at: Vec<Option<Pair>> = vec![None; h * w];
    for (&(y, x), pair) in unknown.iter().zip(&gathered) {
        pair_at[y * w + x] = *pair;
    }

    let radius = (params.neighborhood / 2) as i64;
    let refined: Vec<Option<f32>> = unknown
        .par_iter()
        .zip(&gathered)
        .map(|(&p, own)| {
            let own = (*own)?;
            let c = ctx.color(p);
            let mut best = (ctx.cost(p, c, &own), own);
            for y in (p.0 as i64 - radius).max(0)..=(p.0 as i64 + radius).min(h as i64 - 1) {
                for x in (p.1 as i64 - radius).max(0)..=(p.1 as i64 + radius).min(w as i64 - 1)
                {
                    if let Some(pair) = &pair_at[y as usize * w + x as usize] {
                        let cost = ctx.cost(p, c, pair);
                        if beats(cost, pair, best.0, &best.1) {
                            best = (cost, *pair);
                        }
                    }
                }
            }
            Some(alpha_f64(c, best.1.f.color, best.1.b.color).alpha as f32)
        })
        .collect();

    for (&(y, x), a) in unknown.iter().zip(&refined) {
        alpha[y * w + x] = match a {
            Some(a) => *a,
            None => {
                diagnostics.fallback_pixels += 1;
                ctx.nearest_known((y, x))
            }
        };
    }

    if params.smooth_sigma > 0.0 {
        let sigma = params.smooth_sigma;
        let r = (3.0 * sigma).ceil() as i64;
        let kernel: Vec<f64> = (-r..=r)
            .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let source = &alpha;
        let smoothed: Vec<f32> = unknown
            .par_iter()
            .map(|&(py, px)| {
                let (mut acc, mut norm) = (0.0f64, 0.0f64);
                for y in (py as i64 - r).max(0)..=(py as i64 + r).min(h as i64 - 1) {
                    let wy = kernel[(y - py as i64 + r) as usize];
                    for x in (px as i64 - r).max(0)..=(px as i64 + r).min(w as i64 - 1) {
                        let wk = wy * kernel[(x - px as i64 + r) as usize];
                        acc += wk * source[y as usize * w + x as usize] as f64;
                        norm += wk;
                    }
                }
                ((acc / norm) as f32).clamp(0.0, 1.0)
            })
            .collect();
        for (&(y, x), a) in unknown.iter().zip(smoothed) {
            alpha[y * w + x] = a;
        }
    }

    Ok(MattingOutput {
        alpha: AlphaMatte::new(h, w, alpha)?,
        diagnostics,
    })
}

/// Keying-to-matte convenience: trimap from `mask` with `params.band_radius`, then matting.
pub fn matte_from_mask(
    image: &ImageF32,
    mask: &BinaryMask,
    params: &MattingParams,
) -> Result<MattingOutput> {
    let trimap = trimap_from_mask(mask, params.band_radius)?;
    shared_matting(image, &trimap, params)
}
