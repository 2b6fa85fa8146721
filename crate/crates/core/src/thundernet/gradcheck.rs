use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use super::{Model, ModelConfig};
use crate::error::Result;
use crate::nn::{relative_error, weighted_cross_entropy, Module, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGradCheckOptions {
    pub batch: usize,
    /// Elements probed per parameter tensor (all of them when the tensor is smaller).
    pub probes_per_tensor: usize,
    pub input_probes: usize,
    pub eps: f64,
    pub seed: u64,
    pub class_weights: [f64; 2],
    /// Re-draws the classifier weights at He scale; the tiny default head init would
    /// otherwise shrink every upstream gradient toward the finite-difference noise floor.
    pub he_head: bool,
    /// A probe whose central difference misses by more than this, but whose analytic
    /// value matches one one-sided difference within it, straddles a ReLU kink or a
    /// max-pool switch and is excluded (and counted).
    pub kink_tolerance: f64,
}

impl Default for ModelGradCheckOptions {
    fn default() -> Self {
        Self {
            batch: 4,
            probes_per_tensor: 8,
            input_probes: 16,
            eps: 1e-5,
            seed: 0,
            class_weights: [0.56, 3.27],
            he_head: true,
            kink_tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGradCheck {
    pub max_rel_err: f64,
    /// `name[index]` of the worst probe.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub probes: usize,
    pub kinks_excluded: usize,
    /// Worst error per tensor, in visiting order (`input` first).
    pub per_tensor: Vec<(String, f64)>,
}

struct Probe {
    tensor: usize,
    index: usize,
}

/// Compares the analytic gradient of the weighted cross-entropy loss of a training-mode
/// forward pass against central differences, in `f64`, for sampled elements of every
/// trainable tensor and of the input batch.
pub fn model_grad_check(cfg: &ModelConfig, opts: &ModelGradCheckOptions) -> Result<ModelGradCheck> {
    let mut model = Model::<f64>::new(cfg.clone())?;
    if opts.he_head {
        let w = &mut model.decoder.head.weight;
        let std = (2.0 / w.c() as f64).sqrt();
        let normal = rand_distr::Normal::new(0.0, std).expect("finite std");
        let mut rng = crate::rng::stream(opts.seed, &[3]);
        w.data_mut().iter_mut().for_each(|v| *v = rng.sample(normal));
    }
    let s = cfg.input_size;
    let mut rng = crate::rng::stream(opts.seed, &[1]);
    let x = Tensor::<f64>::from_fn([opts.batch, 3, s, s], |_| rng.gen_range(0.0..1.0));
    // a centred disc per image, shifted per sample so the batch is not degenerate
    let labels: Vec<u8> = (0..opts.batch * s * s)
        .map(|i| {
            let (n, p) = (i / (s * s), i % (s * s));
            let (y, xx) = ((p / s) as f64, (p % s) as f64);
            let c = s as f64 / 2.0 + n as f64 * 2.0;
            ((y - c).powi(2) + (xx - c).powi(2) < (s as f64 / 3.0).powi(2)) as u8
        })
        .collect();
    let w = opts.class_weights;
    let loss = |m: &Model<f64>, input: &Tensor<f64>| -> Result<f64> {
        let (logits, _) = m.clone().forward_train(input)?;
        Ok(weighted_cross_entropy(&logits, &labels, &w)?.0)
    };

    let mut analytic_model = model.clone();
    let (logits, cache) = analytic_model.forward_train(&x)?;
    let (_, dlogits) = weighted_cross_entropy(&logits, &labels, &w)?;
    let dx = analytic_model
        .backward(&cache, &dlogits, true)?
        .expect("input gradient requested");

    // tensor 0 is the input; the rest are trainable parameters in visiting order
    let mut names = vec!["input".to_string()];
    let mut grads: Vec<Vec<f64>> = vec![dx.data().to_vec()];
    analytic_model.visit("", &mut |name, t, kind| {
        if kind.trainable() {
            names.push(name.to_string());
            grads.push(t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]));
        }
    });
    let mut probes = Vec::new();
    for (k, g) in grads.iter().enumerate() {
        let want = if k == 0 { opts.input_probes } else { opts.probes_per_tensor };
        let mut rng = crate::rng::stream(opts.seed, &[2, k as u64]);
        let mut idx: Vec<usize> = if g.len() <= want {
            (0..g.len()).collect()
        } else {
            sample(&mut rng, g.len(), want).into_vec()
        };
        idx.sort_unstable();
        probes.extend(idx.into_iter().map(|index| Probe { tensor: k, index }));
    }

    // returns (loss, perturbed value, original value)
    let perturbed = |p: &Probe, delta: f64| -> Result<(f64, f64, f64)> {
        if p.tensor == 0 {
            let mut xp = x.clone();
            let old = xp.data()[p.index];
            xp.data_mut()[p.index] = old + delta;
            return Ok((loss(&model, &xp)?, old + delta, old));
        }
        let mut m = model.clone();
        let mut seen = 0;
        let (mut old, mut new) = (0.0, 0.0);
        m.visit_mut("", &mut |_, t, kind| {
            if kind.trainable() {
                seen += 1;
                if seen == p.tensor {
                    old = t.data()[p.index];
                    t.data_mut()[p.index] = old + delta;
                    new = t.data()[p.index];
                }
            }
        });
        Ok((loss(&m, &x)?, new, old))
    };
    let f0 = loss(&model, &x)?;
    // (relative error, analytic, numeric, kink)
    let results: Vec<(f64, f64, f64, bool)> = probes
        .par_iter()
        .map(|p| -> Result<(f64, f64, f64, bool)> {
            let (fp, vp, v0) = perturbed(p, opts.eps)?;
            let (fm, vm, _) = perturbed(p, -opts.eps)?;
            let numeric = (fp - fm) / (vp - vm);
            let a = grads[p.tensor][p.index];
            let err = relative_error(a, numeric);
            let one_sided = relative_error(a, (fp - f0) / (vp - v0)).min(relative_error(a, (f0 - fm) / (v0 - vm)));
            let kink = err >= opts.kink_tolerance && one_sided < opts.kink_tolerance;
            Ok((err, a, numeric, kink))
        })
        .collect::<Result<_>>()?;

    let mut per_tensor: Vec<(String, f64)> = names.iter().map(|n| (n.clone(), 0.0)).collect();
    let mut out = ModelGradCheck {
        max_rel_err: 0.0,
        worst: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        probes: probes.len(),
        kinks_excluded: results.iter().filter(|r| r.3).count(),
        per_tensor: Vec::new(),
    };
    for (p, &(err, a, n, _)) in probes.iter().zip(&results).filter(|(_, r)| !r.3) {
        let slot = &mut per_tensor[p.tensor].1;
        *slot = slot.max(err);
        if err > out.max_rel_err || out.worst.is_empty() {
            out.max_rel_err = err;
            out.worst = format!("{}[{}]", names[p.tensor], p.index);
            out.analytic = a;
            out.numeric = n;
        }
    }
    out.per_tensor = per_tensor;
    Ok(out)
}
