use rayon::prelude::*;

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Channel-wise softmax at every pixel.
pub fn softmax_channels<T: Element>(logits: &Tensor<T>) -> Tensor<T> {
    let (c, plane) = (logits.c(), logits.plane());
    let mut out = Tensor::zeros(logits.shape());
    out.data_mut()
        .par_chunks_mut(c * plane)
        .zip(logits.data().par_chunks(c * plane))
        .for_each(|(dst, src)| {
            for p in 0..plane {
                let max = (0..c).map(|k| src[k * plane + p].f64()).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..c).map(|k| (src[k * plane + p].f64() - max).exp()).sum();
                for k in 0..c {
                    dst[k * plane + p] = T::of((src[k * plane + p].f64() - max).exp() / z);
                }
            }
        });
    out
}

/// Mean over pixels of `w[y] * -log softmax(logits)[y]`, with its gradient wrt the logits.
///
/// `labels` holds one class index per pixel in NHW order.
pub fn weighted_cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[u8], weights: &[f64]) -> Result<(f64, Tensor<T>)> {
    let [n, c, h, w] = logits.shape();
    let plane = h * w;
    if labels.len() != n * plane {
        return Err(Error::Dimensions(format!(
            "{} labels for logits {:?}",
            labels.len(),
            logits.shape()
        )));
    }
    if weights.len() != c {
        return Err(Error::Dimensions(format!("{} class weights for {c} classes", weights.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::InvalidArgument(format!("label {bad} outside {c} classes")));
    }
    let count = (n * plane) as f64;
    let mut grad = Tensor::zeros(logits.shape());
    let losses: Vec<f64> = grad
        .data_mut()
        .par_chunks_mut(c * plane)
        .zip(logits.data().par_chunks(c * plane))
        .zip(labels.par_chunks(plane))
        .map(|((dst, src), lab)| {
            let mut total = 0.0;
            for p in 0..plane {
                let y = lab[p] as usize;
                let max = (0..c).map(|k| src[k * plane + p].f64()).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..c).map(|k| (src[k * plane + p].f64() - max).exp()).sum();
                let lse = max + z.ln();
                total += weights[y] * (lse - src[y * plane + p].f64());
                for k in 0..c {
                    let prob = (src[k * plane + p].f64() - lse).exp();
                    let onehot = if k == y { 1.0 } else { 0.0 };
                    dst[k * plane + p] = T::of(weights[y] * (prob - onehot) / count);
                }
            }
            total
        })
        .collect();
    Ok((losses.iter().sum::<f64>() / count, grad))
}
