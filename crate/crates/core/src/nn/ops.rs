use rayon::prelude::*;

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// NaN inputs stay NaN so divergence is not masked.
pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() || v.is_nan() { v } else { T::zero() })
}

/// Gradient of ReLU given its output `y` (positive exactly where the input was).
pub fn relu_backward<T: Element>(y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(y, dy)?;
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(y.shape(), data)
}

fn same_shape<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimensions(format!("shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b)?;
    Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect())
}

pub fn add_assign<T: Element>(a: &mut Tensor<T>, b: &Tensor<T>) -> Result<()> {
    same_shape(a, b)?;
    for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
        *x = *x + y;
    }
    Ok(())
}

/// Channel-axis concatenation.
pub fn concat_channels<T: Element>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    let [n, _, h, w] = first.shape();
    if parts.iter().any(|p| p.n() != n || p.h() != h || p.w() != w) {
        return Err(Error::Dimensions("concat inputs differ in batch or spatial size".into()));
    }
    let c: usize = parts.iter().map(|p| p.c()).sum();
    let mut data = Vec::with_capacity(n * c * h * w);
    for s in 0..n {
        for p in parts {
            data.extend_from_slice(p.sample(s));
        }
    }
    Tensor::new([n, c, h, w], data)
}

/// Inverse of [`concat_channels`]: splits a gradient into per-part channel counts.
pub fn split_channels<T: Element>(x: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    if sizes.iter().sum::<usize>() != x.c() {
        return Err(Error::Dimensions(format!("split {sizes:?} of {} channels", x.c())));
    }
    let plane = x.plane();
    let mut offset = 0;
    let mut out = Vec::with_capacity(sizes.len());
    for &c in sizes {
        let mut data = Vec::with_capacity(x.n() * c * plane);
        for s in 0..x.n() {
            data.extend_from_slice(&x.sample(s)[offset * plane..(offset + c) * plane]);
        }
        out.push(Tensor::new([x.n(), c, x.h(), x.w()], data)?);
        offset += c;
    }
    Ok(out)
}

/// Source taps of one output coordinate under half-pixel (`align_corners = false`) mapping.
#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    l1: f64,
}

fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            Tap { i0, i1, l1: src - i0 as f64 }
        })
        .collect()
}

/// Bilinear resize of every plane with `align_corners = false` semantics.
pub fn upsample_bilinear<T: Element>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    if oh == 0 || ow == 0 || h == 0 || w == 0 {
        return Err(Error::Dimensions(format!("bilinear resize {h}x{w} -> {oh}x{ow}")));
    }
    let (ty, tx) = (taps(h, oh), taps(w, ow));
    let mut y = Tensor::zeros([n, c, oh, ow]);
    y.data_mut()
        .par_chunks_mut(oh * ow)
        .zip(x.data().par_chunks(h * w))
        .for_each(|(dst, src)| {
            for (oy, t) in ty.iter().enumerate() {
                let (r0, r1) = (&src[t.i0 * w..(t.i0 + 1) * w], &src[t.i1 * w..(t.i1 + 1) * w]);
                for (ox, s) in tx.iter().enumerate() {
                    let top = r0[s.i0].f64() * (1.0 - s.l1) + r0[s.i1].f64() * s.l1;
                    let bottom = r1[s.i0].f64() * (1.0 - s.l1) + r1[s.i1].f64() * s.l1;
                    dst[oy * ow + ox] = T::of(top * (1.0 - t.l1) + bottom * t.l1);
                }
            }
        });
    Ok(y)
}

pub fn upsample_bilinear_backward<T: Element>(dy: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let [n, c, oh, ow] = dy.shape();
    if h == 0 || w == 0 {
        return Err(Error::Dimensions("bilinear gradient to an empty input".into()));
    }
    let (ty, tx) = (taps(h, oh), taps(w, ow));
    let mut dx = Tensor::zeros([n, c, h, w]);
    dx.data_mut()
        .par_chunks_mut(h * w)
        .zip(dy.data().par_chunks(oh * ow))
        .for_each(|(dst, g)| {
            let mut acc = vec![0.0f64; h * w];
            for (oy, t) in ty.iter().enumerate() {
                for (ox, s) in tx.iter().enumerate() {
                    let v = g[oy * ow + ox].f64();
                    let (a, b) = (v * (1.0 - t.l1), v * t.l1);
                    acc[t.i0 * w + s.i0] += a * (1.0 - s.l1);
                    acc[t.i0 * w + s.i1] += a * s.l1;
                    acc[t.i1 * w + s.i0] += b * (1.0 - s.l1);
                    acc[t.i1 * w + s.i1] += b * s.l1;
                }
            }
            for (d, a) in dst.iter_mut().zip(acc) {
                *d = T::of(a);
            }
        });
    Ok(dx)
}
