use rayon::prelude::*;

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Max-pooling output plus, per output element, the flat in-plane index of its source.
#[derive(Clone, Debug)]
pub struct MaxPoolOutput<T> {
    pub y: Tensor<T>,
    pub argmax: Vec<u32>,
}

/// Max pooling with implicit `-inf` padding; ties keep the first element in scan order.
pub fn max_pool2d<T: Element>(x: &Tensor<T>, kernel: usize, stride: usize, pad: usize) -> Result<MaxPoolOutput<T>> {
    if kernel == 0 || stride == 0 || pad >= kernel {
        return Err(Error::InvalidArgument(format!(
            "max pool kernel {kernel} stride {stride} pad {pad}"
        )));
    }
    let [n, c, h, w] = x.shape();
    let out = |len: usize| (len + 2 * pad).checked_sub(kernel).map(|v| v / stride + 1);
    let (Some(ho), Some(wo)) = (out(h), out(w)) else {
        return Err(Error::Dimensions(format!("input {:?} smaller than pool kernel", x.shape())));
    };
    let planes: Vec<(Vec<T>, Vec<u32>)> = x
        .data()
        .par_chunks(h * w)
        .map(|src| {
            let mut vals = Vec::with_capacity(ho * wo);
            let mut idx = Vec::with_capacity(ho * wo);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best: Option<(T, usize)> = None;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            let i = iy as usize * w + ix as usize;
                            if best.is_none_or(|(b, _)| src[i] > b) {
                                best = Some((src[i], i));
                            }
                        }
                    }
                    let (v, i) = best.expect("pad < kernel keeps a real tap in every window");
                    vals.push(v);
                    idx.push(i as u32);
                }
            }
            (vals, idx)
        })
        .collect();
    let (vals, idx): (Vec<Vec<T>>, Vec<Vec<u32>>) = planes.into_iter().unzip();
    Ok(MaxPoolOutput {
        y: Tensor::new([n, c, ho, wo], vals.concat())?,
        argmax: idx.concat(),
    })
}

pub fn max_pool2d_backward<T: Element>(argmax: &[u32], dy: &Tensor<T>, input_shape: [usize; 4]) -> Result<Tensor<T>> {
    if argmax.len() != dy.len() || dy.n() != input_shape[0] || dy.c() != input_shape[1] {
        return Err(Error::Dimensions("max pool gradient does not match its forward pass".into()));
    }
    let mut dx = Tensor::zeros(input_shape);
    let (in_plane, out_plane) = (input_shape[2] * input_shape[3], dy.plane());
    dx.data_mut()
        .par_chunks_mut(in_plane)
        .enumerate()
        .for_each(|(p, dst)| {
            let r = p * out_plane..(p + 1) * out_plane;
            for (&i, &g) in argmax[r.clone()].iter().zip(&dy.data()[r]) {
                dst[i as usize] = dst[i as usize] + g;
            }
        });
    Ok(dx)
}

/// Adaptive window `[floor(i*L/n), ceil((i+1)*L/n))`.
fn bin(i: usize, len: usize, n: usize) -> (usize, usize) {
    (i * len / n, ((i + 1) * len).div_ceil(n))
}

pub fn adaptive_avg_pool2d<T: Element>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    if oh == 0 || ow == 0 || oh > h || ow > w {
        return Err(Error::Dimensions(format!(
            "adaptive pool to {oh}x{ow} from {h}x{w}"
        )));
    }
    let planes: Vec<Vec<T>> = x
        .data()
        .par_chunks(h * w)
        .map(|src| {
            let mut out = Vec::with_capacity(oh * ow);
            for i in 0..oh {
                let (y0, y1) = bin(i, h, oh);
                for j in 0..ow {
                    let (x0, x1) = bin(j, w, ow);
                    let s: f64 = (y0..y1)
                        .flat_map(|y| src[y * w + x0..y * w + x1].iter())
                        .map(|v| v.f64())
                        .sum();
                    out.push(T::of(s / ((y1 - y0) * (x1 - x0)) as f64));
                }
            }
            out
        })
        .collect();
    Tensor::new([n, c, oh, ow], planes.concat())
}

pub fn adaptive_avg_pool2d_backward<T: Element>(dy: &Tensor<T>, input_shape: [usize; 4]) -> Result<Tensor<T>> {
    let [n, c, h, w] = input_shape;
    let (oh, ow) = (dy.h(), dy.w());
    if dy.n() != n || dy.c() != c || oh == 0 || ow == 0 || oh > h || ow > w {
        return Err(Error::Dimensions("adaptive pool gradient does not match its forward pass".into()));
    }
    let mut dx = Tensor::zeros(input_shape);
    dx.data_mut()
        .par_chunks_mut(h * w)
        .zip(dy.data().par_chunks(oh * ow))
        .for_each(|(dst, g)| {
            for i in 0..oh {
                let (y0, y1) = bin(i, h, oh);
                for j in 0..ow {
                    let (x0, x1) = bin(j, w, ow);
                    let share = T::of(1.0 / ((y1 - y0) * (x1 - x0)) as f64) * g[i * ow + j];
                    for y in y0..y1 {
                        for v in &mut dst[y * w + x0..y * w + x1] {
                            *v = *v + share;
                        }
                    }
                }
            }
        });
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::test_util::{check_grad, rand_tensor};

    #[test]
    fn max_pool_picks_window_maximum() {
        let x = Tensor::<f32>::from_fn([1, 1, 4, 4], |i| i as f32);
        let out = max_pool2d(&x, 3, 2, 1).unwrap();
        assert_eq!(out.y.shape(), [1, 1, 2, 2]);
        assert_eq!(out.y.data(), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn max_pool_ties_route_to_first() {
        let x = Tensor::<f32>::filled([1, 1, 2, 2], 1.0);
        let out = max_pool2d(&x, 2, 2, 0).unwrap();
        assert_eq!(out.argmax, vec![0]);
        let dx = max_pool2d_backward(&out.argmax, &Tensor::filled([1, 1, 1, 1], 1.0), x.shape()).unwrap();
        assert_eq!(dx.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_gradient() {
        // distinct values keep finite differences away from ties
        let x = Tensor::<f64>::from_fn([2, 2, 7, 6], |i| ((i * 37) % 84) as f64 * 0.1);
        let out = max_pool2d(&x, 3, 2, 1).unwrap();
        let r = rand_tensor::<f64>(out.y.shape(), 1);
        let dx = max_pool2d_backward(&out.argmax, &r, x.shape()).unwrap();
        let proj = |t: &Tensor<f64>| -> f64 { t.data().iter().zip(r.data()).map(|(a, b)| a * b).sum() };
        check_grad(&x, dx.data(), 1e-4, 1e-5, |xp| proj(&max_pool2d(xp, 3, 2, 1).unwrap().y));
    }

    #[test]
    fn adaptive_pool_of_constant_is_constant() {
        let x = Tensor::<f32>::filled([1, 2, 7, 5], 2.5);
        for (oh, ow) in [(1, 1), (2, 2), (3, 3), (6, 5)] {
            let y = adaptive_avg_pool2d(&x, oh, ow).unwrap();
            assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-6));
        }
    }

    #[test]
    fn adaptive_pool_bins_overlap_like_reference() {
        // 5 -> 3 bins: [0,2) [1,4) [3,5)
        assert_eq!(bin(0, 5, 3), (0, 2));
        assert_eq!(bin(1, 5, 3), (1, 4));
        assert_eq!(bin(2, 5, 3), (3, 5));
        let x = Tensor::<f64>::new([1, 1, 1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let y = adaptive_avg_pool2d(&x, 1, 3).unwrap();
        assert_eq!(y.data(), &[1.5, 3.0, 4.5]);
    }

    #[test]
    fn adaptive_pool_gradient() {
        for (oh, ow) in [(1, 1), (2, 3), (3, 3)] {
            let x = rand_tensor::<f64>([2, 2, 7, 5], 2);
            let y = adaptive_avg_pool2d(&x, oh, ow).unwrap();
            let r = rand_tensor::<f64>(y.shape(), 3);
            let dx = adaptive_avg_pool2d_backward(&r, x.shape()).unwrap();
            let proj = |t: &Tensor<f64>| -> f64 { t.data().iter().zip(r.data()).map(|(a, b)| a * b).sum() };
            check_grad(&x, dx.data(), 1e-6, 1e-6, |xp| proj(&adaptive_avg_pool2d(xp, oh, ow).unwrap()));
            let dx32 = adaptive_avg_pool2d_backward(&r.cast::<f32>(), x.shape()).unwrap();
            check_grad(&x, dx32.data(), 1e-3, 1e-3, |xp| proj(&adaptive_avg_pool2d(xp, oh, ow).unwrap()));
        }
    }
}
