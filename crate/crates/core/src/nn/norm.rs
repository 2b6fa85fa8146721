use rayon::prelude::*;

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Saved state from a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<f64>,
}

/// Training-mode output together with the batch statistics used.
#[derive(Clone, Debug)]
pub struct BnTrainOutput<T> {
    pub y: Tensor<T>,
    pub cache: BnCache<T>,
    pub mean: Vec<f64>,
    /// Biased (1/M) batch variance.
    pub var: Vec<f64>,
}

fn check_params<T>(x: &Tensor<T>, params: &[&[T]]) -> Result<()>
where
    T: Element,
{
    for p in params {
        if p.len() != x.c() {
            return Err(Error::Dimensions(format!(
                "batch norm parameter of length {} for {} channels",
                p.len(),
                x.c()
            )));
        }
    }
    Ok(())
}

/// Per-channel (sum, sum of squares about the mean) in f64.
fn channel_moments<T: Element>(x: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let (c, plane, m) = (x.c(), x.plane(), (x.n() * x.plane()) as f64);
    let stats: Vec<(f64, f64)> = (0..c)
        .into_par_iter()
        .map(|ch| {
            let values = || (0..x.n()).flat_map(move |n| x.sample(n)[ch * plane..(ch + 1) * plane].iter());
            let mean = values().map(|v| v.f64()).sum::<f64>() / m;
            let var = values().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / m;
            (mean, var)
        })
        .collect();
    stats.into_iter().unzip()
}

fn per_channel<T: Element>(x: &Tensor<T>, f: impl Fn(usize, T) -> T + Sync) -> Tensor<T> {
    let (c, plane) = (x.c(), x.plane());
    let mut out = Tensor::zeros(x.shape());
    out.data_mut()
        .par_chunks_mut(plane.max(1))
        .zip(x.data().par_chunks(plane.max(1)))
        .enumerate()
        .for_each(|(i, (o, src))| {
            let ch = i % c;
            for (d, &v) in o.iter_mut().zip(src) {
                *d = f(ch, v);
            }
        });
    out
}

pub fn batch_norm_train<T: Element>(x: &Tensor<T>, gamma: &[T], beta: &[T], eps: f64) -> Result<BnTrainOutput<T>> {
    check_params(x, &[gamma, beta])?;
    if x.n() * x.plane() == 0 {
        return Err(Error::Dimensions(format!("batch norm over empty input {:?}", x.shape())));
    }
    let (mean, var) = channel_moments(x);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let xhat = per_channel(x, |ch, v| T::of((v.f64() - mean[ch]) * inv_std[ch]));
    let y = per_channel(&xhat, |ch, v| v * gamma[ch] + beta[ch]);
    Ok(BnTrainOutput {
        y,
        cache: BnCache { xhat, inv_std },
        mean,
        var,
    })
}

pub fn batch_norm_eval<T: Element>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: f64,
) -> Result<Tensor<T>> {
    check_params(x, &[gamma, beta, running_mean, running_var])?;
    let scale: Vec<f64> = (0..x.c())
        .map(|ch| gamma[ch].f64() / (running_var[ch].f64() + eps).sqrt())
        .collect();
    let shift: Vec<f64> = (0..x.c())
        .map(|ch| beta[ch].f64() - running_mean[ch].f64() * scale[ch])
        .collect();
    let (scale, shift): (Vec<T>, Vec<T>) = (
        scale.into_iter().map(T::of).collect(),
        shift.into_iter().map(T::of).collect(),
    );
    Ok(per_channel(x, |ch, v| v * scale[ch] + shift[ch]))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward<T: Element>(cache: &BnCache<T>, gamma: &[T], dy: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let xhat = &cache.xhat;
    if dy.shape() != xhat.shape() {
        return Err(Error::Dimensions(format!(
            "batch norm grad {:?} for input {:?}",
            dy.shape(),
            xhat.shape()
        )));
    }
    let (c, plane) = (xhat.c(), xhat.plane());
    let m = (xhat.n() * plane) as f64;
    let sums: Vec<(f64, f64)> = (0..c)
        .into_par_iter()
        .map(|ch| {
            let (mut sdy, mut sdyx) = (0.0, 0.0);
            for n in 0..xhat.n() {
                let r = ch * plane..(ch + 1) * plane;
                for (&g, &h) in dy.sample(n)[r.clone()].iter().zip(&xhat.sample(n)[r]) {
                    sdy += g.f64();
                    sdyx += g.f64() * h.f64();
                }
            }
            (sdy, sdyx)
        })
        .collect();
    let dbeta: Vec<T> = sums.iter().map(|s| T::of(s.0)).collect();
    let dgamma: Vec<T> = sums.iter().map(|s| T::of(s.1)).collect();
    // dx = gamma * inv_std * (dy - mean(dy) - xhat * mean(dy * xhat))
    let mut dx = Tensor::zeros(dy.shape());
    dx.data_mut()
        .par_chunks_mut(plane.max(1))
        .zip(dy.data().par_chunks(plane.max(1)))
        .zip(xhat.data().par_chunks(plane.max(1)))
        .enumerate()
        .for_each(|(i, ((o, g), h))| {
            let ch = i % c;
            let k = gamma[ch].f64() * cache.inv_std[ch];
            let (mdy, mdyx) = (sums[ch].0 / m, sums[ch].1 / m);
            for ((d, &gv), &hv) in o.iter_mut().zip(g).zip(h) {
                *d = T::of(k * (gv.f64() - mdy - hv.f64() * mdyx));
            }
        });
    Ok((dx, dgamma, dbeta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::test_util::{check_grad, dot, rand_tensor};

    #[test]
    fn train_mode_normalizes_each_channel() {
        let x = rand_tensor::<f32>([4, 3, 5, 6], 1).map(|v| v * 3.0 + 2.0);
        let ones = vec![1.0f32; 3];
        let zeros = vec![0.0f32; 3];
        let out = batch_norm_train(&x, &ones, &zeros, 1e-5).unwrap();
        let (mean, var) = channel_moments(&out.y);
        for ch in 0..3 {
            assert!(mean[ch].abs() < 1e-5, "mean {}", mean[ch]);
            assert!((var[ch] - 1.0).abs() < 1e-3, "var {}", var[ch]);
        }
    }

    #[test]
    fn eval_mode_uses_running_statistics() {
        let x = Tensor::<f64>::new([1, 2, 1, 2], vec![1.0, 3.0, -1.0, 5.0]).unwrap();
        let y = batch_norm_eval(&x, &[2.0, 1.0], &[0.5, 0.0], &[1.0, 0.0], &[4.0, 1.0], 0.0).unwrap();
        assert_eq!(y.data(), &[0.5, 2.5, -1.0, 5.0]);
    }

    fn grad_case<T: Element>(tol: f64) {
        let x64 = rand_tensor::<f64>([3, 2, 4, 3], 2);
        let (g64, b64) = ([1.5, -0.7], [0.2, 0.1]);
        // a plain sum of normalized outputs has zero gradient, so project randomly
        let r64 = rand_tensor::<f64>(x64.shape(), 3);
        let (x, r) = (x64.cast::<T>(), r64.cast::<T>());
        let gamma = g64.map(T::of);
        let out = batch_norm_train(&x, &gamma, &b64.map(T::of), 1e-5).unwrap();
        let (dx, dg, db) = batch_norm_backward(&out.cache, &gamma, &r).unwrap();
        let f = |x: &Tensor<f64>, g: &[f64], b: &[f64]| dot(&batch_norm_train(x, g, b, 1e-5).unwrap().y, &r64);
        check_grad(&x64, dx.data(), 1e-6, tol, |xp| f(xp, &g64, &b64));
        let gt = Tensor::new([2, 1, 1, 1], g64.to_vec()).unwrap();
        check_grad(&gt, &dg, 1e-6, tol, |gp| f(&x64, gp.data(), &b64));
        let bt = Tensor::new([2, 1, 1, 1], b64.to_vec()).unwrap();
        check_grad(&bt, &db, 1e-6, tol, |bp| f(&x64, &g64, bp.data()));
    }

    #[test]
    fn gradients_match_finite_differences() {
        grad_case::<f64>(1e-5);
        grad_case::<f32>(1e-3);
    }

    #[test]
    fn rejects_bad_parameter_lengths() {
        let x = Tensor::<f32>::zeros([1, 2, 2, 2]);
        assert!(batch_norm_train(&x, &[1.0], &[0.0, 0.0], 1e-5).is_err());
    }
}
