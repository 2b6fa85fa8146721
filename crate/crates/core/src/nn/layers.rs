//! Parameter-holding layers. Each offers a pure eval-mode `infer`, a training
//! `forward_train` that returns a cache, and `backward` that accumulates parameter
//! gradients and returns the input gradient.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{
    batch_norm_backward, batch_norm_eval, batch_norm_train, conv2d, conv2d_backward, conv_transpose2d,
    conv_transpose2d_backward, relu, relu_backward, BnCache, ConvGeom, Element, Tensor,
};
use crate::error::Result;

/// Role of a named tensor, which decides how the optimizer treats it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    /// Convolution kernels; trained with weight decay.
    Weight,
    /// Convolution biases; trained without decay.
    Bias,
    /// Normalization scale and shift; trained without decay.
    Affine,
    /// Running statistics and fixed configuration; never trained.
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        self != ParamKind::Buffer
    }

    pub fn decayed(self) -> bool {
        self == ParamKind::Weight
    }
}

/// Visitor over the named tensors of a module, in a fixed order.
pub trait Module<T: Element> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn column<T: Element>(values: Vec<T>) -> Tensor<T> {
    let n = values.len();
    Tensor::new([n, 1, 1, 1], values).expect("length matches shape")
}

fn he_normal<T: Element>(shape: [usize; 4], fan_in: f64, rng: &mut impl Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, (2.0 / fan_in.max(1.0)).sqrt()).expect("finite std");
    Tensor::from_fn(shape, |_| T::of(normal.sample(rng)))
}

/// A linear map with a learnable kernel (convolution or its transpose).
pub trait LinearLayer<T: Element>: Module<T> {
    fn out_channels(&self) -> usize;
    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
    /// Accumulates parameter gradients; returns the input gradient when requested.
    fn backprop(&mut self, x: &Tensor<T>, dy: &Tensor<T>, need_dx: bool) -> Result<Option<Tensor<T>>>;
}

#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    /// `[out, in, k, k]`
    pub weight: Tensor<T>,
    /// `[out, 1, 1, 1]`
    pub bias: Option<Tensor<T>>,
    pub geom: ConvGeom,
}

impl<T: Element> Conv2d<T> {
    /// He-normal kernel, zero bias.
    pub fn new(cin: usize, cout: usize, geom: ConvGeom, bias: bool, rng: &mut impl Rng) -> Self {
        let k = geom.kernel;
        Self {
            weight: he_normal([cout, cin, k, k], (cin * k * k) as f64, rng),
            bias: bias.then(|| column(vec![T::zero(); cout])),
            geom,
        }
    }
}

impl<T: Element> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        f(&join(prefix, "weight"), &self.weight, ParamKind::Weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b, ParamKind::Bias);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        f(&join(prefix, "weight"), &mut self.weight, ParamKind::Weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b, ParamKind::Bias);
        }
    }
}

impl<T: Element> LinearLayer<T> for Conv2d<T> {
    fn out_channels(&self) -> usize {
        self.weight.n()
    }

    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.weight, self.bias.as_ref().map(|b| b.data()), self.geom)
    }

    fn backprop(&mut self, x: &Tensor<T>, dy: &Tensor<T>, need_dx: bool) -> Result<Option<Tensor<T>>> {
        let g = conv2d_backward(x, &self.weight, self.geom, dy, self.bias.is_some(), need_dx)?;
        self.weight.accumulate_grad(&g.dw);
        if let (Some(b), Some(db)) = (&mut self.bias, &g.db) {
            b.accumulate_grad(db);
        }
        Ok(g.dx)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d<T> {
    /// `[in, out, k, k]`
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub geom: ConvGeom,
}

impl<T: Element> ConvTranspose2d<T> {
    pub fn new(cin: usize, cout: usize, geom: ConvGeom, bias: bool, rng: &mut impl Rng) -> Self {
        let k = geom.kernel;
        // each output pixel receives about in*k*k/s^2 taps
        let fan_in = (cin * k * k) as f64 / (geom.stride * geom.stride) as f64;
        Self {
            weight: he_normal([cin, cout, k, k], fan_in, rng),
            bias: bias.then(|| column(vec![T::zero(); cout])),
            geom,
        }
    }
}

impl<T: Element> Module<T> for ConvTranspose2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        f(&join(prefix, "weight"), &self.weight, ParamKind::Weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b, ParamKind::Bias);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        f(&join(prefix, "weight"), &mut self.weight, ParamKind::Weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b, ParamKind::Bias);
        }
    }
}

impl<T: Element> LinearLayer<T> for ConvTranspose2d<T> {
    fn out_channels(&self) -> usize {
        self.weight.c()
    }

    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv_transpose2d(x, &self.weight, self.bias.as_ref().map(|b| b.data()), self.geom)
    }

    fn backprop(&mut self, x: &Tensor<T>, dy: &Tensor<T>, need_dx: bool) -> Result<Option<Tensor<T>>> {
        let g = conv_transpose2d_backward(x, &self.weight, self.geom, dy, self.bias.is_some(), need_dx)?;
        self.weight.accumulate_grad(&g.dw);
        if let (Some(b), Some(db)) = (&mut self.bias, &g.db) {
            b.accumulate_grad(db);
        }
        Ok(g.dx)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Element> BatchNorm2d<T> {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(channels: usize) -> Self {
        Self {
            gamma: column(vec![T::one(); channels]),
            beta: column(vec![T::zero(); channels]),
            running_mean: column(vec![T::zero(); channels]),
            running_var: column(vec![T::one(); channels]),
            momentum: Self::MOMENTUM,
            eps: Self::EPS,
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        batch_norm_eval(
            x,
            self.gamma.data(),
            self.beta.data(),
            self.running_mean.data(),
            self.running_var.data(),
            self.eps,
        )
    }

    /// Normalizes with batch statistics and folds them into the running estimates
    /// (the variance estimate uses the unbiased batch variance).
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, BnCache<T>)> {
        let out = batch_norm_train(x, self.gamma.data(), self.beta.data(), self.eps)?;
        let m = (x.n() * x.plane()) as f64;
        let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        let mom = self.momentum;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&out.mean) {
            *r = T::of((1.0 - mom) * r.f64() + mom * b);
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&out.var) {
            *r = T::of((1.0 - mom) * r.f64() + mom * b * unbias);
        }
        Ok((out.y, out.cache))
    }

    pub fn backward(&mut self, cache: &BnCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (dx, dg, db) = batch_norm_backward(cache, self.gamma.data(), dy)?;
        self.gamma.accumulate_grad(&dg);
        self.beta.accumulate_grad(&db);
        Ok(dx)
    }
}

impl<T: Element> Module<T> for BatchNorm2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        f(&join(prefix, "gamma"), &self.gamma, ParamKind::Affine);
        f(&join(prefix, "beta"), &self.beta, ParamKind::Affine);
        f(&join(prefix, "running_mean"), &self.running_mean, ParamKind::Buffer);
        f(&join(prefix, "running_var"), &self.running_var, ParamKind::Buffer);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        f(&join(prefix, "gamma"), &mut self.gamma, ParamKind::Affine);
        f(&join(prefix, "beta"), &mut self.beta, ParamKind::Affine);
        f(&join(prefix, "running_mean"), &mut self.running_mean, ParamKind::Buffer);
        f(&join(prefix, "running_var"), &mut self.running_var, ParamKind::Buffer);
    }
}

/// Linear map, batch norm and optional ReLU.
#[derive(Clone, Debug)]
pub struct LinearBn<L, T> {
    pub linear: L,
    pub bn: BatchNorm2d<T>,
    pub relu: bool,
}

pub type ConvBn<T> = LinearBn<Conv2d<T>, T>;
pub type DeconvBn<T> = LinearBn<ConvTranspose2d<T>, T>;

#[derive(Clone, Debug)]
pub struct LinearBnCache<T> {
    x: Tensor<T>,
    bn: BnCache<T>,
    y: Option<Tensor<T>>,
}

impl<T: Element> ConvBn<T> {
    /// Bias-free convolution followed by batch norm.
    pub fn conv(cin: usize, cout: usize, geom: ConvGeom, relu: bool, rng: &mut impl Rng) -> Self {
        Self {
            linear: Conv2d::new(cin, cout, geom, false, rng),
            bn: BatchNorm2d::new(cout),
            relu,
        }
    }
}

impl<T: Element> DeconvBn<T> {
    pub fn deconv(cin: usize, cout: usize, geom: ConvGeom, relu: bool, rng: &mut impl Rng) -> Self {
        Self {
            linear: ConvTranspose2d::new(cin, cout, geom, false, rng),
            bn: BatchNorm2d::new(cout),
            relu,
        }
    }
}

impl<T: Element, L: LinearLayer<T>> LinearBn<L, T> {
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.bn.infer(&self.linear.apply(x)?)?;
        Ok(if self.relu { relu(&y) } else { y })
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, LinearBnCache<T>)> {
        let (z, bn) = self.bn.forward_train(&self.linear.apply(x)?)?;
        let (out, y) = if self.relu {
            let y = relu(&z);
            (y.clone(), Some(y))
        } else {
            (z, None)
        };
        Ok((out, LinearBnCache { x: x.clone(), bn, y }))
    }

    pub fn backward(&mut self, cache: &LinearBnCache<T>, dy: &Tensor<T>, need_dx: bool) -> Result<Option<Tensor<T>>> {
        let dz = match &cache.y {
            Some(y) => relu_backward(y, dy)?,
            None => dy.clone(),
        };
        let dl = self.bn.backward(&cache.bn, &dz)?;
        self.linear.backprop(&cache.x, &dl, need_dx)
    }
}

impl<T: Element, L: LinearLayer<T>> LinearBn<L, T> {
    /// Visits with explicit sub-names, e.g. `conv1`/`bn1` inside a residual block.
    pub fn visit_as(&self, prefix: &str, conv: &str, bn: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        self.linear.visit(&join(prefix, conv), f);
        self.bn.visit(&join(prefix, bn), f);
    }

    pub fn visit_mut_as(
        &mut self,
        prefix: &str,
        conv: &str,
        bn: &str,
        f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind),
    ) {
        self.linear.visit_mut(&join(prefix, conv), f);
        self.bn.visit_mut(&join(prefix, bn), f);
    }
}

impl<T: Element, L: LinearLayer<T>> Module<T> for LinearBn<L, T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        self.visit_as(prefix, "conv", "bn", f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        self.visit_mut_as(prefix, "conv", "bn", f);
    }
}
