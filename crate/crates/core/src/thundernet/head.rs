use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::nn::layers::join;
use crate::nn::{
    adaptive_avg_pool2d, adaptive_avg_pool2d_backward, add_assign, concat_channels, split_channels,
    upsample_bilinear, upsample_bilinear_backward, Conv2d, ConvBn, ConvGeom, DeconvBn, Element, LinearBnCache,
    LinearLayer, Module, ParamKind, Tensor,
};

use super::encoder::Features;

/// Pyramid pooling: per bin, pool to `b x b`, 1x1 conv-bn-relu, upsample back; the
/// branches are concatenated with the input and fused by a 3x3 conv-bn-relu.
#[derive(Clone, Debug)]
pub struct Ppm<T> {
    pub bins: Vec<usize>,
    pub branches: Vec<ConvBn<T>>,
    pub fuse: ConvBn<T>,
}

#[derive(Clone, Debug)]
pub struct PpmCache<T> {
    input_shape: [usize; 4],
    branches: Vec<LinearBnCache<T>>,
    fuse: LinearBnCache<T>,
}

impl<T: Element> Ppm<T> {
    pub fn new(channels: usize, bins: &[usize], branch_channels: usize, rng: &mut impl Rng) -> Self {
        let branches = bins
            .iter()
            .map(|_| ConvBn::conv(channels, branch_channels, ConvGeom::new(1, 1, 0), true, rng))
            .collect();
        let concat = channels + bins.len() * branch_channels;
        Self {
            bins: bins.to_vec(),
            branches,
            fuse: ConvBn::conv(concat, channels, ConvGeom::new(3, 1, 1), true, rng),
        }
    }

    pub fn concat_channels(&self, channels: usize) -> usize {
        channels + self.branches.iter().map(|b| b.linear.out_channels()).sum::<usize>()
    }

    /// Input concatenated with every upsampled branch, before fusion.
    pub fn pyramid(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut parts = vec![x.clone()];
        for (&b, branch) in self.bins.iter().zip(&self.branches) {
            let q = branch.infer(&adaptive_avg_pool2d(x, b, b)?)?;
            parts.push(upsample_bilinear(&q, x.h(), x.w())?);
        }
        concat_channels(&parts.iter().collect::<Vec<_>>())
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.fuse.infer(&self.pyramid(x)?)
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, PpmCache<T>)> {
        let mut parts = vec![x.clone()];
        let mut caches = Vec::with_capacity(self.bins.len());
        for (&b, branch) in self.bins.iter().zip(&mut self.branches) {
            let (q, c) = branch.forward_train(&adaptive_avg_pool2d(x, b, b)?)?;
            parts.push(upsample_bilinear(&q, x.h(), x.w())?);
            caches.push(c);
        }
        let cat = concat_channels(&parts.iter().collect::<Vec<_>>())?;
        let (y, fuse) = self.fuse.forward_train(&cat)?;
        Ok((
            y,
            PpmCache {
                input_shape: x.shape(),
                branches: caches,
                fuse,
            },
        ))
    }

    pub fn backward(&mut self, cache: &PpmCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let dcat = self.fuse.backward(&cache.fuse, dy, true)?.expect("requested");
        let sizes: Vec<usize> = std::iter::once(cache.input_shape[1])
            .chain(self.branches.iter().map(|b| b.linear.out_channels()))
            .collect();
        let mut parts = split_channels(&dcat, &sizes)?.into_iter();
        let mut dx = parts.next().expect("input part");
        for (((&b, branch), c), du) in self.bins.iter().zip(&mut self.branches).zip(&cache.branches).zip(parts) {
            let dq = upsample_bilinear_backward(&du, b, b)?;
            let dp = branch.backward(c, &dq, true)?.expect("requested");
            add_assign(&mut dx, &adaptive_avg_pool2d_backward(&dp, cache.input_shape)?)?;
        }
        Ok(dx)
    }
}

impl<T: Element> Module<T> for Ppm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        for (i, b) in self.branches.iter().enumerate() {
            b.visit(&join(prefix, &format!("branch{}", i + 1)), f);
        }
        self.fuse.visit(&join(prefix, "fuse"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        for (i, b) in self.branches.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("branch{}", i + 1)), f);
        }
        self.fuse.visit_mut(&join(prefix, "fuse"), f);
    }
}

/// Two deconvolution blocks (stride 16 -> 8 -> 4), additive long skips from the
/// encoder at strides 16, 8 and 4, a 1x1 classifier and a final bilinear upsample.
#[derive(Clone, Debug)]
pub struct Decoder<T> {
    pub skip16: Option<Conv2d<T>>,
    pub deconv_a: DeconvBn<T>,
    pub skip8: Option<Conv2d<T>>,
    pub deconv_b: DeconvBn<T>,
    pub skip4: Option<Conv2d<T>>,
    pub head: Conv2d<T>,
}

#[derive(Clone, Debug)]
pub struct DecoderCache<T> {
    a: Tensor<T>,
    deconv_a: LinearBnCache<T>,
    deconv_b: LinearBnCache<T>,
    c: Tensor<T>,
}

/// Standard deviation of the classifier's initial weights; keeps initial logits near zero.
pub const HEAD_INIT_STD: f64 = 1e-3;

fn skip_projection<T: Element>(cin: usize, cout: usize, enabled: bool, rng: &mut impl Rng) -> Option<Conv2d<T>> {
    enabled.then(|| Conv2d::new(cin, cout, ConvGeom::new(1, 1, 0), false, rng))
}

impl<T: Element> Decoder<T> {
    pub fn new(
        stage_channels: [usize; 3],
        decoder_channels: [usize; 2],
        num_classes: usize,
        long_skips: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let [c4, c8, c16] = stage_channels;
        let [d8, d4] = decoder_channels;
        let deconv = ConvGeom::new(4, 2, 1);
        let skip16 = skip_projection(c16, c16, long_skips, rng);
        let deconv_a = DeconvBn::deconv(c16, d8, deconv, true, rng);
        let skip8 = skip_projection(c8, d8, long_skips, rng);
        let deconv_b = DeconvBn::deconv(d8, d4, deconv, true, rng);
        let skip4 = skip_projection(c4, d4, long_skips, rng);
        let mut head = Conv2d::new(d4, num_classes, ConvGeom::new(1, 1, 0), true, rng);
        let normal = Normal::new(0.0, HEAD_INIT_STD).expect("finite std");
        head.weight.data_mut().iter_mut().for_each(|w| *w = T::of(normal.sample(rng)));
        Self {
            skip16,
            deconv_a,
            skip8,
            deconv_b,
            skip4,
            head,
        }
    }

    fn with_skip(x: Tensor<T>, skip: &Option<Conv2d<T>>, feature: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = x;
        if let Some(p) = skip {
            add_assign(&mut x, &p.apply(feature)?)?;
        }
        Ok(x)
    }

    pub fn infer(&self, fused: &Tensor<T>, f: &Features<T>, out_size: usize) -> Result<Tensor<T>> {
        let a = Self::with_skip(fused.clone(), &self.skip16, &f.s16)?;
        let b = Self::with_skip(self.deconv_a.infer(&a)?, &self.skip8, &f.s8)?;
        let c = Self::with_skip(self.deconv_b.infer(&b)?, &self.skip4, &f.s4)?;
        upsample_bilinear(&self.head.apply(&c)?, out_size, out_size)
    }

    pub fn forward_train(
        &mut self,
        fused: &Tensor<T>,
        f: &Features<T>,
        out_size: usize,
    ) -> Result<(Tensor<T>, DecoderCache<T>)> {
        let a = Self::with_skip(fused.clone(), &self.skip16, &f.s16)?;
        let (b, deconv_a) = self.deconv_a.forward_train(&a)?;
        let b = Self::with_skip(b, &self.skip8, &f.s8)?;
        let (c, deconv_b) = self.deconv_b.forward_train(&b)?;
        let c = Self::with_skip(c, &self.skip4, &f.s4)?;
        let logits = upsample_bilinear(&self.head.apply(&c)?, out_size, out_size)?;
        Ok((logits, DecoderCache { a, deconv_a, deconv_b, c }))
    }

    /// Returns the gradient for the fused PPM output and for each encoder tap.
    pub fn backward(
        &mut self,
        cache: &DecoderCache<T>,
        f: &Features<T>,
        dlogits: &Tensor<T>,
    ) -> Result<(Tensor<T>, Features<T>)> {
        let low = upsample_bilinear_backward(dlogits, cache.c.h(), cache.c.w())?;
        let dc = self.head.backprop(&cache.c, &low, true)?.expect("requested");
        let tap = |skip: &mut Option<Conv2d<T>>, feature: &Tensor<T>, g: &Tensor<T>| -> Result<Tensor<T>> {
            match skip {
                Some(p) => Ok(p.backprop(feature, g, true)?.expect("requested")),
                None => Ok(Tensor::zeros(feature.shape())),
            }
        };
        let d4 = tap(&mut self.skip4, &f.s4, &dc)?;
        let db = self.deconv_b.backward(&cache.deconv_b, &dc, true)?.expect("requested");
        let d8 = tap(&mut self.skip8, &f.s8, &db)?;
        let da = self.deconv_a.backward(&cache.deconv_a, &db, true)?.expect("requested");
        let d16 = tap(&mut self.skip16, &f.s16, &da)?;
        debug_assert_eq!(da.shape(), cache.a.shape());
        Ok((da, Features { s4: d4, s8: d8, s16: d16 }))
    }
}

impl<T: Element> Module<T> for Decoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        if let Some(s) = &self.skip16 {
            s.visit(&join(prefix, "skip16"), f);
        }
        self.deconv_a.visit(&join(prefix, "deconv_a"), f);
        if let Some(s) = &self.skip8 {
            s.visit(&join(prefix, "skip8"), f);
        }
        self.deconv_b.visit(&join(prefix, "deconv_b"), f);
        if let Some(s) = &self.skip4 {
            s.visit(&join(prefix, "skip4"), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        if let Some(s) = &mut self.skip16 {
            s.visit_mut(&join(prefix, "skip16"), f);
        }
        self.deconv_a.visit_mut(&join(prefix, "deconv_a"), f);
        if let Some(s) = &mut self.skip8 {
            s.visit_mut(&join(prefix, "skip8"), f);
        }
        self.deconv_b.visit_mut(&join(prefix, "deconv_b"), f);
        if let Some(s) = &mut self.skip4 {
            s.visit_mut(&join(prefix, "skip4"), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}
