use rand::Rng;

use crate::error::Result;
use crate::nn::layers::join;
use crate::nn::{
    add, add_assign, max_pool2d, max_pool2d_backward, relu, relu_backward, ConvBn, ConvGeom, Element,
    LinearBnCache, Module, ParamKind, Tensor,
};

/// Two 3x3 conv-bn layers with a residual shortcut (1x1 projection when the shape changes).
#[derive(Clone, Debug)]
pub struct BasicBlock<T> {
    pub conv1: ConvBn<T>,
    pub conv2: ConvBn<T>,
    pub downsample: Option<ConvBn<T>>,
}

#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    c1: LinearBnCache<T>,
    c2: LinearBnCache<T>,
    ds: Option<LinearBnCache<T>>,
    out: Tensor<T>,
}

impl<T: Element> BasicBlock<T> {
    pub fn new(cin: usize, cout: usize, stride: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv1: ConvBn::conv(cin, cout, ConvGeom::new(3, stride, 1), true, rng),
            conv2: ConvBn::conv(cout, cout, ConvGeom::new(3, 1, 1), false, rng),
            downsample: (stride != 1 || cin != cout)
                .then(|| ConvBn::conv(cin, cout, ConvGeom::new(1, stride, 0), false, rng)),
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let main = self.conv2.infer(&self.conv1.infer(x)?)?;
        let z = match &self.downsample {
            Some(ds) => add(&main, &ds.infer(x)?)?,
            None => add(&main, x)?,
        };
        Ok(relu(&z))
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, BlockCache<T>)> {
        let (a, c1) = self.conv1.forward_train(x)?;
        let (mut z, c2) = self.conv2.forward_train(&a)?;
        let ds = match &mut self.downsample {
            Some(ds) => {
                let (s, cache) = ds.forward_train(x)?;
                add_assign(&mut z, &s)?;
                Some(cache)
            }
            None => {
                add_assign(&mut z, x)?;
                None
            }
        };
        let out = relu(&z);
        Ok((out.clone(), BlockCache { c1, c2, ds, out }))
    }

    pub fn backward(&mut self, cache: &BlockCache<T>, dy: &Tensor<T>, need_dx: bool) -> Result<Option<Tensor<T>>> {
        let dz = relu_backward(&cache.out, dy)?;
        let shortcut = match (&mut self.downsample, &cache.ds) {
            (Some(ds), Some(c)) => ds.backward(c, &dz, need_dx)?,
            _ => need_dx.then(|| dz.clone()),
        };
        let da = self.conv2.backward(&cache.c2, &dz, true)?.expect("requested");
        let main = self.conv1.backward(&cache.c1, &da, need_dx)?;
        match (main, shortcut) {
            (Some(mut m), Some(s)) => {
                add_assign(&mut m, &s)?;
                Ok(Some(m))
            }
            _ => Ok(None),
        }
    }
}

impl<T: Element> Module<T> for BasicBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        self.conv1.visit_as(prefix, "conv1", "bn1", f);
        self.conv2.visit_as(prefix, "conv2", "bn2", f);
        if let Some(ds) = &self.downsample {
            ds.visit(&join(prefix, "downsample"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        self.conv1.visit_mut_as(prefix, "conv1", "bn1", f);
        self.conv2.visit_mut_as(prefix, "conv2", "bn2", f);
        if let Some(ds) = &mut self.downsample {
            ds.visit_mut(&join(prefix, "downsample"), f);
        }
    }
}

/// Encoder outputs at strides 4, 8 and 16.
#[derive(Clone, Debug)]
pub struct Features<T> {
    pub s4: Tensor<T>,
    pub s8: Tensor<T>,
    pub s16: Tensor<T>,
}

/// Stem (7x7/2 conv, 3x3/2 max pool) followed by three residual stages of two blocks.
#[derive(Clone, Debug)]
pub struct Encoder<T> {
    pub stem: ConvBn<T>,
    pub stages: [Vec<BasicBlock<T>>; 3],
}

#[derive(Clone, Debug)]
pub struct EncoderCache<T> {
    stem: LinearBnCache<T>,
    stem_shape: [usize; 4],
    argmax: Vec<u32>,
    blocks: [Vec<BlockCache<T>>; 3],
}

const POOL: (usize, usize, usize) = (3, 2, 1);

impl<T: Element> Encoder<T> {
    pub fn new(stem_channels: usize, stage_channels: [usize; 3], rng: &mut impl Rng) -> Self {
        let stem = ConvBn::conv(3, stem_channels, ConvGeom::new(7, 2, 3), true, rng);
        let mut cin = stem_channels;
        let stages = [0, 1, 2].map(|i| {
            let cout = stage_channels[i];
            let stride = if i == 0 { 1 } else { 2 };
            let blocks = vec![BasicBlock::new(cin, cout, stride, rng), BasicBlock::new(cout, cout, 1, rng)];
            cin = cout;
            blocks
        });
        Self { stem, stages }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Features<T>> {
        let stem = self.stem.infer(x)?;
        let mut h = max_pool2d(&stem, POOL.0, POOL.1, POOL.2)?.y;
        let mut outs = Vec::with_capacity(3);
        for stage in &self.stages {
            for block in stage {
                h = block.infer(&h)?;
            }
            outs.push(h.clone());
        }
        let [s4, s8, s16]: [Tensor<T>; 3] = outs.try_into().expect("three stages");
        Ok(Features { s4, s8, s16 })
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Features<T>, EncoderCache<T>)> {
        let (stem_out, stem) = self.stem.forward_train(x)?;
        let pooled = max_pool2d(&stem_out, POOL.0, POOL.1, POOL.2)?;
        let mut h = pooled.y;
        let mut outs = Vec::with_capacity(3);
        let mut blocks: [Vec<BlockCache<T>>; 3] = Default::default();
        for (stage, caches) in self.stages.iter_mut().zip(&mut blocks) {
            for block in stage {
                let (y, c) = block.forward_train(&h)?;
                caches.push(c);
                h = y;
            }
            outs.push(h.clone());
        }
        let [s4, s8, s16]: [Tensor<T>; 3] = outs.try_into().expect("three stages");
        let cache = EncoderCache {
            stem,
            stem_shape: stem_out.shape(),
            argmax: pooled.argmax,
            blocks,
        };
        Ok((Features { s4, s8, s16 }, cache))
    }

    /// Back-propagates gradients arriving at each feature tap.
    pub fn backward(&mut self, cache: &EncoderCache<T>, grads: Features<T>, need_dx: bool) -> Result<Option<Tensor<T>>> {
        let Features { s4, s8, s16 } = grads;
        let mut taps = [Some(s4), Some(s8), Some(s16)];
        let mut carry: Option<Tensor<T>> = None;
        for i in (0..3).rev() {
            let mut g = taps[i].take().expect("tap gradient");
            if let Some(c) = carry.take() {
                add_assign(&mut g, &c)?;
            }
            for (block, bc) in self.stages[i].iter_mut().zip(&cache.blocks[i]).rev() {
                g = block.backward(bc, &g, true)?.expect("requested");
            }
            carry = Some(g);
        }
        let dpool = carry.expect("stage 1 gradient");
        let dstem = max_pool2d_backward(&cache.argmax, &dpool, cache.stem_shape)?;
        self.stem.backward(&cache.stem, &dstem, need_dx)
    }
}

impl<T: Element> Module<T> for Encoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, stage) in self.stages.iter().enumerate() {
            for (j, block) in stage.iter().enumerate() {
                block.visit(&join(prefix, &format!("layer{}.block{}", i + 1, j + 1)), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            for (j, block) in stage.iter_mut().enumerate() {
                block.visit_mut(&join(prefix, &format!("layer{}.block{}", i + 1, j + 1)), f);
            }
        }
    }
}
