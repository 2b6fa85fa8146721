use rayon::prelude::*;

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Square-kernel convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
            dilation: 1,
        }
    }

    pub fn dilated(self, dilation: usize) -> Self {
        Self { dilation, ..self }
    }

    fn span(&self) -> usize {
        self.dilation * (self.kernel - 1) + 1
    }

    fn check(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 || self.dilation == 0 {
            return Err(Error::InvalidArgument(format!("degenerate convolution {self:?}")));
        }
        Ok(())
    }

    /// Output extent of a forward convolution, or `None` when the kernel does not fit.
    pub fn out_size(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        (padded >= self.span()).then(|| (padded - self.span()) / self.stride + 1)
    }

    /// Output extent of a transposed convolution: `(H - 1) s - 2p + d (k - 1) + 1`.
    pub fn transposed_out_size(&self, input: usize) -> Option<usize> {
        if input == 0 {
            return None;
        }
        let full = (input - 1) * self.stride + self.span();
        (full > 2 * self.pad).then(|| full - 2 * self.pad)
    }
}

/// Gradients of a (transposed) convolution.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Vec<T>,
    pub db: Option<Vec<T>>,
}

/// Maps an image of `c x h x w` to the `ho x wo` output grid of a convolution.
#[derive(Clone, Copy, Debug)]
struct Plan {
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    g: ConvGeom,
}

impl Plan {
    fn rows(&self) -> usize {
        self.c * self.g.kernel * self.g.kernel
    }

    /// Output-row chunks sized by shape only, so results never depend on thread count.
    fn chunks(&self) -> Vec<(usize, usize)> {
        const MIN_COLUMNS: usize = 512;
        let budget = ((1usize << 21) / (self.rows() * self.wo).max(1)).max(1);
        let wanted = self.ho.div_ceil(8).max(MIN_COLUMNS.div_ceil(self.wo.max(1)));
        let step = wanted.min(budget).clamp(1, self.ho.max(1));
        (0..self.ho)
            .step_by(step)
            .map(|r0| (r0, (r0 + step).min(self.ho)))
            .collect()
    }

    fn taps(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let i = (o * self.g.stride + k * self.g.dilation) as isize - self.g.pad as isize;
        (i >= 0 && (i as usize) < limit).then_some(i as usize)
    }

    fn im2col<T: Element>(&self, img: &[T], oy0: usize, oy1: usize, col: &mut [T]) {
        let k = self.g.kernel;
        let p = (oy1 - oy0) * self.wo;
        for ci in 0..self.c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oy in oy0..oy1 {
                        let drow = &mut dst[(oy - oy0) * self.wo..(oy - oy0 + 1) * self.wo];
                        let Some(iy) = self.taps(oy, ky, self.h) else {
                            drow.fill(T::zero());
                            continue;
                        };
                        let src = &img[(ci * self.h + iy) * self.w..(ci * self.h + iy + 1) * self.w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            *d = match self.taps(ox, kx, self.w) {
                                Some(ix) => src[ix],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Element>(&self, col: &[T], oy0: usize, oy1: usize, img: &mut [T]) {
        let k = self.g.kernel;
        let p = (oy1 - oy0) * self.wo;
        for ci in 0..self.c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &col[row * p..(row + 1) * p];
                    for oy in oy0..oy1 {
                        let Some(iy) = self.taps(oy, ky, self.h) else {
                            continue;
                        };
                        let dst = &mut img[(ci * self.h + iy) * self.w..(ci * self.h + iy + 1) * self.w];
                        let srow = &src[(oy - oy0) * self.wo..(oy - oy0 + 1) * self.wo];
                        for (ox, &v) in srow.iter().enumerate() {
                            if let Some(ix) = self.taps(ox, kx, self.w) {
                                dst[ix] = dst[ix] + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Copies rows `r0..r1` of every channel plane into a contiguous `c x (rows*w)` block.
fn gather_rows<T: Element>(sample: &[T], c: usize, plane: usize, w: usize, r0: usize, r1: usize) -> Vec<T> {
    let p = (r1 - r0) * w;
    let mut out = Vec::with_capacity(c * p);
    for ch in 0..c {
        out.extend_from_slice(&sample[ch * plane + r0 * w..ch * plane + r1 * w]);
    }
    out
}

fn scatter_rows<T: Element>(block: &[T], c: usize, plane: usize, w: usize, r0: usize, r1: usize, sample: &mut [T]) {
    let p = (r1 - r0) * w;
    for ch in 0..c {
        sample[ch * plane + r0 * w..ch * plane + r1 * w].copy_from_slice(&block[ch * p..(ch + 1) * p]);
    }
}

fn check_bias<T>(bias: Option<&[T]>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.len() != channels => Err(Error::Dimensions(format!(
            "bias has {} entries for {channels} channels",
            b.len()
        ))),
        _ => Ok(()),
    }
}

fn add_bias<T: Element>(block: &mut [T], bias: Option<&[T]>, p: usize) {
    if let Some(b) = bias {
        for (row, &bv) in block.chunks_mut(p).zip(b) {
            row.iter_mut().for_each(|v| *v = *v + bv);
        }
    }
}

fn channel_sums<T: Element>(dy: &Tensor<T>) -> Vec<T> {
    let (c, plane) = (dy.c(), dy.plane());
    (0..c)
        .map(|ch| {
            let s: f64 = (0..dy.n())
                .map(|n| dy.sample(n)[ch * plane..(ch + 1) * plane].iter().map(|v| v.f64()).sum::<f64>())
                .sum();
            T::of(s)
        })
        .collect()
}

fn sum_in_order<T: Element>(parts: impl Iterator<Item = Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for part in parts {
        for (a, v) in acc.iter_mut().zip(part) {
            *a = *a + v;
        }
    }
    acc
}

fn conv_plan<T: Element>(x: &Tensor<T>, w: &Tensor<T>, g: ConvGeom) -> Result<Plan> {
    g.check()?;
    let [cout, cin, kh, kw] = w.shape();
    if cin != x.c() || kh != g.kernel || kw != g.kernel || cout == 0 {
        return Err(Error::Dimensions(format!(
            "conv weight {:?} incompatible with input {:?} and kernel {}",
            w.shape(),
            x.shape(),
            g.kernel
        )));
    }
    let (Some(ho), Some(wo)) = (g.out_size(x.h()), g.out_size(x.w())) else {
        return Err(Error::Dimensions(format!("input {:?} too small for {g:?}", x.shape())));
    };
    Ok(Plan {
        c: cin,
        h: x.h(),
        w: x.w(),
        ho,
        wo,
        g,
    })
}

/// 2-D convolution. `w` is `[out, in, k, k]`.
pub fn conv2d<T: Element>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&[T]>, g: ConvGeom) -> Result<Tensor<T>> {
    let plan = conv_plan(x, w, g)?;
    let cout = w.n();
    check_bias(bias, cout)?;
    let kk = plan.rows();
    let tasks: Vec<(usize, usize, usize)> = (0..x.n())
        .flat_map(|n| plan.chunks().into_iter().map(move |(a, b)| (n, a, b)))
        .collect();
    let blocks: Vec<Vec<T>> = tasks
        .par_iter()
        .map(|&(n, oy0, oy1)| {
            let p = (oy1 - oy0) * plan.wo;
            let mut col = vec![T::zero(); kk * p];
            plan.im2col(x.sample(n), oy0, oy1, &mut col);
            let mut out = vec![T::zero(); cout * p];
            T::gemm(false, false, cout, kk, p, w.data(), &col, T::zero(), &mut out);
            add_bias(&mut out, bias, p);
            out
        })
        .collect();
    let mut y = Tensor::zeros([x.n(), cout, plan.ho, plan.wo]);
    let (plane, sl) = (y.plane(), y.sample_len());
    for (&(n, oy0, oy1), block) in tasks.iter().zip(&blocks) {
        scatter_rows(block, cout, plane, plan.wo, oy0, oy1, &mut y.data_mut()[n * sl..(n + 1) * sl]);
    }
    Ok(y)
}

pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: ConvGeom,
    dy: &Tensor<T>,
    with_bias: bool,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let plan = conv_plan(x, w, g)?;
    let cout = w.n();
    if dy.shape() != [x.n(), cout, plan.ho, plan.wo] {
        return Err(Error::Dimensions(format!("conv output grad {:?} mismatched", dy.shape())));
    }
    let kk = plan.rows();
    let plane = dy.plane();
    let per_sample: Vec<(Vec<T>, Option<Vec<T>>)> = (0..x.n())
        .into_par_iter()
        .map(|n| {
            let mut dw = vec![T::zero(); cout * kk];
            let mut dx = need_dx.then(|| vec![T::zero(); x.sample_len()]);
            for (oy0, oy1) in plan.chunks() {
                let p = (oy1 - oy0) * plan.wo;
                let mut col = vec![T::zero(); kk * p];
                plan.im2col(x.sample(n), oy0, oy1, &mut col);
                let dyc = gather_rows(dy.sample(n), cout, plane, plan.wo, oy0, oy1);
                T::gemm(false, true, cout, p, kk, &dyc, &col, T::one(), &mut dw);
                if let Some(dx) = dx.as_mut() {
                    T::gemm(true, false, kk, cout, p, w.data(), &dyc, T::zero(), &mut col);
                    plan.col2im(&col, oy0, oy1, dx);
                }
            }
            (dw, dx)
        })
        .collect();
    let dx = if need_dx {
        let data: Vec<T> = per_sample.iter().flat_map(|(_, d)| d.clone().unwrap_or_default()).collect();
        Some(Tensor::new(x.shape(), data)?)
    } else {
        None
    };
    Ok(ConvGrads {
        dx,
        dw: sum_in_order(per_sample.into_iter().map(|(d, _)| d), cout * kk),
        db: with_bias.then(|| channel_sums(dy)),
    })
}

fn transposed_plan<T: Element>(x: &Tensor<T>, w: &Tensor<T>, g: ConvGeom) -> Result<Plan> {
    g.check()?;
    let [cin, cout, kh, kw] = w.shape();
    if cin != x.c() || kh != g.kernel || kw != g.kernel || cout == 0 {
        return Err(Error::Dimensions(format!(
            "transposed conv weight {:?} incompatible with input {:?} and kernel {}",
            w.shape(),
            x.shape(),
            g.kernel
        )));
    }
    let (Some(ho), Some(wo)) = (g.transposed_out_size(x.h()), g.transposed_out_size(x.w())) else {
        return Err(Error::Dimensions(format!("input {:?} invalid for transposed {g:?}", x.shape())));
    };
    // the output image plays the role of a convolution input whose output grid is x
    let plan = Plan {
        c: cout,
        h: ho,
        w: wo,
        ho: x.h(),
        wo: x.w(),
        g,
    };
    if g.out_size(ho) != Some(x.h()) || g.out_size(wo) != Some(x.w()) {
        return Err(Error::Dimensions(format!("transposed {g:?} is not invertible for {:?}", x.shape())));
    }
    Ok(plan)
}

/// Transposed 2-D convolution, the adjoint of [`conv2d`]. `w` is `[in, out, k, k]`.
pub fn conv_transpose2d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&[T]>,
    g: ConvGeom,
) -> Result<Tensor<T>> {
    let plan = transposed_plan(x, w, g)?;
    let (cin, cout) = (x.c(), plan.c);
    check_bias(bias, cout)?;
    let kk = plan.rows();
    let out_len = cout * plan.h * plan.w;
    let samples: Vec<Vec<T>> = (0..x.n())
        .into_par_iter()
        .map(|n| {
            let mut img = vec![T::zero(); out_len];
            for (r0, r1) in plan.chunks() {
                let p = (r1 - r0) * plan.wo;
                let xc = gather_rows(x.sample(n), cin, x.plane(), plan.wo, r0, r1);
                let mut col = vec![T::zero(); kk * p];
                T::gemm(true, false, kk, cin, p, w.data(), &xc, T::zero(), &mut col);
                plan.col2im(&col, r0, r1, &mut img);
            }
            add_bias(&mut img, bias, plan.h * plan.w);
            img
        })
        .collect();
    Tensor::new([x.n(), cout, plan.h, plan.w], samples.concat())
}

pub fn conv_transpose2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: ConvGeom,
    dy: &Tensor<T>,
    with_bias: bool,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let plan = transposed_plan(x, w, g)?;
    let (cin, cout) = (x.c(), plan.c);
    if dy.shape() != [x.n(), cout, plan.h, plan.w] {
        return Err(Error::Dimensions(format!("transposed conv output grad {:?} mismatched", dy.shape())));
    }
    let kk = plan.rows();
    let per_sample: Vec<(Vec<T>, Option<Vec<T>>)> = (0..x.n())
        .into_par_iter()
        .map(|n| {
            let mut dw = vec![T::zero(); cin * kk];
            let mut dx = need_dx.then(|| vec![T::zero(); x.sample_len()]);
            for (r0, r1) in plan.chunks() {
                let p = (r1 - r0) * plan.wo;
                let mut col = vec![T::zero(); kk * p];
                plan.im2col(dy.sample(n), r0, r1, &mut col);
                let xc = gather_rows(x.sample(n), cin, x.plane(), plan.wo, r0, r1);
                T::gemm(false, true, cin, p, kk, &xc, &col, T::one(), &mut dw);
                if let Some(dx) = dx.as_mut() {
                    let mut block = vec![T::zero(); cin * p];
                    T::gemm(false, false, cin, kk, p, w.data(), &col, T::zero(), &mut block);
                    scatter_rows(&block, cin, x.plane(), plan.wo, r0, r1, dx);
                }
            }
            (dw, dx)
        })
        .collect();
    let dx = if need_dx {
        let data: Vec<T> = per_sample.iter().flat_map(|(_, d)| d.clone().unwrap_or_default()).collect();
        Some(Tensor::new(x.shape(), data)?)
    } else {
        None
    };
    Ok(ConvGrads {
        dx,
        dw: sum_in_order(per_sample.into_iter().map(|(d, _)| d), cin * kk),
        db: with_bias.then(|| channel_sums(dy)),
    })
}
