//! Layer primitives with exact analytic backward passes.
//!
//! Work is split across batch items (or other disjoint output regions) with
//! rayon. Cross-item reductions such as weight gradients are computed per item
//! and summed sequentially in item order, so results do not depend on the
//! number of worker threads.

use rayon::prelude::*;

use crate::error::{Error, Result};

use super::{Param, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Static shape of a square-kernel convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvShape {
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (hp, wp) = (h + 2 * self.pad, w + 2 * self.pad);
        if hp < self.kernel || wp < self.kernel || self.stride == 0 {
            return Err(Error::Shape(format!(
                "conv {}x{} stride {} does not fit {h}x{w}",
                self.kernel, self.kernel, self.stride
            )));
        }
        Ok(((hp - self.kernel) / self.stride + 1, (wp - self.kernel) / self.stride + 1))
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    fn cols_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn check_input<T: Scalar>(&self, x: &Tensor<T>) -> Result<(usize, usize)> {
        if x.channels() != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels,
                x.channels()
            )));
        }
        let (h, w) = x.spatial();
        self.output_size(h, w)
    }
}

fn im2col<T: Scalar>(s: &ConvShape, x: &[T], h: usize, w: usize, oh: usize, ow: usize, cols: &mut [T]) {
    let n = oh * ow;
    let (k, st, pad) = (s.kernel, s.stride, s.pad as isize);
    for c in 0..s.in_channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * n..][..n];
                for oy in 0..oh {
                    let iy = (oy * st + ky) as isize - pad;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * st + kx) as isize - pad;
                        *d = if ix >= 0 && ix < w as isize { src[ix as usize] } else { T::zero() };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(s: &ConvShape, cols: &[T], h: usize, w: usize, oh: usize, ow: usize, x: &mut [T]) {
    let n = oh * ow;
    let (k, st, pad) = (s.kernel, s.stride, s.pad as isize);
    x.iter_mut().for_each(|v| *v = T::zero());
    for c in 0..s.in_channels {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * n..][..n];
                for oy in 0..oh {
                    let iy = (oy * st + ky) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * st + kx) as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding. `weight` is `(out, in, k, k)`.
pub fn conv2d_forward<T: Scalar>(
    s: &ConvShape,
    x: &Tensor<T>,
    weight: &[T],
    bias: &[T],
) -> Result<Tensor<T>> {
    let (oh, ow) = s.check_input(x)?;
    if weight.len() != s.weight_len() || bias.len() != s.out_channels {
        return Err(Error::Shape("conv parameter length mismatch".into()));
    }
    let (h, w) = x.spatial();
    let (m, kk, n) = (s.out_channels, s.cols_rows(), oh * ow);
    let mut out = Tensor::zeros([x.batch(), m, oh, ow]);
    let item_in = x.item_len();
    out.data_mut().par_chunks_mut(m * n).enumerate().for_each(|(b, out_b)| {
        let x_b = &x.data()[b * item_in..(b + 1) * item_in];
        for (row, &bv) in out_b.chunks_mut(n).zip(bias) {
            row.iter_mut().for_each(|v| *v = bv);
        }
        if s.is_pointwise() {
            T::gemm(m, kk, n, T::one(), weight, (kk, 1), x_b, (n, 1), T::one(), out_b, (n, 1));
        } else {
            let mut cols = vec![T::zero(); kk * n];
            im2col(s, x_b, h, w, oh, ow, &mut cols);
            T::gemm(m, kk, n, T::one(), weight, (kk, 1), &cols, (n, 1), T::one(), out_b, (n, 1));
        }
    });
    Ok(out)
}

/// Gradients of a convolution: `(grad_input, grad_weight, grad_bias)`.
pub fn conv2d_backward<T: Scalar>(
    s: &ConvShape,
    x: &Tensor<T>,
    weight: &[T],
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let (oh, ow) = s.check_input(x)?;
    grad_out.ensure_shape([x.batch(), s.out_channels, oh, ow], "conv backward")?;
    let (h, w) = x.spatial();
    let (m, kk, n) = (s.out_channels, s.cols_rows(), oh * ow);
    let item_in = x.item_len();
    let mut grad_in = Tensor::zeros(x.shape());
    let partials: Vec<(Vec<T>, Vec<T>)> = grad_in
        .data_mut()
        .par_chunks_mut(item_in)
        .enumerate()
        .map(|(b, gi_b)| {
            let x_b = &x.data()[b * item_in..(b + 1) * item_in];
            let go_b = &grad_out.data()[b * m * n..(b + 1) * m * n];
            let mut gw = vec![T::zero(); m * kk];
            let gb: Vec<T> = go_b.chunks(n).map(|row| row.iter().copied().sum()).collect();
            if s.is_pointwise() {
                T::gemm(m, n, kk, T::one(), go_b, (n, 1), x_b, (1, n), T::zero(), &mut gw, (kk, 1));
                T::gemm(kk, m, n, T::one(), weight, (1, kk), go_b, (n, 1), T::zero(), gi_b, (n, 1));
            } else {
                let mut cols = vec![T::zero(); kk * n];
                im2col(s, x_b, h, w, oh, ow, &mut cols);
                T::gemm(m, n, kk, T::one(), go_b, (n, 1), &cols, (1, n), T::zero(), &mut gw, (kk, 1));
                T::gemm(kk, m, n, T::one(), weight, (1, kk), go_b, (n, 1), T::zero(), &mut cols, (n, 1));
                col2im(s, &cols, h, w, oh, ow, gi_b);
            }
            (gw, gb)
        })
        .collect();
    let mut grad_w = vec![T::zero(); m * kk];
    let mut grad_b = vec![T::zero(); m];
    for (gw, gb) in &partials {
        grad_w.iter_mut().zip(gw).for_each(|(a, &b)| *a += b);
        grad_b.iter_mut().zip(gb).for_each(|(a, &b)| *a += b);
    }
    Ok((grad_in, grad_w, grad_b))
}

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub shape: ConvShape,
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        let shape = ConvShape { in_channels, out_channels, kernel, stride, pad };
        Self {
            shape,
            weight: Param::filled(&[out_channels, in_channels, kernel, kernel], T::zero()),
            bias: Param::filled(&[out_channels], T::zero()),
            input: None,
        }
    }

    /// "Same" padding for odd kernels.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self::new(in_channels, out_channels, kernel, stride, kernel / 2)
    }

    pub fn fan_in(&self) -> usize {
        self.shape.cols_rows()
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d_forward(&self.shape, x, &self.weight.value, &self.bias.value)
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.input = (mode == Mode::Train).then(|| x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or_else(|| Error::Shape("conv backward without forward".into()))?;
        let (gi, gw, gb) = conv2d_backward(&self.shape, &x, &self.weight.value, grad_out)?;
        self.weight.accumulate(&gw);
        self.bias.accumulate(&gb);
        Ok(gi)
    }
}

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
struct BnCache<T> {
    x_hat: Tensor<T>,
    inv_std: Vec<f64>,
}

/// Per-channel batch normalization over batch × height × width.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache<T>>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(&[channels], T::one()),
            beta: Param::filled(&[channels], T::zero()),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.channels() != self.channels() {
            return Err(Error::Shape(format!(
                "batch norm expects {} channels, got {}",
                self.channels(),
                x.channels()
            )));
        }
        Ok(())
    }

    /// Eval-mode normalization with running statistics.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let [b, c, h, w] = x.shape();
        let hw = h * w;
        let mut y = Tensor::zeros(x.shape());
        for ch in 0..c {
            let inv = 1.0 / (self.running_var[ch].as_f64() + self.eps).sqrt();
            let scale = T::from_f64_lossy(self.gamma.value[ch].as_f64() * inv);
            let shift = T::from_f64_lossy(
                self.beta.value[ch].as_f64() - self.running_mean[ch].as_f64() * self.gamma.value[ch].as_f64() * inv,
            );
            for n in 0..b {
                let off = (n * c + ch) * hw;
                let (src, dst) = (&x.data()[off..off + hw], &mut y.data_mut()[off..off + hw]);
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d = s * scale + shift);
            }
        }
        Ok(y)
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if mode == Mode::Eval {
            self.cache = None;
            return self.infer(x);
        }
        self.check(x)?;
        let [b, c, h, w] = x.shape();
        let hw = h * w;
        let count = (b * hw) as f64;
        let mut x_hat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let planes = || (0..b).map(move |n| (n * c + ch) * hw);
            let mut sum = 0.0;
            for off in planes() {
                sum += x.data()[off..off + hw].iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let mean = sum / count;
            let mut sq = 0.0;
            for off in planes() {
                sq += x.data()[off..off + hw].iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>();
            }
            let var = sq / count;
            let inv = 1.0 / (var + self.eps).sqrt();
            inv_std[ch] = inv;
            let (g, be) = (self.gamma.value[ch], self.beta.value[ch]);
            for off in planes() {
                for i in off..off + hw {
                    let xh = T::from_f64_lossy((x.data()[i].as_f64() - mean) * inv);
                    x_hat.data_mut()[i] = xh;
                    y.data_mut()[i] = g * xh + be;
                }
            }
            let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
            let mom = self.momentum;
            self.running_mean[ch] = T::from_f64_lossy(mom * self.running_mean[ch].as_f64() + (1.0 - mom) * mean);
            self.running_var[ch] = T::from_f64_lossy(mom * self.running_var[ch].as_f64() + (1.0 - mom) * unbiased);
        }
        self.cache = Some(BnCache { x_hat, inv_std });
        Ok(y)
    }

    /// Train-mode backward.
    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let BnCache { x_hat, inv_std } =
            self.cache.take().ok_or_else(|| Error::Shape("batch norm backward without train forward".into()))?;
        grad_out.ensure_shape(x_hat.shape(), "batch norm backward")?;
        let [b, c, h, w] = x_hat.shape();
        let hw = h * w;
        let count = (b * hw) as f64;
        let mut grad_in = Tensor::zeros(x_hat.shape());
        for ch in 0..c {
            let planes = || (0..b).map(move |n| (n * c + ch) * hw);
            let (mut sum_dy, mut sum_dy_xh) = (0.0, 0.0);
            for off in planes() {
                for i in off..off + hw {
                    let dy = grad_out.data()[i].as_f64();
                    sum_dy += dy;
                    sum_dy_xh += dy * x_hat.data()[i].as_f64();
                }
            }
            self.gamma.grad[ch] += T::from_f64_lossy(sum_dy_xh);
            self.beta.grad[ch] += T::from_f64_lossy(sum_dy);
            let g = self.gamma.value[ch].as_f64();
            let k = g * inv_std[ch] / count;
            for off in planes() {
                for i in off..off + hw {
                    let dy = grad_out.data()[i].as_f64();
                    let xh = x_hat.data()[i].as_f64();
                    grad_in.data_mut()[i] = T::from_f64_lossy(k * (count * dy - sum_dy - xh * sum_dy_xh));
                }
            }
        }
        Ok(grad_in)
    }
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Masks the upstream gradient by `x > 0` (subgradient 0 at 0). Works with
/// either the pre-activation or the activation as `x`.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.ensure_shape(x.shape(), "relu backward")?;
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

pub fn upsample_nearest2x<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [b, c, h, w] = x.shape();
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = Tensor::zeros([b, c, oh, ow]);
    for (plane_in, plane_out) in x.data().chunks(h * w).zip(y.data_mut().chunks_mut(oh * ow)) {
        for oy in 0..oh {
            let src = &plane_in[(oy / 2) * w..(oy / 2 + 1) * w];
            let dst = &mut plane_out[oy * ow..(oy + 1) * ow];
            for (ox, d) in dst.iter_mut().enumerate() {
                *d = src[ox / 2];
            }
        }
    }
    y
}

/// Sums the gradient over each 2×2 output group.
pub fn upsample_nearest2x_backward<T: Scalar>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, oh, ow] = grad_out.shape();
    if oh % 2 != 0 || ow % 2 != 0 {
        return Err(Error::Shape(format!("upsample backward needs even dims, got {oh}x{ow}")));
    }
    let (h, w) = (oh / 2, ow / 2);
    let mut g = Tensor::zeros([b, c, h, w]);
    for (plane_out, plane_in) in grad_out.data().chunks(oh * ow).zip(g.data_mut().chunks_mut(h * w)) {
        for oy in 0..oh {
            for ox in 0..ow {
                plane_in[(oy / 2) * w + ox / 2] += plane_out[oy * ow + ox];
            }
        }
    }
    Ok(g)
}

/// Per-pixel softmax over the channel axis.
pub fn softmax_channels<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let [b, c, h, w] = logits.shape();
    let hw = h * w;
    let mut p = Tensor::zeros(logits.shape());
    let src = logits.data();
    let dst = p.data_mut();
    for n in 0..b {
        let base = n * c * hw;
        for i in 0..hw {
            let mut max = T::neg_infinity();
            for ch in 0..c {
                max = max.max(src[base + ch * hw + i]);
            }
            let mut sum = T::zero();
            for ch in 0..c {
                let e = (src[base + ch * hw + i] - max).exp();
                dst[base + ch * hw + i] = e;
                sum += e;
            }
            for ch in 0..c {
                dst[base + ch * hw + i] /= sum;
            }
        }
    }
    p
}

/// Pulls a gradient w.r.t. probabilities back through the softmax:
/// `dz_i = p_i (g_i - Σ_j p_j g_j)`.
pub fn softmax_channels_backward<T: Scalar>(probs: &Tensor<T>, grad_probs: &Tensor<T>) -> Result<Tensor<T>> {
    grad_probs.ensure_shape(probs.shape(), "softmax backward")?;
    let [b, c, h, w] = probs.shape();
    let hw = h * w;
    let mut dz = Tensor::zeros(probs.shape());
    let (p, g) = (probs.data(), grad_probs.data());
    let out = dz.data_mut();
    for n in 0..b {
        let base = n * c * hw;
        for i in 0..hw {
            let mut dot = T::zero();
            for ch in 0..c {
                dot += p[base + ch * hw + i] * g[base + ch * hw + i];
            }
            for ch in 0..c {
                let k = base + ch * hw + i;
                out[k] = p[k] * (g[k] - dot);
            }
        }
    }
    Ok(dz)
}
