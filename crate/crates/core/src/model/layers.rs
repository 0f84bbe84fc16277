//! Convolution and batch normalization with explicit backward passes.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scalar::gemm;
use super::{Scalar, Tensor4};

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `out_channels x in_channels x kernel x kernel`.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrad<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Conv2d<T> {
    /// He-normal weights (variance `2 / fan_in`), zero bias.
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let normal = Normal::new(0.0, libm::sqrt(2.0 / fan_in as f64)).expect("positive std");
        let weight = (0..out_channels * fan_in)
            .map(|_| T::cast(normal.sample(rng)))
            .collect();
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
            weight,
            bias: vec![T::zero(); out_channels],
        }
    }

    pub fn out_size(&self, size: usize) -> usize {
        (size + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    // Output columns `ox` whose input column `ox * s + kx - p` lies inside
    // `0..w`.
    fn valid_columns(&self, kx: usize, w: usize, wo: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
        let hi = if w + p > kx { ((w + p - kx - 1) / s + 1).min(wo) } else { 0 };
        (lo, hi.max(lo))
    }

    // Column matrix `(C k k) x (Ho Wo)` for one sample.
    fn im2col(&self, x: &[T], h: usize, w: usize, col: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        let positions = ho * wo;
        for ci in 0..self.in_channels {
            let channel = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * positions..(row + 1) * positions];
                    let (lo, hi) = self.valid_columns(kx, w, wo);
                    for oy in 0..ho {
                        let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                        let iy = oy * s + ky;
                        if iy < p || iy - p >= h {
                            out_row.fill(T::zero());
                            continue;
                        }
                        let src = &channel[(iy - p) * w..(iy - p + 1) * w];
                        out_row[..lo].fill(T::zero());
                        out_row[hi..].fill(T::zero());
                        if lo < hi {
                            let start = lo * s + kx - p;
                            if s == 1 {
                                out_row[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                            } else {
                                for (d, v) in out_row[lo..hi].iter_mut().zip(src[start..].iter().step_by(s)) {
                                    *d = *v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[T], h: usize, w: usize, dx: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        let positions = ho * wo;
        for ci in 0..self.in_channels {
            let channel = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &col[row * positions..(row + 1) * positions];
                    let (lo, hi) = self.valid_columns(kx, w, wo);
                    if lo == hi {
                        continue;
                    }
                    let start = lo * s + kx - p;
                    for oy in 0..ho {
                        let iy = oy * s + ky;
                        if iy < p || iy - p >= h {
                            continue;
                        }
                        let dst = &mut channel[(iy - p) * w..(iy - p + 1) * w];
                        let values = &src[oy * wo + lo..oy * wo + hi];
                        for (d, &v) in dst[start..].iter_mut().step_by(s).zip(values) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Tensor4<T> {
        debug_assert_eq!(x.c, self.in_channels);
        let (ho, wo) = (self.out_size(x.h), self.out_size(x.w));
        let positions = ho * wo;
        let mut out = Tensor4::zeros(x.n, self.out_channels, ho, wo);
        let mut col = vec![T::zero(); self.patch_len() * positions];
        for i in 0..x.n {
            self.im2col(x.sample(i), x.h, x.w, &mut col);
            let y = out.sample_mut(i);
            for (co, chunk) in y.chunks_exact_mut(positions).enumerate() {
                chunk.fill(self.bias[co]);
            }
            gemm(
                self.out_channels,
                self.patch_len(),
                positions,
                &self.weight,
                false,
                &col,
                false,
                y,
                T::one(),
            );
        }
        out
    }

    /// Accumulates parameter gradients into `grad`; returns the input
    /// gradient when `need_input` is set.
    pub fn backward(
        &self,
        x: &Tensor4<T>,
        dy: &Tensor4<T>,
        grad: &mut ConvGrad<T>,
        need_input: bool,
    ) -> Option<Tensor4<T>> {
        let positions = dy.h * dy.w;
        let patch = self.patch_len();
        let mut col = vec![T::zero(); patch * positions];
        let mut dcol = vec![T::zero(); patch * positions];
        let mut dx = need_input.then(|| Tensor4::zeros(x.n, x.c, x.h, x.w));
        for i in 0..x.n {
            let dy_i = dy.sample(i);
            for (co, chunk) in dy_i.chunks_exact(positions).enumerate() {
                let s = chunk.iter().fold(T::zero(), |a, &b| a + b);
                grad.bias[co] = grad.bias[co] + s;
            }
            self.im2col(x.sample(i), x.h, x.w, &mut col);
            gemm(
                self.out_channels,
                positions,
                patch,
                dy_i,
                false,
                &col,
                true,
                &mut grad.weight,
                T::one(),
            );
            if let Some(dx) = dx.as_mut() {
                gemm(
                    patch,
                    self.out_channels,
                    positions,
                    &self.weight,
                    true,
                    dy_i,
                    false,
                    &mut dcol,
                    T::zero(),
                );
                self.col2im(&dcol, x.h, x.w, dx.sample_mut(i));
            }
        }
        dx
    }

    pub fn zero_grad(&self) -> ConvGrad<T> {
        ConvGrad {
            weight: vec![T::zero(); self.weight.len()],
            bias: vec![T::zero(); self.bias.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnGrad<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// Train-mode batch statistics kept for backward and running-stat updates.
#[derive(Debug, Clone, PartialEq)]
pub struct BnCache<T> {
    pub x_hat: Tensor4<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub const MOMENTUM: f64 = 0.1;
    pub const EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: Self::MOMENTUM,
            eps: Self::EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward_train(&self, x: &Tensor4<T>) -> (Tensor4<T>, BnCache<T>) {
        let c = self.channels();
        let plane = x.plane();
        let count = T::cast((x.n * plane) as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for i in 0..x.n {
            for (ch, chunk) in x.sample(i).chunks_exact(plane).enumerate() {
                mean[ch] = mean[ch] + chunk.iter().fold(T::zero(), |a, &b| a + b);
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / count);
        for i in 0..x.n {
            for (ch, chunk) in x.sample(i).chunks_exact(plane).enumerate() {
                let m = mean[ch];
                var[ch] = var[ch] + chunk.iter().fold(T::zero(), |a, &b| a + (b - m) * (b - m));
            }
        }
        var.iter_mut().for_each(|v| *v = *v / count);
        let eps = T::cast(self.eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

        let mut x_hat = x.clone();
        let mut y = x.clone();
        for i in 0..x.n {
            let xs = x.sample(i);
            let xh = x_hat.sample_mut(i);
            for ch in 0..c {
                for (o, &v) in xh[ch * plane..(ch + 1) * plane]
                    .iter_mut()
                    .zip(&xs[ch * plane..(ch + 1) * plane])
                {
                    *o = (v - mean[ch]) * inv_std[ch];
                }
            }
            let ys = y.sample_mut(i);
            for ch in 0..c {
                let (g, b) = (self.gamma[ch], self.beta[ch]);
                for (o, &h) in ys[ch * plane..(ch + 1) * plane]
                    .iter_mut()
                    .zip(&xh[ch * plane..(ch + 1) * plane])
                {
                    *o = g * h + b;
                }
            }
        }
        (
            y,
            BnCache {
                x_hat,
                inv_std,
                mean,
                var,
            },
        )
    }

    pub fn forward_eval(&self, x: &Tensor4<T>) -> Tensor4<T> {
        let plane = x.plane();
        let eps = T::cast(self.eps);
        let scale: Vec<T> = (0..self.channels())
            .map(|ch| self.gamma[ch] / (self.running_var[ch] + eps).sqrt())
            .collect();
        let mut y = x.clone();
        for i in 0..x.n {
            for (ch, chunk) in y.sample_mut(i).chunks_exact_mut(plane).enumerate() {
                let (m, s, b) = (self.running_mean[ch], scale[ch], self.beta[ch]);
                chunk.iter_mut().for_each(|v| *v = (*v - m) * s + b);
            }
        }
        y
    }

    /// Running statistics use the unbiased batch variance.
    pub fn update_running(&mut self, cache: &BnCache<T>, count: usize) {
        let mom = T::cast(self.momentum);
        let keep = T::one() - mom;
        let unbias = if count > 1 {
            T::cast(count as f64 / (count - 1) as f64)
        } else {
            T::one()
        };
        for ch in 0..self.channels() {
            self.running_mean[ch] = keep * self.running_mean[ch] + mom * cache.mean[ch];
            self.running_var[ch] = keep * self.running_var[ch] + mom * cache.var[ch] * unbias;
        }
    }

    pub fn backward(&self, cache: &BnCache<T>, dy: &Tensor4<T>, grad: &mut BnGrad<T>) -> Tensor4<T> {
        let c = self.channels();
        let plane = dy.plane();
        let count = T::cast((dy.n * plane) as f64);
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for i in 0..dy.n {
            let d = dy.sample(i);
            let xh = cache.x_hat.sample(i);
            for ch in 0..c {
                let r = ch * plane..(ch + 1) * plane;
                for (&g, &h) in d[r.clone()].iter().zip(&xh[r]) {
                    sum_dy[ch] = sum_dy[ch] + g;
                    sum_dy_xhat[ch] = sum_dy_xhat[ch] + g * h;
                }
            }
        }
        for ch in 0..c {
            grad.gamma[ch] = grad.gamma[ch] + sum_dy_xhat[ch];
            grad.beta[ch] = grad.beta[ch] + sum_dy[ch];
        }
        let mut dx = dy.clone();
        for i in 0..dy.n {
            let xh = cache.x_hat.sample(i);
            let out = dx.sample_mut(i);
            for ch in 0..c {
                let k = self.gamma[ch] * cache.inv_std[ch] / count;
                let (sd, sdx) = (sum_dy[ch], sum_dy_xhat[ch]);
                let r = ch * plane..(ch + 1) * plane;
                for (o, &h) in out[r.clone()].iter_mut().zip(&xh[r]) {
                    *o = k * (count * *o - sd - h * sdx);
                }
            }
        }
        dx
    }

    pub fn zero_grad(&self) -> BnGrad<T> {
        BnGrad {
            gamma: vec![T::zero(); self.channels()],
            beta: vec![T::zero(); self.channels()],
        }
    }
}

/// Pointwise nonlinearity after each normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// `x * sigmoid(x)`; smooth, so finite differences are well-posed.
    #[default]
    Silu,
}

impl Activation {
    /// Applies the activation in place and returns what `backward` needs:
    /// the input for ReLU, the sigmoid gate for SiLU.
    pub(crate) fn forward_inplace<T: Scalar>(self, x: &mut Tensor4<T>) -> Tensor4<T> {
        match self {
            Activation::Relu => {
                let pre = x.clone();
                self.apply(x);
                pre
            }
            Activation::Silu => {
                let mut gate = x.clone();
                for (v, s) in x.data.iter_mut().zip(gate.data.iter_mut()) {
                    *s = sigmoid(*v);
                    *v = *v * *s;
                }
                gate
            }
        }
    }

    /// Same as `forward_inplace` without keeping the pre-activation.
    pub(crate) fn apply<T: Scalar>(self, x: &mut Tensor4<T>) {
        match self {
            Activation::Relu => x.data.iter_mut().for_each(|v| {
                if *v < T::zero() {
                    *v = T::zero()
                }
            }),
            Activation::Silu => x.data.iter_mut().for_each(|v| *v = *v * sigmoid(*v)),
        }
    }

    /// Multiplies `dy` by the activation derivative, given what
    /// `forward_inplace` saved and the activated output `out`.
    pub(crate) fn backward<T: Scalar>(self, saved: &Tensor4<T>, out: &Tensor4<T>, dy: &mut Tensor4<T>) {
        match self {
            Activation::Relu => {
                for (g, &p) in dy.data.iter_mut().zip(&saved.data) {
                    if p <= T::zero() {
                        *g = T::zero();
                    }
                }
            }
            Activation::Silu => {
                // d/dx x s(x) = s + x s (1 - s) = s + out (1 - s)
                for ((g, &s), &y) in dy.data.iter_mut().zip(&saved.data).zip(&out.data) {
                    *g = *g * (s + y * (T::one() - s));
                }
            }
        }
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
