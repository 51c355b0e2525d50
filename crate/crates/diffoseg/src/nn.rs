//! Layers with explicit forward and backward passes.
//!
//! Forward functions are pure; the caller keeps whatever the matching
//! backward needs (usually the layer input). Backward functions accumulate
//! parameter gradients into [`Param::grad`] and return the input gradient.

use rand::Rng;

use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Scalar, Tensor};

/// A learnable array with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<S> {
    pub shape: Vec<usize>,
    pub value: Vec<S>,
    pub grad: Vec<S>,
}

impl<S: Scalar> Param<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            value: vec![S::zero(); len],
            grad: vec![S::zero(); len],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let mut p = Self::zeros(shape);
        p.value.iter_mut().for_each(|x| *x = S::of(v));
        p
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(shape);
        for x in p.value.iter_mut() {
            *x = S::of(rng.random_range(-bound..bound));
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = S::zero());
    }
}

/// Anything holding named parameters.
pub trait Module<S: Scalar> {
    /// Visit every parameter with its dotted path under `prefix`, in a fixed
    /// order.
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>));

    fn zero_grad(&mut self) {
        self.visit_params("", &mut |_, p| p.zero_grad());
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.len());
        n
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Square convolution, stride 1, zero padding `k / 2`.
#[derive(Debug, Clone)]
pub struct Conv2d<S> {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub weight: Param<S>,
    pub bias: Param<S>,
}

impl<S: Scalar> Conv2d<S> {
    /// Kaiming-uniform weights (`bound = sqrt(6 / fan_in)`), zero bias.
    pub fn new<R: Rng + ?Sized>(in_c: usize, out_c: usize, k: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (in_c * k * k) as f64).sqrt();
        Self {
            in_c,
            out_c,
            k,
            weight: Param::uniform(&[out_c, in_c, k, k], bound, rng),
            bias: Param::zeros(&[out_c]),
        }
    }

    pub fn zeros(in_c: usize, out_c: usize, k: usize) -> Self {
        Self {
            in_c,
            out_c,
            k,
            weight: Param::zeros(&[out_c, in_c, k, k]),
            bias: Param::zeros(&[out_c]),
        }
    }

    fn patch_len(&self) -> usize {
        self.in_c * self.k * self.k
    }

    pub fn forward(&self, x: &Tensor<S>) -> Tensor<S> {
        assert_eq!(x.c, self.in_c, "conv input channels");
        let hw = x.hw();
        let mut out = Tensor::zeros(x.n, self.out_c, x.h, x.w);
        let mut cols = if self.k == 1 { Vec::new() } else { vec![S::zero(); self.patch_len() * hw] };
        for i in 0..x.n {
            let src: &[S] = if self.k == 1 {
                x.item(i)
            } else {
                im2col(x.item(i), x.c, x.h, x.w, self.k, &mut cols);
                &cols
            };
            let dst = out.item_mut(i);
            for (o, plane) in dst.chunks_exact_mut(hw).enumerate() {
                plane.iter_mut().for_each(|v| *v = self.bias.value[o]);
            }
            gemm_nn(self.out_c, self.patch_len(), hw, &self.weight.value, src, dst, S::one());
        }
        out
    }

    /// Accumulates weight and bias gradients; returns `dL/dx` when requested.
    pub fn backward(&mut self, x: &Tensor<S>, dy: &Tensor<S>, need_dx: bool) -> Option<Tensor<S>> {
        let hw = x.hw();
        let patch = self.patch_len();
        let mut cols = if self.k == 1 { Vec::new() } else { vec![S::zero(); patch * hw] };
        let mut dcols = vec![S::zero(); patch * hw];
        let mut dx = need_dx.then(|| Tensor::zeros_like(x));
        for i in 0..x.n {
            let g = dy.item(i);
            for (o, plane) in g.chunks_exact(hw).enumerate() {
                let s = plane.iter().fold(S::zero(), |a, &v| a + v);
                self.bias.grad[o] = self.bias.grad[o] + s;
            }
            let src: &[S] = if self.k == 1 {
                x.item(i)
            } else {
                im2col(x.item(i), x.c, x.h, x.w, self.k, &mut cols);
                &cols
            };
            gemm_nt(self.out_c, hw, patch, g, src, &mut self.weight.grad, S::one());
            if let Some(dx) = dx.as_mut() {
                if self.k == 1 {
                    gemm_tn(patch, self.out_c, hw, &self.weight.value, g, dx.item_mut(i), S::zero());
                } else {
                    gemm_tn(patch, self.out_c, hw, &self.weight.value, g, &mut dcols, S::zero());
                    col2im_add(&dcols, x.c, x.h, x.w, self.k, dx.item_mut(i));
                }
            }
        }
        dx
    }
}

impl<S: Scalar> Module<S> for Conv2d<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Unfold `c x h x w` into `(c*k*k) x (h*w)` patches with zero padding.
fn im2col<S: Scalar>(src: &[S], c: usize, h: usize, w: usize, k: usize, cols: &mut [S]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &src[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let x_lo = pad.saturating_sub(kx);
                let x_hi = (w + pad).saturating_sub(kx).min(w);
                for y in 0..h {
                    let line = &mut dst[y * w..(y + 1) * w];
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h || x_lo >= x_hi {
                        line.iter_mut().for_each(|v| *v = S::zero());
                        continue;
                    }
                    let sy = sy - pad;
                    line[..x_lo].iter_mut().for_each(|v| *v = S::zero());
                    line[x_hi..].iter_mut().for_each(|v| *v = S::zero());
                    let sx_lo = x_lo + kx - pad;
                    line[x_lo..x_hi]
                        .copy_from_slice(&plane[sy * w + sx_lo..sy * w + sx_lo + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`], accumulating into `dst`.
fn col2im_add<S: Scalar>(cols: &[S], c: usize, h: usize, w: usize, k: usize, dst: &mut [S]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dst[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let x_lo = pad.saturating_sub(kx);
                let x_hi = (w + pad).saturating_sub(kx).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h {
                        continue;
                    }
                    let sy = sy - pad;
                    let sx_lo = x_lo + kx - pad;
                    let out = &mut plane[sy * w + sx_lo..sy * w + sx_lo + (x_hi - x_lo)];
                    for (o, v) in out.iter_mut().zip(&src[y * w + x_lo..y * w + x_hi]) {
                        *o = *o + *v;
                    }
                }
            }
        }
    }
}

/// Saved statistics for a normalization backward pass.
#[derive(Debug, Clone)]
pub struct NormCache<S> {
    xhat: Vec<S>,
    inv_std: Vec<S>,
}

/// Group normalization with per-channel affine parameters.
#[derive(Debug, Clone)]
pub struct GroupNorm<S> {
    pub groups: usize,
    pub channels: usize,
    pub eps: f64,
    pub gamma: Param<S>,
    pub beta: Param<S>,
}

impl<S: Scalar> GroupNorm<S> {
    /// Uses the largest group count `<= 8` that divides `channels`.
    pub fn new(channels: usize) -> Self {
        let groups = (1..=8.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1);
        Self {
            groups,
            channels,
            eps: 1e-5,
            gamma: Param::filled(&[channels], 1.0),
            beta: Param::zeros(&[channels]),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> (Tensor<S>, NormCache<S>) {
        assert_eq!(x.c, self.channels, "group norm channels");
        let hw = x.hw();
        let per = self.channels / self.groups;
        let len = per * hw;
        let mut out = Tensor::zeros_like(x);
        let mut xhat = vec![S::zero(); x.data.len()];
        let mut inv_std = Vec::with_capacity(x.n * self.groups);
        let nf = len as f64;
        for i in 0..x.n {
            for g in 0..self.groups {
                let start = (i * self.channels + g * per) * hw;
                let seg = &x.data[start..start + len];
                let mean = seg.iter().map(|v| v.as_f64()).sum::<f64>() / nf;
                let var = seg.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / nf;
                let inv = 1.0 / (var + self.eps).sqrt();
                inv_std.push(S::of(inv));
                let (m, invs) = (S::of(mean), S::of(inv));
                for c in 0..per {
                    let ch = g * per + c;
                    let (gm, bt) = (self.gamma.value[ch], self.beta.value[ch]);
                    for p in 0..hw {
                        let idx = start + c * hw + p;
                        let xh = (x.data[idx] - m) * invs;
                        xhat[idx] = xh;
                        out.data[idx] = gm * xh + bt;
                    }
                }
            }
        }
        (out, NormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &NormCache<S>, dy: &Tensor<S>) -> Tensor<S> {
        let hw = dy.hw();
        let per = self.channels / self.groups;
        let len = per * hw;
        let nf = S::of(len as f64);
        let mut dx = Tensor::zeros_like(dy);
        for i in 0..dy.n {
            for g in 0..self.groups {
                let start = (i * self.channels + g * per) * hw;
                let mut sum_d = S::zero();
                let mut sum_dx = S::zero();
                for c in 0..per {
                    let ch = g * per + c;
                    let gm = self.gamma.value[ch];
                    let (mut gb, mut gg) = (S::zero(), S::zero());
                    for p in 0..hw {
                        let idx = start + c * hw + p;
                        let d = dy.data[idx];
                        gb = gb + d;
                        gg = gg + d * cache.xhat[idx];
                        let dxh = d * gm;
                        sum_d = sum_d + dxh;
                        sum_dx = sum_dx + dxh * cache.xhat[idx];
                    }
                    self.beta.grad[ch] = self.beta.grad[ch] + gb;
                    self.gamma.grad[ch] = self.gamma.grad[ch] + gg;
                }
                let inv = cache.inv_std[i * self.groups + g];
                for c in 0..per {
                    let gm = self.gamma.value[g * per + c];
                    for p in 0..hw {
                        let idx = start + c * hw + p;
                        let dxh = dy.data[idx] * gm;
                        dx.data[idx] = inv * (dxh - sum_d / nf - cache.xhat[idx] * sum_dx / nf);
                    }
                }
            }
        }
        dx
    }
}

impl<S: Scalar> Module<S> for GroupNorm<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// Layer normalization across channels, separately at every spatial position.
#[derive(Debug, Clone)]
pub struct ChannelNorm<S> {
    pub channels: usize,
    pub eps: f64,
    pub gamma: Param<S>,
    pub beta: Param<S>,
}

impl<S: Scalar> ChannelNorm<S> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            eps: 1e-5,
            gamma: Param::filled(&[channels], 1.0),
            beta: Param::zeros(&[channels]),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> (Tensor<S>, NormCache<S>) {
        assert_eq!(x.c, self.channels, "channel norm channels");
        let hw = x.hw();
        let c = self.channels;
        let cf = c as f64;
        let mut out = Tensor::zeros_like(x);
        let mut xhat = vec![S::zero(); x.data.len()];
        let mut inv_std = Vec::with_capacity(x.n * hw);
        for i in 0..x.n {
            let base = i * c * hw;
            for p in 0..hw {
                let at = |ch: usize| base + ch * hw + p;
                let mean = (0..c).map(|ch| x.data[at(ch)].as_f64()).sum::<f64>() / cf;
                let var = (0..c).map(|ch| (x.data[at(ch)].as_f64() - mean).powi(2)).sum::<f64>() / cf;
                let inv = 1.0 / (var + self.eps).sqrt();
                inv_std.push(S::of(inv));
                for ch in 0..c {
                    let xh = (x.data[at(ch)] - S::of(mean)) * S::of(inv);
                    xhat[at(ch)] = xh;
                    out.data[at(ch)] = self.gamma.value[ch] * xh + self.beta.value[ch];
                }
            }
        }
        (out, NormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &NormCache<S>, dy: &Tensor<S>) -> Tensor<S> {
        let hw = dy.hw();
        let c = self.channels;
        let cf = S::of(c as f64);
        let mut dx = Tensor::zeros_like(dy);
        for i in 0..dy.n {
            let base = i * c * hw;
            for p in 0..hw {
                let at = |ch: usize| base + ch * hw + p;
                let (mut sum_d, mut sum_dx) = (S::zero(), S::zero());
                for ch in 0..c {
                    let d = dy.data[at(ch)];
                    let xh = cache.xhat[at(ch)];
                    self.beta.grad[ch] = self.beta.grad[ch] + d;
                    self.gamma.grad[ch] = self.gamma.grad[ch] + d * xh;
                    let dxh = d * self.gamma.value[ch];
                    sum_d = sum_d + dxh;
                    sum_dx = sum_dx + dxh * xh;
                }
                let inv = cache.inv_std[i * hw + p];
                for ch in 0..c {
                    let dxh = dy.data[at(ch)] * self.gamma.value[ch];
                    dx.data[at(ch)] = inv * (dxh - sum_d / cf - cache.xhat[at(ch)] * sum_dx / cf);
                }
            }
        }
        dx
    }
}

impl<S: Scalar> Module<S> for ChannelNorm<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// Fully connected layer on `(n, in, 1, 1)` tensors.
#[derive(Debug, Clone)]
pub struct Linear<S> {
    pub in_f: usize,
    pub out_f: usize,
    pub weight: Param<S>,
    pub bias: Param<S>,
}

impl<S: Scalar> Linear<S> {
    /// Uniform `+-1/sqrt(in)` weights, zero bias.
    pub fn new<R: Rng + ?Sized>(in_f: usize, out_f: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_f as f64).sqrt();
        Self {
            in_f,
            out_f,
            weight: Param::uniform(&[out_f, in_f], bound, rng),
            bias: Param::zeros(&[out_f]),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Tensor<S> {
        assert_eq!(x.item_len(), self.in_f, "linear input width");
        let mut out = Tensor::zeros(x.n, self.out_f, 1, 1);
        for row in out.data.chunks_exact_mut(self.out_f) {
            row.copy_from_slice(&self.bias.value);
        }
        gemm_nt(x.n, self.in_f, self.out_f, &x.data, &self.weight.value, &mut out.data, S::one());
        out
    }

    pub fn backward(&mut self, x: &Tensor<S>, dy: &Tensor<S>) -> Tensor<S> {
        for row in dy.data.chunks_exact(self.out_f) {
            for (g, d) in self.bias.grad.iter_mut().zip(row) {
                *g = *g + *d;
            }
        }
        gemm_tn(self.out_f, x.n, self.in_f, &dy.data, &x.data, &mut self.weight.grad, S::one());
        let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
        gemm_nn(x.n, self.out_f, self.in_f, &dy.data, &self.weight.value, &mut dx.data, S::zero());
        dx
    }
}

impl<S: Scalar> Module<S> for Linear<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

fn map<S: Scalar>(x: &Tensor<S>, f: impl Fn(S) -> S) -> Tensor<S> {
    Tensor::from_vec(x.n, x.c, x.h, x.w, x.data.iter().map(|&v| f(v)).collect())
}

fn zip_map<S: Scalar>(x: &Tensor<S>, dy: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    Tensor::from_vec(
        x.n,
        x.c,
        x.h,
        x.w,
        x.data.iter().zip(&dy.data).map(|(&a, &d)| f(a, d)).collect(),
    )
}

pub fn sigmoid<S: Scalar>(v: S) -> S {
    S::one() / (S::one() + (-v).exp())
}

pub fn silu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    map(x, |v| v * sigmoid(v))
}

pub fn silu_backward<S: Scalar>(x: &Tensor<S>, dy: &Tensor<S>) -> Tensor<S> {
    zip_map(x, dy, |v, d| {
        let s = sigmoid(v);
        d * (s + v * s * (S::one() - s))
    })
}

pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    map(x, |v| v.max(S::zero()))
}

pub fn relu_backward<S: Scalar>(x: &Tensor<S>, dy: &Tensor<S>) -> Tensor<S> {
    zip_map(x, dy, |v, d| if v > S::zero() { d } else { S::zero() })
}

pub fn leaky_relu<S: Scalar>(x: &Tensor<S>, slope: f64) -> Tensor<S> {
    let s = S::of(slope);
    map(x, |v| if v > S::zero() { v } else { v * s })
}

pub fn leaky_relu_backward<S: Scalar>(x: &Tensor<S>, dy: &Tensor<S>, slope: f64) -> Tensor<S> {
    let s = S::of(slope);
    zip_map(x, dy, |v, d| if v > S::zero() { d } else { d * s })
}

pub fn sigmoid_tensor<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    map(x, sigmoid)
}

/// 2x2 average pooling; odd trailing rows/columns are dropped.
pub fn avg_pool2<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.n, x.c, h2, w2);
    let q = S::of(0.25);
    for i in 0..x.n {
        for c in 0..x.c {
            let src = x.plane(i, c);
            let dst = out.plane_mut(i, c);
            for y in 0..h2 {
                for xx in 0..w2 {
                    let a = src[2 * y * x.w + 2 * xx];
                    let b = src[2 * y * x.w + 2 * xx + 1];
                    let cc = src[(2 * y + 1) * x.w + 2 * xx];
                    let d = src[(2 * y + 1) * x.w + 2 * xx + 1];
                    dst[y * w2 + xx] = (a + b + cc + d) * q;
                }
            }
        }
    }
    out
}

pub fn avg_pool2_backward<S: Scalar>(dy: &Tensor<S>, h: usize, w: usize) -> Tensor<S> {
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    let q = S::of(0.25);
    for i in 0..dy.n {
        for c in 0..dy.c {
            let g = dy.plane(i, c);
            let dst = dx.plane_mut(i, c);
            for y in 0..dy.h {
                for xx in 0..dy.w {
                    let v = g[y * dy.w + xx] * q;
                    dst[2 * y * w + 2 * xx] = v;
                    dst[2 * y * w + 2 * xx + 1] = v;
                    dst[(2 * y + 1) * w + 2 * xx] = v;
                    dst[(2 * y + 1) * w + 2 * xx + 1] = v;
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling to `(h, w)` (which may be odd).
pub fn upsample2<S: Scalar>(x: &Tensor<S>, h: usize, w: usize) -> Tensor<S> {
    let mut out = Tensor::zeros(x.n, x.c, h, w);
    for i in 0..x.n {
        for c in 0..x.c {
            let src = x.plane(i, c);
            let dst = out.plane_mut(i, c);
            for y in 0..h {
                let sy = (y / 2).min(x.h - 1);
                for xx in 0..w {
                    dst[y * w + xx] = src[sy * x.w + (xx / 2).min(x.w - 1)];
                }
            }
        }
    }
    out
}

pub fn upsample2_backward<S: Scalar>(dy: &Tensor<S>, h: usize, w: usize) -> Tensor<S> {
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    for i in 0..dy.n {
        for c in 0..dy.c {
            let g = dy.plane(i, c);
            let dst = dx.plane_mut(i, c);
            for y in 0..dy.h {
                let sy = (y / 2).min(h - 1);
                for xx in 0..dy.w {
                    let idx = sy * w + (xx / 2).min(w - 1);
                    dst[idx] = dst[idx] + g[y * dy.w + xx];
                }
            }
        }
    }
    dx
}

pub fn concat_channels<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    assert!(a.n == b.n && a.h == b.h && a.w == b.w, "concat spatial dims");
    let mut out = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
    for i in 0..a.n {
        let dst = out.item_mut(i);
        dst[..a.item_len()].copy_from_slice(a.item(i));
        dst[a.item_len()..].copy_from_slice(b.item(i));
    }
    out
}

pub fn split_channels<S: Scalar>(x: &Tensor<S>, first: usize) -> (Tensor<S>, Tensor<S>) {
    let hw = x.hw();
    let mut a = Tensor::zeros(x.n, first, x.h, x.w);
    let mut b = Tensor::zeros(x.n, x.c - first, x.h, x.w);
    for i in 0..x.n {
        let src = x.item(i);
        a.item_mut(i).copy_from_slice(&src[..first * hw]);
        b.item_mut(i).copy_from_slice(&src[first * hw..]);
    }
    (a, b)
}

/// Spatial mean per channel: `(n, c, h, w) -> (n, c, 1, 1)`.
pub fn spatial_mean<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let inv = S::of(1.0 / x.hw() as f64);
    let data = x
        .data
        .chunks_exact(x.hw())
        .map(|p| p.iter().fold(S::zero(), |a, &v| a + v) * inv)
        .collect();
    Tensor::from_vec(x.n, x.c, 1, 1, data)
}

pub fn spatial_mean_backward<S: Scalar>(dy: &Tensor<S>, h: usize, w: usize) -> Tensor<S> {
    let inv = S::of(1.0 / (h * w) as f64);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    for (plane, &g) in dx.data.chunks_exact_mut(h * w).zip(&dy.data) {
        plane.iter_mut().for_each(|v| *v = g * inv);
    }
    dx
}

/// Per-channel spatial sum: the adjoint of broadcasting a `(n, c)` vector.
pub fn spatial_sum<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let data = x
        .data
        .chunks_exact(x.hw())
        .map(|p| p.iter().fold(S::zero(), |a, &v| a + v))
        .collect();
    Tensor::from_vec(x.n, x.c, 1, 1, data)
}

/// `x[n, c, :, :] += v[n, c]`.
pub fn add_channel_vec<S: Scalar>(x: &mut Tensor<S>, v: &Tensor<S>) {
    assert_eq!(v.data.len(), x.n * x.c, "broadcast vector size");
    let hw = x.hw();
    for (plane, &b) in x.data.chunks_exact_mut(hw).zip(&v.data) {
        plane.iter_mut().for_each(|e| *e = *e + b);
    }
}

/// `x[n, c, :, :] * g[n, c]`.
pub fn scale_channels<S: Scalar>(x: &Tensor<S>, g: &Tensor<S>) -> Tensor<S> {
    assert_eq!(g.data.len(), x.n * x.c, "gate size");
    let mut out = x.clone();
    let hw = x.hw();
    for (plane, &s) in out.data.chunks_exact_mut(hw).zip(&g.data) {
        plane.iter_mut().for_each(|e| *e = *e * s);
    }
    out
}

/// Returns `(dx, dg)` for [`scale_channels`].
pub fn scale_channels_backward<S: Scalar>(
    x: &Tensor<S>,
    g: &Tensor<S>,
    dy: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>) {
    let hw = x.hw();
    let dx = scale_channels(dy, g);
    let dg = x
        .data
        .chunks_exact(hw)
        .zip(dy.data.chunks_exact(hw))
        .map(|(a, d)| a.iter().zip(d).fold(S::zero(), |acc, (&u, &v)| acc + u * v))
        .collect();
    (dx, Tensor::from_vec(g.n, g.c, g.h, g.w, dg))
}

/// Interpolation matrix `(dst x src)` for 1-D bilinear resizing with
/// half-pixel centres (`align_corners = false`).
pub fn bilinear_matrix(src: usize, dst: usize) -> Vec<f64> {
    let mut m = vec![0.0; dst * src];
    let scale = src as f64 / dst as f64;
    for i in 0..dst {
        let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        let frac = pos - lo as f64;
        m[i * src + lo] += 1.0 - frac;
        m[i * src + hi] += frac;
    }
    m
}

/// Bilinear resize of every plane to `(h, w)`.
pub fn resize_bilinear<S: Scalar>(x: &Tensor<S>, h: usize, w: usize) -> Tensor<S> {
    let rh: Vec<S> = bilinear_matrix(x.h, h).into_iter().map(S::of).collect();
    let rw: Vec<S> = bilinear_matrix(x.w, w).into_iter().map(S::of).collect();
    let mut out = Tensor::zeros(x.n, x.c, h, w);
    let mut tmp = vec![S::zero(); h * x.w];
    for i in 0..x.n {
        for c in 0..x.c {
            gemm_nn(h, x.h, x.w, &rh, x.plane(i, c), &mut tmp, S::zero());
            gemm_nt(h, x.w, w, &tmp, &rw, out.plane_mut(i, c), S::zero());
        }
    }
    out
}

pub fn resize_bilinear_backward<S: Scalar>(dy: &Tensor<S>, h: usize, w: usize) -> Tensor<S> {
    let rh: Vec<S> = bilinear_matrix(h, dy.h).into_iter().map(S::of).collect();
    let rw: Vec<S> = bilinear_matrix(w, dy.w).into_iter().map(S::of).collect();
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    let mut tmp = vec![S::zero(); h * dy.w];
    for i in 0..dy.n {
        for c in 0..dy.c {
            gemm_tn(h, dy.h, dy.w, &rh, dy.plane(i, c), &mut tmp, S::zero());
            gemm_nn(h, dy.w, w, &tmp, &rw, dx.plane_mut(i, c), S::zero());
        }
    }
    dx
}
