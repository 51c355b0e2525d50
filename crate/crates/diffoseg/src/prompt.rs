//! Expert prompt block inserted at the encoder bottleneck.
//!
//! A bank of learnable prompt components is mixed with weights predicted from
//! the feature map, fused with the features into one gating vector per expert,
//! and the selected expert's gate drives a short chain of channel-attention
//! blocks.

use rand::Rng;

use crate::nn::{
    concat_channels, join, leaky_relu, leaky_relu_backward, relu, relu_backward,
    resize_bilinear, resize_bilinear_backward, scale_channels, scale_channels_backward, sigmoid,
    spatial_mean, spatial_mean_backward, split_channels, ChannelNorm, Conv2d, Linear, Module,
    NormCache, Param,
};
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptConfig {
    /// Feature channels at the insertion point.
    pub channels: usize,
    pub experts: usize,
    pub components: usize,
    /// Spatial size of each prompt component.
    pub size: usize,
    pub attention_blocks: usize,
    pub reduction: usize,
}

impl PromptConfig {
    pub fn new(channels: usize, experts: usize) -> Self {
        Self {
            channels,
            experts,
            components: 5,
            size: 8,
            attention_blocks: 2,
            reduction: 4,
        }
    }
}

pub const LEAKY_SLOPE: f64 = 0.2;

/// Conv, activation, conv, then a squeeze-excite style channel gate and a
/// residual connection.
#[derive(Debug, Clone)]
pub struct ChannelAttentionBlock<S> {
    pub conv1: Conv2d<S>,
    pub conv2: Conv2d<S>,
    pub squeeze: Linear<S>,
    pub excite: Linear<S>,
}

#[derive(Debug, Clone)]
struct CabCache<S> {
    x: Tensor<S>,
    c1: Tensor<S>,
    a1: Tensor<S>,
    body: Tensor<S>,
    desc: Tensor<S>,
    s1: Tensor<S>,
    r1: Tensor<S>,
    gate: Tensor<S>,
}

impl<S: Scalar> ChannelAttentionBlock<S> {
    /// The second convolution starts at zero so a fresh block is the identity.
    pub fn new<R: Rng + ?Sized>(channels: usize, reduction: usize, rng: &mut R) -> Self {
        let hidden = (channels / reduction).max(1);
        Self {
            conv1: Conv2d::new(channels, channels, 3, rng),
            conv2: Conv2d::zeros(channels, channels, 3),
            squeeze: Linear::new(channels, hidden, rng),
            excite: Linear::new(hidden, channels, rng),
        }
    }

    fn forward(&self, x: &Tensor<S>) -> (Tensor<S>, CabCache<S>) {
        let c1 = self.conv1.forward(x);
        let a1 = relu(&c1);
        let body = self.conv2.forward(&a1);
        let desc = spatial_mean(&body);
        let s1 = self.squeeze.forward(&desc);
        let r1 = relu(&s1);
        let pre = self.excite.forward(&r1);
        let gate = Tensor::from_vec(pre.n, pre.c, 1, 1, pre.data.iter().map(|&v| sigmoid(v)).collect());
        let mut out = scale_channels(&body, &gate);
        out.add_assign(x);
        let cache = CabCache { x: x.clone(), c1, a1, body, desc, s1, r1, gate };
        (out, cache)
    }

    fn backward(&mut self, cache: &CabCache<S>, dy: &Tensor<S>) -> Tensor<S> {
        let (mut dbody, dgate) = scale_channels_backward(&cache.body, &cache.gate, dy);
        let dpre = Tensor::from_vec(
            dgate.n,
            dgate.c,
            1,
            1,
            dgate.data.iter().zip(&cache.gate.data).map(|(&d, &g)| d * g * (S::one() - g)).collect(),
        );
        let dr1 = self.excite.backward(&cache.r1, &dpre);
        let ds1 = relu_backward(&cache.s1, &dr1);
        let ddesc = self.squeeze.backward(&cache.desc, &ds1);
        dbody.add_assign(&spatial_mean_backward(&ddesc, cache.body.h, cache.body.w));
        let da1 = self.conv2.backward(&cache.a1, &dbody, true).expect("dx requested");
        let dc1 = relu_backward(&cache.c1, &da1);
        let mut dx = self.conv1.backward(&cache.x, &dc1, true).expect("dx requested");
        dx.add_assign(dy);
        dx
    }
}

impl<S: Scalar> Module<S> for ChannelAttentionBlock<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
        self.squeeze.visit_params(&join(prefix, "squeeze"), f);
        self.excite.visit_params(&join(prefix, "excite"), f);
    }
}

/// All prompt parameters.
#[derive(Debug, Clone)]
pub struct PromptBlock<S> {
    pub config: PromptConfig,
    /// `[N, C, size, size]` prompt components.
    pub components: Param<S>,
    pub mix: Linear<S>,
    pub prompt_conv: Conv2d<S>,
    pub enhance_convs: Vec<Conv2d<S>>,
    pub enhance_norms: Vec<ChannelNorm<S>>,
    pub head: Linear<S>,
    pub attention: Vec<ChannelAttentionBlock<S>>,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct PromptCache<S> {
    f1: Tensor<S>,
    pooled: Tensor<S>,
    lambda: Tensor<S>,
    resized: Tensor<S>,
    enhance_in: Vec<Tensor<S>>,
    enhance_pre_norm: Tensor<S>,
    enhance_norm: Vec<NormCache<S>>,
    enhance_act_in: Vec<Tensor<S>>,
    head_in: Tensor<S>,
    gate: Tensor<S>,
    experts: Vec<usize>,
    cabs: Vec<CabCache<S>>,
}

impl<S: Scalar> PromptBlock<S> {
    pub fn new<R: Rng + ?Sized>(config: PromptConfig, rng: &mut R) -> Self {
        let c = config.channels;
        let n = config.components;
        Self {
            config,
            components: Param::uniform(&[n, c, config.size, config.size], 1.0, rng),
            mix: Linear::new(c, n, rng),
            prompt_conv: Conv2d::new(c, c, 3, rng),
            enhance_convs: vec![
                Conv2d::new(2 * c, c, 1, rng),
                Conv2d::new(c, c, 1, rng),
                Conv2d::new(c, c, 1, rng),
            ],
            enhance_norms: (0..3).map(|_| ChannelNorm::new(c)).collect(),
            head: Linear::new(c, config.experts * c, rng),
            attention: (0..config.attention_blocks)
                .map(|_| ChannelAttentionBlock::new(c, config.reduction, rng))
                .collect(),
        }
    }

    /// Mixing weights over the prompt components, one row per batch item.
    pub fn prompt_weights(&self, f1: &Tensor<S>) -> Result<Tensor<S>> {
        if f1.c != self.config.channels {
            return Err(Error::config("feature channels do not match the prompt block"));
        }
        Ok(self.weights_from_pooled(&spatial_mean(f1)))
    }

    fn weights_from_pooled(&self, pooled: &Tensor<S>) -> Tensor<S> {
        let mut lambda = self.mix.forward(pooled);
        for row in lambda.data.chunks_exact_mut(self.config.components) {
            softmax_in_place(row);
        }
        lambda
    }

    /// Weighted sum of the components for each row of `lambda`, before
    /// resizing.
    fn mix_components(&self, lambda: &Tensor<S>) -> Tensor<S> {
        let cfg = &self.config;
        let len = cfg.channels * cfg.size * cfg.size;
        let mut out = Tensor::zeros(lambda.n, cfg.channels, cfg.size, cfg.size);
        for i in 0..lambda.n {
            let dst = out.item_mut(i);
            for k in 0..cfg.components {
                let wk = lambda.data[i * cfg.components + k];
                let src = &self.components.value[k * len..(k + 1) * len];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + wk * s;
                }
            }
        }
        out
    }

    /// Prompt feature map at `(h, w)`: the mixed components, resized
    /// bilinearly and passed through a 3x3 convolution.
    pub fn modulate_prompts(&self, lambda: &Tensor<S>, h: usize, w: usize) -> Tensor<S> {
        let mixed = self.mix_components(lambda);
        self.prompt_conv.forward(&resize_bilinear(&mixed, h, w))
    }

    /// Per-expert gating vectors `[n, M * C]` from the prompt map and features.
    pub fn enhance(&self, prompt_map: &Tensor<S>, f1: &Tensor<S>) -> Result<Tensor<S>> {
        if prompt_map.h != f1.h || prompt_map.w != f1.w || prompt_map.n != f1.n {
            return Err(Error::config("prompt map and features are not aligned"));
        }
        let mut x = concat_channels(prompt_map, f1);
        for b in 0..3 {
            let mut u = self.enhance_convs[b].forward(&x);
            if b == 2 {
                u = spatial_mean(&u);
            }
            let (v, _) = self.enhance_norms[b].forward(&u);
            x = leaky_relu(&v, LEAKY_SLOPE);
        }
        Ok(self.head.forward(&x))
    }

    /// Gate `f1` with `sigmoid(gates[expert])` and run the attention blocks.
    pub fn apply_prompt(&self, gates: &Tensor<S>, experts: &[usize], f1: &Tensor<S>) -> Result<Tensor<S>> {
        let gate = self.select_gate(gates, experts)?;
        let mut x = scale_channels(f1, &gate);
        for cab in &self.attention {
            x = cab.forward(&x).0;
        }
        Ok(x)
    }

    fn select_gate(&self, gates: &Tensor<S>, experts: &[usize]) -> Result<Tensor<S>> {
        let c = self.config.channels;
        if experts.len() != gates.n {
            return Err(Error::config("one expert index per batch item required"));
        }
        let mut out = Tensor::zeros(gates.n, c, 1, 1);
        for (i, &e) in experts.iter().enumerate() {
            if e >= self.config.experts {
                return Err(Error::config("expert index out of range"));
            }
            let row = &gates.item(i)[e * c..(e + 1) * c];
            for (o, &v) in out.item_mut(i).iter_mut().zip(row) {
                *o = sigmoid(v);
            }
        }
        Ok(out)
    }

    /// Full block: `f1 -> f1` conditioned on one expert per batch item.
    pub fn forward(&self, f1: &Tensor<S>, experts: &[usize]) -> Result<(Tensor<S>, PromptCache<S>)> {
        if f1.c != self.config.channels {
            return Err(Error::config("feature channels do not match the prompt block"));
        }
        let pooled = spatial_mean(f1);
        let lambda = self.weights_from_pooled(&pooled);
        let mixed = self.mix_components(&lambda);
        let resized = resize_bilinear(&mixed, f1.h, f1.w);
        let prompt_map = self.prompt_conv.forward(&resized);

        let mut x = concat_channels(&prompt_map, f1);
        let mut enhance_in = Vec::with_capacity(3);
        let mut enhance_norm = Vec::with_capacity(3);
        let mut enhance_act_in = Vec::with_capacity(3);
        let mut enhance_pre_norm = Tensor::zeros(0, 0, 0, 0);
        for b in 0..3 {
            let mut u = self.enhance_convs[b].forward(&x);
            if b == 2 {
                enhance_pre_norm = u;
                u = spatial_mean(&enhance_pre_norm);
            }
            let (v, nc) = self.enhance_norms[b].forward(&u);
            enhance_in.push(x);
            enhance_norm.push(nc);
            x = leaky_relu(&v, LEAKY_SLOPE);
            enhance_act_in.push(v);
        }
        let gates = self.head.forward(&x);
        let gate = self.select_gate(&gates, experts)?;

        let mut y = scale_channels(f1, &gate);
        let mut cabs = Vec::with_capacity(self.attention.len());
        for cab in &self.attention {
            let (next, cc) = cab.forward(&y);
            cabs.push(cc);
            y = next;
        }
        let cache = PromptCache {
            f1: f1.clone(),
            pooled,
            lambda,
            resized,
            enhance_in,
            enhance_pre_norm,
            enhance_norm,
            enhance_act_in,
            head_in: x,
            gate,
            experts: experts.to_vec(),
            cabs,
        };
        Ok((y, cache))
    }

    /// Accumulates parameter gradients and returns `dL/df1`.
    pub fn backward(&mut self, cache: &PromptCache<S>, dy: &Tensor<S>) -> Tensor<S> {
        let cfg = self.config;
        let c = cfg.channels;
        let mut d = dy.clone();
        for (cab, cc) in self.attention.iter_mut().zip(&cache.cabs).rev() {
            d = cab.backward(cc, &d);
        }
        let (mut df1, dgate) = scale_channels_backward(&cache.f1, &cache.gate, &d);

        let mut dgates = Tensor::zeros(dy.n, cfg.experts * c, 1, 1);
        for (i, &e) in cache.experts.iter().enumerate() {
            let g = &cache.gate.item(i)[..c];
            let dg = dgate.item(i);
            let row = &mut dgates.item_mut(i)[e * c..(e + 1) * c];
            for ch in 0..c {
                row[ch] = dg[ch] * g[ch] * (S::one() - g[ch]);
            }
        }
        let mut dx = self.head.backward(&cache.head_in, &dgates);
        for b in (0..3).rev() {
            let dv = leaky_relu_backward(&cache.enhance_act_in[b], &dx, LEAKY_SLOPE);
            let mut du = self.enhance_norms[b].backward(&cache.enhance_norm[b], &dv);
            if b == 2 {
                du = spatial_mean_backward(&du, cache.enhance_pre_norm.h, cache.enhance_pre_norm.w);
            }
            dx = self.enhance_convs[b]
                .backward(&cache.enhance_in[b], &du, true)
                .expect("dx requested");
        }
        let (dprompt_map, df1_enh) = split_channels(&dx, c);
        df1.add_assign(&df1_enh);

        let dresized = self
            .prompt_conv
            .backward(&cache.resized, &dprompt_map, true)
            .expect("dx requested");
        let dmixed = resize_bilinear_backward(&dresized, cfg.size, cfg.size);
        let len = c * cfg.size * cfg.size;
        let mut dlambda = Tensor::zeros(dy.n, cfg.components, 1, 1);
        for i in 0..dy.n {
            let dm = dmixed.item(i);
            for k in 0..cfg.components {
                let wk = cache.lambda.data[i * cfg.components + k];
                let comp = &self.components.value[k * len..(k + 1) * len];
                let grad = &mut self.components.grad[k * len..(k + 1) * len];
                let mut dot = S::zero();
                for j in 0..len {
                    grad[j] = grad[j] + wk * dm[j];
                    dot = dot + comp[j] * dm[j];
                }
                dlambda.data[i * cfg.components + k] = dot;
            }
        }
        let mut dlogits = dlambda.clone();
        for i in 0..dy.n {
            let p = &cache.lambda.data[i * cfg.components..(i + 1) * cfg.components];
            let g = &dlambda.data[i * cfg.components..(i + 1) * cfg.components];
            let dot = p.iter().zip(g).fold(S::zero(), |a, (&x, &y)| a + x * y);
            for k in 0..cfg.components {
                dlogits.data[i * cfg.components + k] = p[k] * (g[k] - dot);
            }
        }
        let dpooled = self.mix.backward(&cache.pooled, &dlogits);
        df1.add_assign(&spatial_mean_backward(&dpooled, cache.f1.h, cache.f1.w));
        df1
    }
}

impl<S: Scalar> Module<S> for PromptBlock<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        f(&join(prefix, "components"), &mut self.components);
        self.mix.visit_params(&join(prefix, "mix"), f);
        self.prompt_conv.visit_params(&join(prefix, "prompt_conv"), f);
        for (i, (conv, norm)) in self.enhance_convs.iter_mut().zip(&mut self.enhance_norms).enumerate() {
            conv.visit_params(&join(prefix, &format!("enhance.{i}.conv")), f);
            norm.visit_params(&join(prefix, &format!("enhance.{i}.norm")), f);
        }
        self.head.visit_params(&join(prefix, "head"), f);
        for (i, cab) in self.attention.iter_mut().enumerate() {
            cab.visit_params(&join(prefix, &format!("cab.{i}")), f);
        }
    }
}

fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    row.iter_mut().for_each(|v| *v = *v / sum);
}
