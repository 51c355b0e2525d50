//! Encoder-decoder denoiser `(z_t, t, image[, expert]) -> logits over labels`.

use diffoseg_core::LabelField;
use rand::Rng;

use crate::nn::{
    avg_pool2, avg_pool2_backward, add_channel_vec, concat_channels, join, silu, silu_backward,
    spatial_sum, split_channels, upsample2, upsample2_backward, Conv2d, GroupNorm, Linear, Module,
    NormCache, Param,
};
use crate::prompt::{PromptBlock, PromptCache, PromptConfig};
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    /// Resolution levels; channels double at each level.
    pub depth: usize,
    pub time_embed_dim: usize,
    pub image_channels: usize,
    pub labels: usize,
    /// Identity channels at the input; 0 disables identity conditioning.
    pub experts: usize,
    pub prompt_enabled: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            depth: 3,
            time_embed_dim: 64,
            image_channels: 1,
            labels: 2,
            experts: 0,
            prompt_enabled: false,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::config("depth must be at least 2"));
        }
        if self.base_channels < 8 {
            return Err(Error::config("base_channels must be at least 8"));
        }
        if self.labels < 2 {
            return Err(Error::config("at least two labels required"));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::config("time_embed_dim must be even and positive"));
        }
        if self.image_channels == 0 {
            return Err(Error::config("image_channels must be positive"));
        }
        if self.prompt_enabled && self.experts == 0 {
            return Err(Error::config("the prompt block needs experts > 0"));
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        self.labels + self.image_channels + self.experts
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.level_channels(self.depth - 1)
    }
}

/// Sinusoidal embedding: `emb[2i] = sin(t w_i)`, `emb[2i+1] = cos(t w_i)`
/// with `w_i = 10000^(-2i/dim)`.
pub fn timestep_embedding(t: f64, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(-2.0 * i as f64 / dim as f64);
        out[2 * i] = (t * freq).sin();
        out[2 * i + 1] = (t * freq).cos();
    }
    out
}

/// Two 3x3 conv + group norm + SiLU stages with the time embedding projected
/// and added between them.
#[derive(Debug, Clone)]
pub struct ConvBlock<S> {
    pub conv1: Conv2d<S>,
    pub norm1: GroupNorm<S>,
    pub time: Linear<S>,
    pub conv2: Conv2d<S>,
    pub norm2: GroupNorm<S>,
}

#[derive(Debug, Clone)]
struct BlockCache<S> {
    x: Tensor<S>,
    g1: Tensor<S>,
    n1: NormCache<S>,
    h: Tensor<S>,
    g2: Tensor<S>,
    n2: NormCache<S>,
}

impl<S: Scalar> ConvBlock<S> {
    fn new<R: Rng + ?Sized>(in_c: usize, out_c: usize, temb: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::new(in_c, out_c, 3, rng),
            norm1: GroupNorm::new(out_c),
            time: Linear::new(temb, out_c, rng),
            conv2: Conv2d::new(out_c, out_c, 3, rng),
            norm2: GroupNorm::new(out_c),
        }
    }

    fn forward(&self, x: &Tensor<S>, temb: &Tensor<S>) -> (Tensor<S>, BlockCache<S>) {
        let (g1, n1) = self.norm1.forward(&self.conv1.forward(x));
        let mut h = silu(&g1);
        add_channel_vec(&mut h, &self.time.forward(temb));
        let (g2, n2) = self.norm2.forward(&self.conv2.forward(&h));
        let out = silu(&g2);
        (out, BlockCache { x: x.clone(), g1, n1, h, g2, n2 })
    }

    /// Returns `dL/dx` (if requested) and accumulates into `dtemb`.
    fn backward(
        &mut self,
        cache: &BlockCache<S>,
        temb: &Tensor<S>,
        dy: &Tensor<S>,
        dtemb: &mut Tensor<S>,
        need_dx: bool,
    ) -> Option<Tensor<S>> {
        let dc2 = self.norm2.backward(&cache.n2, &silu_backward(&cache.g2, dy));
        let dh = self.conv2.backward(&cache.h, &dc2, true).expect("dx requested");
        dtemb.add_assign(&self.time.backward(temb, &spatial_sum(&dh)));
        let dc1 = self.norm1.backward(&cache.n1, &silu_backward(&cache.g1, &dh));
        self.conv1.backward(&cache.x, &dc1, need_dx)
    }
}

impl<S: Scalar> Module<S> for ConvBlock<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.norm1.visit_params(&join(prefix, "norm1"), f);
        self.time.visit_params(&join(prefix, "time"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
        self.norm2.visit_params(&join(prefix, "norm2"), f);
    }
}

/// One batch of network inputs. `z_t` and `image` are channel-major
/// `[n, L, H, W]` and `[n, C, H, W]`.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a, S> {
    pub z_t: &'a Tensor<S>,
    pub image: &'a Tensor<S>,
    pub t: &'a [usize],
    pub experts: Option<&'a [usize]>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<S> {
    emb: Tensor<S>,
    emb_pre: Tensor<S>,
    temb: Tensor<S>,
    enc: Vec<BlockCache<S>>,
    enc_dims: Vec<(usize, usize)>,
    prompt: Option<PromptCache<S>>,
    dec: Vec<BlockCache<S>>,
    head_in: Tensor<S>,
}

#[derive(Debug, Clone)]
pub struct Denoiser<S = f32> {
    pub config: DenoiserConfig,
    pub time_proj: Linear<S>,
    pub enc: Vec<ConvBlock<S>>,
    pub dec: Vec<ConvBlock<S>>,
    pub prompt: Option<PromptBlock<S>>,
    pub head: Conv2d<S>,
}

impl<S: Scalar> Denoiser<S> {
    pub fn new<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let te = config.time_embed_dim;
        let time_proj = Linear::new(te, te, rng);
        let mut enc = Vec::with_capacity(config.depth);
        let mut in_c = config.input_channels();
        for level in 0..config.depth {
            enc.push(ConvBlock::new(in_c, config.level_channels(level), te, rng));
            in_c = config.level_channels(level);
        }
        let mut dec = Vec::with_capacity(config.depth - 1);
        for level in 0..config.depth - 1 {
            let c = config.level_channels(level);
            dec.push(ConvBlock::new(config.level_channels(level + 1) + c, c, te, rng));
        }
        let prompt = config
            .prompt_enabled
            .then(|| PromptBlock::new(PromptConfig::new(config.bottleneck_channels(), config.experts), rng));
        Ok(Self {
            config,
            time_proj,
            enc,
            dec,
            prompt,
            head: Conv2d::zeros(config.base_channels, config.labels, 1),
        })
    }

    /// Convert a label-only network into one with `experts` identity input
    /// channels (zero weights, so outputs are unchanged) and optionally a
    /// freshly initialised prompt block.
    pub fn with_identity<R: Rng + ?Sized>(mut self, experts: usize, prompt: bool, rng: &mut R) -> Result<Self> {
        if self.config.experts != 0 {
            return Err(Error::config("network already has identity channels"));
        }
        let mut config = self.config;
        config.experts = experts;
        config.prompt_enabled = prompt;
        config.validate()?;
        let old = &self.enc[0].conv1;
        let (out_c, old_in, k) = (old.out_c, old.in_c, old.k);
        let mut grown = Conv2d::zeros(old_in + experts, out_c, k);
        grown.bias.value.copy_from_slice(&old.bias.value);
        let kk = k * k;
        for o in 0..out_c {
            let src = &old.weight.value[o * old_in * kk..(o + 1) * old_in * kk];
            grown.weight.value[o * (old_in + experts) * kk..][..old_in * kk].copy_from_slice(src);
        }
        self.enc[0].conv1 = grown;
        self.prompt = prompt.then(|| PromptBlock::new(PromptConfig::new(config.bottleneck_channels(), experts), rng));
        self.config = config;
        Ok(self)
    }

    fn check_batch(&self, b: &Batch<'_, S>) -> Result<()> {
        let cfg = &self.config;
        let n = b.z_t.n;
        if b.z_t.c != cfg.labels || b.image.c != cfg.image_channels {
            return Err(Error::config("input channel counts do not match the network"));
        }
        if b.image.n != n || b.image.h != b.z_t.h || b.image.w != b.z_t.w || b.t.len() != n {
            return Err(Error::config("image, label field and timesteps are not aligned"));
        }
        match (cfg.experts, b.experts) {
            (0, None) => Ok(()),
            (0, Some(_)) => Err(Error::config("expert given to a network without identity conditioning")),
            (_, None) => Err(Error::config("expert index required")),
            (m, Some(e)) => {
                if e.len() != n {
                    Err(Error::config("one expert index per batch item required"))
                } else if e.iter().any(|&i| i >= m) {
                    Err(Error::config("expert index out of range"))
                } else {
                    Ok(())
                }
            }
        }
    }

    fn input(&self, b: &Batch<'_, S>) -> Tensor<S> {
        let x = concat_channels(b.z_t, b.image);
        match b.experts {
            Some(e) => {
                let m = self.config.experts;
                let mut id = Tensor::zeros(x.n, m, x.h, x.w);
                for (i, &ei) in e.iter().enumerate() {
                    id.plane_mut(i, ei).iter_mut().for_each(|v| *v = S::one());
                }
                concat_channels(&x, &id)
            }
            None => x,
        }
    }

    /// Logits `[n, L, H, W]` plus the backward cache.
    pub fn forward(&self, b: &Batch<'_, S>) -> Result<(Tensor<S>, ForwardCache<S>)> {
        self.check_batch(b)?;
        let te = self.config.time_embed_dim;
        let mut emb = Tensor::zeros(b.t.len(), te, 1, 1);
        for (i, &t) in b.t.iter().enumerate() {
            for (d, v) in emb.item_mut(i).iter_mut().zip(timestep_embedding(t as f64, te)) {
                *d = S::of(v);
            }
        }
        let emb_pre = self.time_proj.forward(&emb);
        let temb = silu(&emb_pre);

        let mut x = self.input(b);
        let mut enc_cache = Vec::with_capacity(self.enc.len());
        let mut skips = Vec::with_capacity(self.enc.len());
        let mut enc_dims = Vec::with_capacity(self.enc.len());
        for (level, block) in self.enc.iter().enumerate() {
            if level > 0 {
                x = avg_pool2(&x);
            }
            enc_dims.push((x.h, x.w));
            let (out, c) = block.forward(&x, &temb);
            enc_cache.push(c);
            skips.push(out.clone());
            x = out;
        }
        let prompt = match (&self.prompt, b.experts) {
            (Some(p), Some(e)) => {
                let (y, c) = p.forward(&x, e)?;
                x = y;
                Some(c)
            }
            _ => None,
        };
        let mut dec_cache = vec![None; self.dec.len()];
        for level in (0..self.dec.len()).rev() {
            let skip = &skips[level];
            let up = upsample2(&x, skip.h, skip.w);
            let (out, c) = self.dec[level].forward(&concat_channels(&up, skip), &temb);
            dec_cache[level] = Some(c);
            x = out;
        }
        let logits = self.head.forward(&x);
        let cache = ForwardCache {
            emb,
            emb_pre,
            temb,
            enc: enc_cache,
            enc_dims,
            prompt,
            dec: dec_cache.into_iter().map(|c| c.expect("decoder level visited")).collect(),
            head_in: x,
        };
        Ok((logits, cache))
    }

    /// Accumulate parameter gradients for `dL/dlogits`.
    pub fn backward(&mut self, cache: &ForwardCache<S>, dlogits: &Tensor<S>) {
        let mut dtemb = Tensor::zeros_like(&cache.temb);
        let mut d = self.head.backward(&cache.head_in, dlogits, true).expect("dx requested");
        let levels = self.enc.len();
        let mut dskips: Vec<Option<Tensor<S>>> = vec![None; levels];
        for level in 0..self.dec.len() {
            let dcat = self.dec[level]
                .backward(&cache.dec[level], &cache.temb, &d, &mut dtemb, true)
                .expect("dx requested");
            let up_c = self.config.level_channels(level + 1);
            let (dup, dskip) = split_channels(&dcat, up_c);
            dskips[level] = Some(dskip);
            let (h, w) = cache.enc_dims[level + 1];
            d = upsample2_backward(&dup, h, w);
        }
        if let (Some(p), Some(pc)) = (self.prompt.as_mut(), cache.prompt.as_ref()) {
            d = p.backward(pc, &d);
        }
        for level in (0..levels).rev() {
            if let Some(ds) = dskips[level].take() {
                d.add_assign(&ds);
            }
            let dx = self.enc[level].backward(&cache.enc[level], &cache.temb, &d, &mut dtemb, level > 0);
            if level > 0 {
                let (h, w) = cache.enc_dims[level - 1];
                d = avg_pool2_backward(&dx.expect("dx requested"), h, w);
            }
        }
        let demb_pre = silu_backward(&cache.emb_pre, &dtemb);
        self.time_proj.backward(&cache.emb, &demb_pre);
    }

    /// Per-pixel label distribution for a single image.
    pub fn predict_p0(
        &self,
        z_t: &LabelField,
        t: usize,
        image: &Tensor<S>,
        expert: Option<usize>,
    ) -> Result<LabelField> {
        if image.n != 1 || z_t.pixels() != image.hw() {
            return Err(Error::config("image and label field sizes differ"));
        }
        let z = field_to_tensor::<S>(std::slice::from_ref(z_t), image.h, image.w)?;
        let experts = expert.map(|e| [e]);
        let batch = Batch { z_t: &z, image, t: &[t], experts: experts.as_ref().map(|e| &e[..]) };
        let (logits, _) = self.forward(&batch)?;
        let rows = tensor_to_rows(&logits, 0);
        Ok(LabelField::from_logits(z_t.pixels(), self.config.labels, &rows)?)
    }
}

impl<S: Scalar> Module<S> for Denoiser<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        self.time_proj.visit_params(&join(prefix, "time_proj"), f);
        for (i, b) in self.enc.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &format!("enc.{i}")), f);
        }
        for (i, b) in self.dec.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &format!("dec.{i}")), f);
        }
        self.head.visit_params(&join(prefix, "head"), f);
        if let Some(p) = self.prompt.as_mut() {
            p.visit_params(&join(prefix, "prompt"), f);
        }
    }
}

/// Stack label fields (each `H*W` pixels, pixel-major) into `[n, L, H, W]`.
pub fn field_to_tensor<S: Scalar>(fields: &[LabelField], h: usize, w: usize) -> Result<Tensor<S>> {
    let labels = fields.first().map_or(0, |f| f.labels());
    let hw = h * w;
    let mut out = Tensor::zeros(fields.len(), labels, h, w);
    for (i, f) in fields.iter().enumerate() {
        if f.pixels() != hw || f.labels() != labels {
            return Err(Error::config("label fields differ in size"));
        }
        let dst = out.item_mut(i);
        for k in 0..hw {
            for (l, &p) in f.row(k).iter().enumerate() {
                dst[l * hw + k] = S::of(p);
            }
        }
    }
    Ok(out)
}

/// Item `i` of a `[n, L, H, W]` tensor as pixel-major `f64` rows.
pub fn tensor_to_rows<S: Scalar>(x: &Tensor<S>, i: usize) -> Vec<f64> {
    let hw = x.hw();
    let item = x.item(i);
    let mut rows = vec![0.0; x.item_len()];
    for l in 0..x.c {
        for k in 0..hw {
            rows[k * x.c + l] = item[l * hw + k].as_f64();
        }
    }
    rows
}

/// Inverse of [`tensor_to_rows`], writing into item `i`.
pub fn rows_into_tensor<S: Scalar>(rows: &[f64], x: &mut Tensor<S>, i: usize) {
    let hw = x.hw();
    let c = x.c;
    let item = x.item_mut(i);
    for l in 0..c {
        for k in 0..hw {
            item[l * hw + k] = S::of(rows[k * c + l]);
        }
    }
}
