//! Stage I and Stage II training loops.
//!
//! Every step draws its randomness from generators keyed by
//! `(seed, step, stream)`, so runs that differ only in consensus mode see the
//! same image batches, and a resumed run replays the exact remaining steps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use diffoseg_core::consensus::ablation_target;
use diffoseg_core::diffusion::{forward_marginal, kl_loss_logits, sample_field};
use diffoseg_core::metrics::{dice_soft, per_expert_dice, DICE_SOFT_THRESHOLDS};
use diffoseg_core::{MaskSet, MultiRaterSample, NoiseSchedule};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{restore_adam, restore_network, store, Checkpoint};
use crate::config::{IdentityMode, TrainConfig};
use crate::dataset::Dataset;
use crate::denoiser::{field_to_tensor, rows_into_tensor, tensor_to_rows, Batch, Denoiser};
use crate::nn::Module;
use crate::optim::Adam;
use crate::sampler::{logits_for, Model};
use crate::tensor::Tensor;
use crate::{Error, Result};

const STREAM_BATCH: u64 = 0;
const STREAM_TARGET: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAMS: u64 = 4;
const STREAM_INIT: u64 = u64::MAX;
const STREAM_PROMPT_INIT: u64 = u64::MAX - 1;

/// Fixed seed for the validation-loss draws, shared by both stages.
pub const VALIDATION_SEED: u64 = 0x5EED_0F_7A1;
/// Seed for sampled validation metrics.
const VALIDATION_SAMPLE_SEED: u64 = 0x5A_4D_91E;
const VALIDATION_CHUNK: usize = 32;

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const LOSS_LOG: &str = "train_loss.csv";
pub const VAL_LOG: &str = "validation.csv";

pub fn step_rng(seed: u64, step: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((step as u64).wrapping_mul(STREAMS).wrapping_add(stream));
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct Validation {
    pub step: usize,
    pub loss: f64,
    /// Dice_soft (Stage I) or mean per-expert Dice (Stage II).
    pub metric: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    /// Mean batch loss of every step run in this invocation.
    pub losses: Vec<f64>,
    /// Validation loss before the first update of this invocation.
    pub initial_val_loss: f64,
    pub validations: Vec<Validation>,
}

/// Mean KL loss over the validation split. Each sample gets one fixed
/// expert, timestep and noisy field, so the value depends only on the
/// network parameters.
pub fn validation_loss(net: &Denoiser<f32>, schedule: &NoiseSchedule, val: &Dataset) -> Result<f64> {
    let mut z_t = Vec::with_capacity(val.len());
    let mut z0 = Vec::with_capacity(val.len());
    let mut ts = Vec::with_capacity(val.len());
    let mut experts = Vec::with_capacity(val.len());
    for (j, s) in val.samples.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(VALIDATION_SEED);
        rng.set_stream(j as u64);
        let e = rng.random_range(0..s.experts());
        let t = rng.random_range(1..=schedule.steps());
        let target = s.field(e);
        z_t.push(sample_field(&forward_marginal(&target, t, schedule)?, &mut rng));
        z0.push(target);
        ts.push(t);
        experts.push(e);
    }
    let conditioned = net.config.experts > 0;
    let mut total = 0.0;
    for start in (0..val.len()).step_by(VALIDATION_CHUNK) {
        let end = (start + VALIDATION_CHUNK).min(val.len());
        let images: Vec<&MultiRaterSample> = val.samples[start..end].iter().collect();
        let ex = conditioned.then(|| &experts[start..end]);
        let logits = logits_for(net, &z_t[start..end], &images, &ts[start..end], ex)?;
        for (k, rows) in logits.iter().enumerate() {
            let j = start + k;
            total += kl_loss_logits(&z_t[j], &z0[j], rows, ts[j], schedule)?.0;
        }
    }
    Ok(total / val.len() as f64)
}

fn validation_metric(model: &Model, val: &Dataset, images: usize, samples: usize) -> Result<f64> {
    let take = if images == 0 { val.len() } else { images.min(val.len()) };
    let subset: Vec<&MultiRaterSample> = val.samples[..take].iter().collect();
    let mut total = 0.0;
    if model.stage == 2 {
        let per_expert: Vec<Vec<Vec<diffoseg_core::Mask>>> = (0..model.experts)
            .map(|e| model.sample_masks(&subset, Some(e), samples, VALIDATION_SAMPLE_SEED ^ e as u64))
            .collect::<Result<_>>()?;
        for (i, s) in subset.iter().enumerate() {
            let sets = per_expert
                .iter()
                .map(|p| MaskSet::new(p[i].clone()))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let gts: Vec<_> = (0..s.experts()).map(|e| s.mask(e)).collect();
            total += per_expert_dice(&sets, &gts)?.1;
        }
    } else {
        let preds = model.sample_masks(&subset, None, samples, VALIDATION_SAMPLE_SEED)?;
        for (s, p) in subset.iter().zip(preds) {
            let gts = MaskSet::new((0..s.experts()).map(|e| s.mask(e)).collect())?;
            total += dice_soft(&MaskSet::new(p)?, &gts, &DICE_SOFT_THRESHOLDS)?;
        }
    }
    Ok(total / take as f64)
}

/// Run-invariant header entries.
fn describe(ckpt: &mut Checkpoint, cfg: &TrainConfig, data: &Dataset, seed: u64) {
    ckpt.set("stage", cfg.stage);
    ckpt.set("diffusion.steps", cfg.steps);
    ckpt.set("diffusion.offset", cfg.schedule_offset);
    ckpt.set("data.experts", data.experts);
    ckpt.set("data.height", data.height);
    ckpt.set("data.width", data.width);
    ckpt.set("data.channels", data.channels);
    ckpt.set("train.seed", seed);
    if cfg.stage == 1 {
        ckpt.set("train.consensus", cfg.consensus.short_name());
    } else {
        ckpt.set("train.identity", cfg.identity.name());
    }
}

struct Run<'a> {
    cfg: &'a TrainConfig,
    train: &'a Dataset,
    val: &'a Dataset,
    schedule: NoiseSchedule,
    seed: u64,
    net: Denoiser<f32>,
    adam: Adam,
    start: usize,
    best: f64,
}

impl Run<'_> {
    fn checkpoint(&mut self, step: usize, val: Option<&Validation>) -> Checkpoint {
        let mut ckpt = Checkpoint::default();
        describe(&mut ckpt, self.cfg, self.train, self.seed);
        ckpt.set("train.step", step);
        ckpt.set("val.best_metric", fmt_f64(self.best));
        if let Some(v) = val {
            ckpt.set("val.loss", fmt_f64(v.loss));
            ckpt.set("val.metric", fmt_f64(v.metric));
        }
        store(&mut ckpt, &mut self.net, Some(&self.adam));
        ckpt
    }

    fn batch_step(&mut self, step: usize) -> Result<f64> {
        let cfg = self.cfg;
        let n_train = self.train.len();
        let mut brng = step_rng(self.seed, step, STREAM_BATCH);
        let mut trng = step_rng(self.seed, step, STREAM_TARGET);
        let mut nrng = step_rng(self.seed, step, STREAM_NOISE);
        let size = cfg.batch_size.min(n_train);
        let picks = index::sample(&mut brng, n_train, size).into_vec();
        let items: Vec<MultiRaterSample> =
            picks.iter().map(|&i| cfg.augment.apply(&self.train.samples[i], &mut brng)).collect();

        let mut targets = Vec::with_capacity(size);
        let mut experts = Vec::with_capacity(size);
        for s in &items {
            if cfg.stage == 1 {
                targets.push(ablation_target(&s.fields(), &mut trng, cfg.consensus)?);
            } else {
                let e = trng.random_range(0..s.experts());
                targets.push(s.field(e));
                experts.push(e);
            }
        }
        let mut z_t = Vec::with_capacity(size);
        let mut ts = Vec::with_capacity(size);
        for target in &targets {
            let t = nrng.random_range(1..=self.schedule.steps());
            z_t.push(sample_field(&forward_marginal(target, t, &self.schedule)?, &mut nrng));
            ts.push(t);
        }

        let (h, w, c) = (self.train.height, self.train.width, self.train.channels);
        let zt = field_to_tensor::<f32>(&z_t, h, w)?;
        let mut image = Tensor::<f32>::zeros(size, c, h, w);
        for (k, s) in items.iter().enumerate() {
            image.item_mut(k).copy_from_slice(&s.image);
        }
        let conditioned = self.net.config.experts > 0;
        let batch = Batch {
            z_t: &zt,
            image: &image,
            t: &ts,
            experts: conditioned.then_some(&experts[..]),
        };
        let (logits, cache) = self.net.forward(&batch)?;
        if !logits.is_finite() {
            return Err(self.abort(step, f64::NAN));
        }
        let mut dlogits = Tensor::zeros_like(&logits);
        let mut loss = 0.0;
        let inv = 1.0 / size as f64;
        for k in 0..size {
            let rows = tensor_to_rows(&logits, k);
            let (l, mut g) = kl_loss_logits(&z_t[k], &targets[k], &rows, ts[k], &self.schedule)?;
            loss += l * inv;
            g.iter_mut().for_each(|v| *v *= inv);
            rows_into_tensor(&g, &mut dlogits, k);
        }
        if !loss.is_finite() {
            return Err(self.abort(step, loss));
        }
        self.net.zero_grad();
        self.net.backward(&cache, &dlogits);
        let norm = self.adam.step(&mut self.net);
        if !norm.is_finite() {
            return Err(self.abort(step, loss));
        }
        Ok(loss)
    }

    /// Write the current state for inspection and build the error.
    fn abort(&mut self, step: usize, loss: f64) -> Error {
        let dump = self.cfg.out_dir.join(format!("nonfinite_step{step}.ckpt"));
        let mut ckpt = self.checkpoint(step, None);
        ckpt.set("abort.loss", loss);
        if let Err(e) = ckpt.save(&dump) {
            return e;
        }
        Error::NonFinite { step, dump }
    }

    fn validate(&mut self, step: usize) -> Result<Validation> {
        let loss = validation_loss(&self.net, &self.schedule, self.val)?;
        let mut ckpt = Checkpoint::default();
        describe(&mut ckpt, self.cfg, self.train, self.seed);
        store(&mut ckpt, &mut self.net, None);
        let model = Model::from_checkpoint(&ckpt)?;
        let metric = validation_metric(&model, self.val, self.cfg.val_images, self.cfg.val_samples)?;
        Ok(Validation { step, loss, metric })
    }

    fn run(mut self) -> Result<TrainOutcome> {
        let out = self.cfg.out_dir.clone();
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let iterations = self.cfg.iterations();
        let initial_val_loss = validation_loss(&self.net, &self.schedule, self.val)?;
        let mut losses = Vec::with_capacity(iterations.saturating_sub(self.start));
        let mut validations = Vec::new();
        let mut loss_log = String::from("step,loss\n");
        let mut val_log = format!("step,val_loss,val_metric\n{},{},\n", self.start, fmt_f64(initial_val_loss));
        let mut last_val = None;
        for step in self.start..iterations {
            let loss = self.batch_step(step)?;
            losses.push(loss);
            let _ = writeln!(loss_log, "{},{}", step + 1, fmt_f64(loss));
            let done = step + 1;
            if done % self.cfg.val_every == 0 || done == iterations {
                let v = self.validate(done)?;
                let _ = writeln!(val_log, "{},{},{}", done, fmt_f64(v.loss), fmt_f64(v.metric));
                let improved = v.metric > self.best || self.best.is_nan();
                if improved {
                    self.best = v.metric;
                }
                let ckpt = self.checkpoint(done, Some(&v));
                if improved {
                    ckpt.save(&out.join(BEST_CHECKPOINT))?;
                }
                ckpt.save(&out.join(LAST_CHECKPOINT))?;
                last_val = Some(v.clone());
                validations.push(v);
            }
        }
        let final_val = match last_val {
            Some(v) => v,
            None => self.validate(iterations.max(self.start))?,
        };
        let ckpt = self.checkpoint(iterations.max(self.start), Some(&final_val));
        ckpt.save(&out.join(FINAL_CHECKPOINT))?;
        if !out.join(BEST_CHECKPOINT).exists() {
            ckpt.save(&out.join(BEST_CHECKPOINT))?;
        }
        append(&out.join(LOSS_LOG), &loss_log, self.start == 0)?;
        append(&out.join(VAL_LOG), &val_log, self.start == 0)?;
        Ok(TrainOutcome {
            final_checkpoint: out.join(FINAL_CHECKPOINT),
            best_checkpoint: out.join(BEST_CHECKPOINT),
            out_dir: out,
            losses,
            initial_val_loss,
            validations,
        })
    }
}

/// Write (or, for resumed runs, append the body of) a CSV log.
fn append(path: &Path, text: &str, fresh: bool) -> Result<()> {
    use std::io::Write;
    if fresh || !path.exists() {
        return fs::write(path, text).map_err(|e| Error::io(path, e));
    }
    let body: String = text.lines().skip(1).map(|l| format!("{l}\n")).collect();
    let mut f = fs::OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn check_shapes(train: &Dataset, val: &Dataset) -> Result<()> {
    if (train.experts, train.channels, train.height, train.width) != (val.experts, val.channels, val.height, val.width) {
        return Err(Error::config("training and validation splits differ in shape"));
    }
    Ok(())
}

/// Load a resume checkpoint and make sure it belongs to this configuration.
fn resume_state(cfg: &TrainConfig, data: &Dataset, path: &Path) -> Result<(Denoiser<f32>, Adam, usize, f64)> {
    let ckpt = Checkpoint::load(path)?;
    let mut expect = Checkpoint::default();
    describe(&mut expect, cfg, data, cfg.seed());
    for (k, v) in &expect.header {
        if ckpt.header.get(k) != Some(v) {
            return Err(Error::config(format!(
                "resume checkpoint disagrees with the configuration on '{k}' ({:?} vs {v})",
                ckpt.header.get(k)
            )));
        }
    }
    let mut net = restore_network(&ckpt)?;
    if net.config.base_channels != cfg.base_channels || net.config.depth != cfg.depth {
        return Err(Error::config("resume checkpoint has a different network size"));
    }
    let adam = restore_adam(&ckpt, &mut net, cfg.adam())?;
    let step: usize = ckpt.get("train.step")?;
    let best: f64 = ckpt.get("val.best_metric")?;
    Ok((net, adam, step, best))
}

pub fn train_stage1(cfg: &TrainConfig, train: &Dataset, val: &Dataset) -> Result<TrainOutcome> {
    if cfg.stage != 1 {
        return Err(Error::config("train_stage1 needs stage = 1"));
    }
    cfg.validate()?;
    check_shapes(train, val)?;
    let seed = cfg.seed();
    let schedule = NoiseSchedule::cosine(cfg.steps, cfg.schedule_offset)?;
    let (net, adam, start, best) = match &cfg.resume {
        Some(path) => resume_state(cfg, train, path)?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(STREAM_INIT);
            let mut net = Denoiser::new(cfg.network(train.channels), &mut rng)?;
            let adam = Adam::new(cfg.adam(), &mut net);
            (net, adam, 0, f64::NAN)
        }
    };
    Run { cfg, train, val, schedule, seed, net, adam, start, best }.run()
}

/// Rebuild a Stage I checkpoint's network for Stage II under `identity`.
pub fn stage2_network(stage1: &Checkpoint, identity: IdentityMode, experts: usize, seed: u64) -> Result<Denoiser<f32>> {
    if stage1.get::<u8>("stage")? != 1 {
        return Err(Error::config("Stage II must start from a stage-1 checkpoint"));
    }
    let net = restore_network(stage1)?;
    if !identity.uses_identity_channels() {
        return Ok(net);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_PROMPT_INIT);
    net.with_identity(experts, identity.uses_prompt(), &mut rng)
}

pub fn train_stage2(cfg: &TrainConfig, train: &Dataset, val: &Dataset) -> Result<TrainOutcome> {
    if cfg.stage != 2 {
        return Err(Error::config("train_stage2 needs stage = 2"));
    }
    cfg.validate()?;
    check_shapes(train, val)?;
    let seed = cfg.seed();
    let (net, adam, start, best) = match &cfg.resume {
        Some(path) => resume_state(cfg, train, path)?,
        None => {
            let path = cfg.stage1_checkpoint.as_ref().ok_or_else(|| Error::config("stage 2 requires a stage-1 checkpoint"))?;
            let stage1 = Checkpoint::load(path)?;
            check_compatible(&stage1, train)?;
            if stage1.get::<usize>("diffusion.steps")? != cfg.steps
                || stage1.get::<f64>("diffusion.offset")? != cfg.schedule_offset
            {
                return Err(Error::config("stage-1 checkpoint was trained with a different noise schedule"));
            }
            let mut net = stage2_network(&stage1, cfg.identity, train.experts, seed)?;
            let adam = Adam::new(cfg.adam(), &mut net);
            (net, adam, 0, f64::NAN)
        }
    };
    let schedule = NoiseSchedule::cosine(cfg.steps, cfg.schedule_offset)?;
    Run { cfg, train, val, schedule, seed, net, adam, start, best }.run()
}

/// Reject a Stage I checkpoint whose data shape differs from `data`.
pub fn check_compatible(stage1: &Checkpoint, data: &Dataset) -> Result<()> {
    let checks: [(&str, usize); 4] = [
        ("data.experts", data.experts),
        ("data.height", data.height),
        ("data.width", data.width),
        ("data.channels", data.channels),
    ];
    for (key, want) in checks {
        let have: usize = stage1.get(key)?;
        if have != want {
            return Err(Error::config(format!("checkpoint {key}={have} but the dataset has {want}")));
        }
    }
    if stage1.get::<usize>("net.labels")? != 2 {
        return Err(Error::config("checkpoint label count differs from the dataset (2)"));
    }
    Ok(())
}
