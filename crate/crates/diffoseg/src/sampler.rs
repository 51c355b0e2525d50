//! Ancestral sampling of segmentation masks from a trained network.

use std::fs;
use std::path::Path;

use diffoseg_core::diffusion::sample_chain;
use diffoseg_core::metrics::uncertainty_map;
use diffoseg_core::{LabelField, Mask, MaskSet, MultiRaterSample, NoiseSchedule};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{restore_network, Checkpoint};
use crate::dataset::Dataset;
use crate::denoiser::{field_to_tensor, tensor_to_rows, Batch, Denoiser};
use crate::plot::gray_map;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Chains advanced together through one network call.
pub const CHAIN_BATCH: usize = 32;

/// A network with the schedule and data shape it was trained for.
#[derive(Debug, Clone)]
pub struct Model {
    pub net: Denoiser<f32>,
    pub schedule: NoiseSchedule,
    pub stage: u8,
    /// Experts in the training data (the network may ignore identity).
    pub experts: usize,
    pub height: usize,
    pub width: usize,
}

impl Model {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let net = restore_network(ckpt)?;
        let schedule = NoiseSchedule::cosine(ckpt.get("diffusion.steps")?, ckpt.get("diffusion.offset")?)?;
        Ok(Self {
            net,
            schedule,
            stage: ckpt.get("stage")?,
            experts: ckpt.get("data.experts")?,
            height: ckpt.get("data.height")?,
            width: ckpt.get("data.width")?,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Whether the network is told which expert to imitate.
    pub fn conditioned(&self) -> bool {
        self.net.config.experts > 0
    }

    pub fn check_data(&self, s: &MultiRaterSample) -> Result<()> {
        if s.height != self.height || s.width != self.width || s.channels != self.net.config.image_channels {
            return Err(Error::config(format!(
                "sample {} is {}x{}x{}, the model expects {}x{}x{}",
                s.id, s.channels, s.height, s.width, self.net.config.image_channels, self.height, self.width
            )));
        }
        if s.experts() != self.experts {
            return Err(Error::config(format!(
                "sample {} has {} experts, the model was trained with {}",
                s.id,
                s.experts(),
                self.experts
            )));
        }
        Ok(())
    }

    /// `n` masks per image. `expert` must be given exactly when the
    /// network is identity conditioned; an unconditioned Stage II network
    /// accepts (and ignores) it. Results depend only on `seed`.
    pub fn sample_masks(
        &self,
        images: &[&MultiRaterSample],
        expert: Option<usize>,
        n: usize,
        seed: u64,
    ) -> Result<Vec<Vec<Mask>>> {
        if n == 0 {
            return Err(Error::config("number of samples must be positive"));
        }
        match expert {
            Some(_) if self.stage == 1 => return Err(Error::config("a stage-1 checkpoint takes no expert index")),
            Some(e) if e >= self.experts => return Err(Error::config(format!("expert {e} out of range (M = {})", self.experts))),
            None if self.conditioned() => return Err(Error::config("this checkpoint needs an expert index")),
            _ => {}
        }
        let expert = expert.filter(|_| self.conditioned());
        for s in images {
            self.check_data(s)?;
        }
        let (h, w) = (self.height, self.width);
        let chains: Vec<(usize, usize)> = (0..images.len()).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
        let mut out = vec![Vec::with_capacity(n); images.len()];
        for (chunk_idx, chunk) in chains.chunks(CHAIN_BATCH).enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(chunk_idx as u64);
            let c = self.net.config.image_channels;
            let mut image = Tensor::<f32>::zeros(chunk.len(), c, h, w);
            for (k, &(i, _)) in chunk.iter().enumerate() {
                image.item_mut(k).copy_from_slice(&images[i].image);
            }
            let experts = expert.map(|e| vec![e; chunk.len()]);
            let denoise = |z: &LabelField, t: usize, image: &Tensor<f32>| -> Result<LabelField> {
                let fields = z.split(h * w)?;
                let zt = field_to_tensor::<f32>(&fields, h, w)?;
                let ts = vec![t; fields.len()];
                let batch = Batch { z_t: &zt, image, t: &ts, experts: experts.as_deref() };
                let (logits, _) = self.net.forward(&batch)?;
                let mut rows = Vec::with_capacity(z.probs().len());
                for k in 0..fields.len() {
                    rows.extend(tensor_to_rows(&logits, k));
                }
                Ok(LabelField::from_logits(z.pixels(), z.labels(), &rows)?)
            };
            let z0 = sample_chain(denoise, &image, chunk.len() * h * w, self.net.config.labels, &self.schedule, &mut rng)?;
            for (field, &(i, _)) in z0.split(h * w)?.iter().zip(chunk) {
                out[i].push(Mask::new(h, w, field.foreground_mask())?);
            }
        }
        Ok(out)
    }
}

/// Predict `p0` for a whole batch of hard fields in one call (used for the
/// validation loss).
pub fn logits_for(
    net: &Denoiser<f32>,
    z_t: &[LabelField],
    images: &[&MultiRaterSample],
    t: &[usize],
    experts: Option<&[usize]>,
) -> Result<Vec<Vec<f64>>> {
    let first = images.first().ok_or_else(|| Error::config("empty batch"))?;
    let (h, w, c) = (first.height, first.width, first.channels);
    let zt = field_to_tensor::<f32>(z_t, h, w)?;
    let mut image = Tensor::<f32>::zeros(images.len(), c, h, w);
    for (k, s) in images.iter().enumerate() {
        image.item_mut(k).copy_from_slice(&s.image);
    }
    let batch = Batch { z_t: &zt, image: &image, t, experts };
    let (logits, _) = net.forward(&batch)?;
    Ok((0..images.len()).map(|k| tensor_to_rows(&logits, k)).collect())
}

pub const UNCERTAINTY_DIR: &str = "uncertainty";

/// Sample `n` masks per image of `data` and write them to `out_dir` as a
/// dataset (each sample holds the image and its `n` predicted masks), with
/// one uncertainty PNG per image under `uncertainty/`.
pub fn write_samples(
    model: &Model,
    data: &Dataset,
    expert: Option<usize>,
    n: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Dataset> {
    let images: Vec<&MultiRaterSample> = data.samples.iter().collect();
    let preds = model.sample_masks(&images, expert, n, seed)?;
    let unc_dir = out_dir.join(UNCERTAINTY_DIR);
    fs::create_dir_all(&unc_dir).map_err(|e| Error::io(&unc_dir, e))?;
    let mut samples = Vec::with_capacity(images.len());
    for (s, masks) in images.iter().zip(preds) {
        let set = MaskSet::new(masks)?;
        gray_map(&unc_dir.join(format!("{}.png", s.id)), s.height, s.width, &uncertainty_map(&set), 4)?;
        samples.push(MultiRaterSample {
            annotations: set.masks().iter().map(|m| m.data().to_vec()).collect(),
            ..(*s).clone()
        });
    }
    let out = Dataset::new(samples)?;
    out.save(out_dir)?;
    Ok(out)
}
