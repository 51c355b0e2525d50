//! Training configuration: defaults, `key=value` files and overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use diffoseg_core::ConsensusMode;

use crate::augment::Augment;
use crate::denoiser::DenoiserConfig;
use crate::optim::AdamConfig;
use crate::{Error, Result};

/// Environment variable consulted for the seed when none is configured.
pub const SEED_ENV: &str = "DIFFOSEG_SEED";

/// How Stage II tells the network which expert to imitate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IdentityMode {
    /// No identity information.
    Blind,
    /// One-hot identity channels at the input.
    Concat,
    /// Identity channels plus the prompt block.
    #[default]
    Ours,
}

impl IdentityMode {
    pub const ALL: [IdentityMode; 3] = [IdentityMode::Blind, IdentityMode::Concat, IdentityMode::Ours];

    pub fn name(self) -> &'static str {
        match self {
            IdentityMode::Blind => "blind",
            IdentityMode::Concat => "concat",
            IdentityMode::Ours => "ours",
        }
    }

    pub fn uses_identity_channels(self) -> bool {
        self != IdentityMode::Blind
    }

    pub fn uses_prompt(self) -> bool {
        self == IdentityMode::Ours
    }
}

impl fmt::Display for IdentityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for IdentityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "blind" => Ok(IdentityMode::Blind),
            "concat" => Ok(IdentityMode::Concat),
            "ours" | "prompt" => Ok(IdentityMode::Ours),
            _ => Err(Error::config(format!("unknown identity mode '{s}' (blind, concat, ours)"))),
        }
    }
}

pub fn parse_consensus(s: &str) -> Result<ConsensusMode> {
    match s.to_ascii_uppercase().as_str() {
        "R" | "RANDOM" => Ok(ConsensusMode::Random),
        "A" | "AVERAGE" => Ok(ConsensusMode::Average),
        "P" | "PROBABILISTIC" => Ok(ConsensusMode::Probabilistic),
        _ => Err(Error::config(format!("unknown consensus mode '{s}' (R, A, P)"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: u8,
    /// Diffusion steps `T`.
    pub steps: usize,
    pub schedule_offset: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// `None` picks the per-stage default.
    pub iterations: Option<usize>,
    /// `None` falls back to `DIFFOSEG_SEED`, then 0.
    pub seed: Option<u64>,
    pub consensus: ConsensusMode,
    pub identity: IdentityMode,
    pub augment: Augment,
    pub base_channels: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
    pub grad_clip: Option<f64>,
    pub val_every: usize,
    /// Validation images used for sampled metrics (0 = all).
    pub val_images: usize,
    pub val_samples: usize,
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
    pub stage1_checkpoint: Option<PathBuf>,
}

pub const STAGE1_ITERATIONS: usize = 20_000;
pub const STAGE2_ITERATIONS: usize = 10_000;

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            steps: 250,
            schedule_offset: 0.008,
            lr: 1e-4,
            batch_size: 16,
            iterations: None,
            seed: None,
            consensus: ConsensusMode::Probabilistic,
            identity: IdentityMode::Ours,
            augment: Augment::default(),
            base_channels: 32,
            depth: 3,
            time_embed_dim: 64,
            grad_clip: Some(1.0),
            val_every: 500,
            val_images: 16,
            val_samples: 4,
            out_dir: PathBuf::from("runs"),
            resume: None,
            stage1_checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn iterations(&self) -> usize {
        self.iterations.unwrap_or(if self.stage == 2 { STAGE2_ITERATIONS } else { STAGE1_ITERATIONS })
    }

    pub fn seed(&self) -> u64 {
        self.seed
            .or_else(|| std::env::var(SEED_ENV).ok().and_then(|v| v.trim().parse().ok()))
            .unwrap_or(0)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, clip_norm: self.grad_clip, ..AdamConfig::default() }
    }

    /// Backbone configuration for Stage I on data with `image_channels`.
    pub fn network(&self, image_channels: usize) -> DenoiserConfig {
        DenoiserConfig {
            base_channels: self.base_channels,
            depth: self.depth,
            time_embed_dim: self.time_embed_dim,
            image_channels,
            labels: 2,
            experts: 0,
            prompt_enabled: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage != 1 && self.stage != 2 {
            return Err(Error::config("stage must be 1 or 2"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive"));
        }
        if self.batch_size == 0 || self.iterations() == 0 {
            return Err(Error::config("batch_size and iterations must be positive"));
        }
        if self.val_every == 0 || self.val_samples == 0 {
            return Err(Error::config("val_every and val_samples must be positive"));
        }
        if self.stage == 2 && self.stage1_checkpoint.is_none() && self.resume.is_none() {
            return Err(Error::config("stage 2 requires a stage-1 checkpoint"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config("grad_clip must be positive"));
            }
        }
        self.network(1).validate()
    }

    /// Apply one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::config(format!("'{key}' has invalid value '{v}'")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v.to_ascii_lowercase().as_str() {
                "1" | "true" | "yes" | "on" => Ok(true),
                "0" | "false" | "no" | "off" => Ok(false),
                _ => Err(Error::config(format!("'{key}' expects a boolean, got '{v}'"))),
            }
        }
        let v = value.trim();
        match key.trim() {
            "stage" => self.stage = num(key, v)?,
            "steps" | "T" => self.steps = num(key, v)?,
            "schedule_offset" => self.schedule_offset = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "iterations" => self.iterations = Some(num(key, v)?),
            "seed" => self.seed = Some(num(key, v)?),
            "consensus" => self.consensus = parse_consensus(v)?,
            "identity" => self.identity = v.parse()?,
            "flip" => self.augment.flip = flag(key, v)?,
            "rotate90" => self.augment.rotate90 = flag(key, v)?,
            "intensity_scale" => {
                self.augment.intensity_scale = match v {
                    "off" | "none" | "0" => None,
                    _ => Some(num(key, v)?),
                }
            }
            "base_channels" => self.base_channels = num(key, v)?,
            "depth" => self.depth = num(key, v)?,
            "time_embed_dim" => self.time_embed_dim = num(key, v)?,
            "grad_clip" => {
                self.grad_clip = match v {
                    "off" | "none" => None,
                    _ => Some(num(key, v)?),
                }
            }
            "val_every" => self.val_every = num(key, v)?,
            "val_images" => self.val_images = num(key, v)?,
            "val_samples" => self.val_samples = num(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "resume" => self.resume = Some(PathBuf::from(v)),
            "stage1_checkpoint" => self.stage1_checkpoint = Some(PathBuf::from(v)),
            other => return Err(Error::config(format!("unknown configuration key '{other}'"))),
        }
        Ok(())
    }

    /// Apply every setting in a `key=value` text (blank lines and `#`
    /// comments ignored).
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value", no + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }
}
