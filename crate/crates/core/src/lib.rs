//! Core algorithms for two-stage categorical-diffusion segmentation with
//! multiple raters.
//!
//! Everything here is pure computation over owned buffers plus an explicit
//! random generator, so the crate builds without `std` (it needs `alloc`).
//! IO, the neural denoiser, training loops and the command line live in the
//! companion `diffoseg` crate.
//!
//! Modules:
//! - [`field`]: per-pixel categorical label fields (hard one-hot or soft).
//! - [`schedule`]: cosine noise schedule.
//! - [`diffusion`]: forward marginal, exact reverse posterior, KL objective
//!   and the ancestral sampler.
//! - [`consensus`]: expert weight sampling and consensus targets.
//! - [`metrics`]: Dice, IoU distance, GED, threshold-aware Dice, uncertainty.
//! - [`synth`]: synthetic multi-rater data with nested expert styles.
#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod consensus;
pub mod diffusion;
pub mod field;
pub mod metrics;
pub mod schedule;
pub mod synth;

mod error;

pub use consensus::{ConsensusMode, Scenario, WeightVector};
pub use diffusion::ReverseDistribution;
pub use error::{Error, Result};
pub use field::{FieldKind, LabelField};
pub use metrics::{Mask, MaskSet};
pub use schedule::NoiseSchedule;
pub use synth::{ExpertStyle, MultiRaterSample};

/// Floor applied to arguments of logarithms. Probabilities themselves are
/// never clamped.
pub const LOG_EPS: f64 = 1e-12;

/// Tolerance for "rows sum to one".
pub const ROW_SUM_TOL: f64 = 1e-9;
