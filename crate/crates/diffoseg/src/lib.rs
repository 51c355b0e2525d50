//! Denoiser network, training, evaluation and file formats.

pub mod ablate;
pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod denoiser;
mod error;
pub mod evaluate;
pub mod nn;
pub mod optim;
pub mod plot;
pub mod prompt;
pub mod sampler;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
