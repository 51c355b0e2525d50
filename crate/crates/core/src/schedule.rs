//! Noise schedules for the uniform-noise categorical kernel.

use alloc::vec::Vec;
use core::f64::consts::FRAC_PI_2;

use crate::{Error, Result};

const ALPHA_MIN: f64 = 0.001;
const ALPHA_MAX: f64 = 0.9999;

/// Per-step keep probabilities `alpha[t]`, `beta[t] = 1 - alpha[t]`, and their
/// cumulative product `alpha_bar[t]`, indexed `0..=T` with `alpha[0] = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule: `alpha_bar(t) = f(t) / f(0)` with
    /// `f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2)`. Per-step `alpha` is the
    /// ratio of consecutive `alpha_bar` values clipped to `[0.001, 0.9999]`,
    /// and `alpha_bar` is then rebuilt as the cumulative product of the
    /// clipped values. For `T >= 2` this puts `alpha_bar[T]` below `1e-3`;
    /// with `T = 1` the clip floor leaves it at exactly `0.001`.
    pub fn cosine(steps: usize, offset: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step"));
        }
        if !(offset > 0.0) || !offset.is_finite() {
            return Err(Error::InvalidArgument("cosine offset must be positive"));
        }
        let f = |t: usize| {
            let x = ((t as f64 / steps as f64 + offset) / (1.0 + offset)) * FRAC_PI_2;
            let c = libm::cos(x);
            c * c
        };
        let f0 = f(0);
        let raw: Vec<f64> = (0..=steps).map(|t| f(t) / f0).collect();
        let mut alpha = Vec::with_capacity(steps + 1);
        alpha.push(1.0);
        for t in 1..=steps {
            alpha.push((raw[t] / raw[t - 1]).clamp(ALPHA_MIN, ALPHA_MAX));
        }
        Ok(Self::from_alpha_vec(alpha))
    }

    /// Schedule from explicit per-step keep probabilities `alpha[1..=T]`.
    /// Only the range `(0, 1]` is checked.
    pub fn from_alphas(alphas: &[f64]) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::InvalidArgument("schedule needs at least one step"));
        }
        if alphas.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(Error::InvalidArgument("alpha must lie in (0, 1]"));
        }
        let mut alpha = Vec::with_capacity(alphas.len() + 1);
        alpha.push(1.0);
        alpha.extend_from_slice(alphas);
        Ok(Self::from_alpha_vec(alpha))
    }

    fn from_alpha_vec(alpha: Vec<f64>) -> Self {
        let beta = alpha.iter().map(|a| 1.0 - a).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        alpha_bar.push(1.0);
        for t in 1..alpha.len() {
            let prev = alpha_bar[t - 1];
            alpha_bar.push(prev * alpha[t]);
        }
        Self {
            steps: alpha.len() - 1,
            alpha,
            beta,
            alpha_bar,
        }
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub(crate) fn check_step(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.steps {
            return Err(Error::StepOutOfRange {
                t,
                min,
                max: self.steps,
            });
        }
        Ok(())
    }
}
