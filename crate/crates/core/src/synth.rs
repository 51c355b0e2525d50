//! Synthetic multi-rater data.
//!
//! Each sample is a blob built from 2-4 overlapping ellipses, described by an
//! approximate signed distance field (negative inside). Expert `i` segments
//! the level set `sdf <= offset_i + jitter + smoothing_i * g(theta)` where
//! `g` is a low-frequency angular perturbation shared by all experts of a
//! sample, so experts with equal smoothing and no jitter produce nested masks.
//! The image is a soft indicator of the zero level set plus a background
//! texture and Gaussian pixel noise (sigma 0.1).
//!
//! Masks are 4-connected for smoothing up to [`MAX_CONNECTED_SMOOTHING`] and
//! offsets within the style bound.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::field::LabelField;
use crate::metrics::Mask;
use crate::{Error, Result};

/// Largest boundary-perturbation scale for which generated masks are
/// documented to be a single connected component.
pub const MAX_CONNECTED_SMOOTHING: f64 = 1.0;

/// Standard deviation of the additive image noise.
pub const IMAGE_NOISE_SIGMA: f64 = 0.1;

/// Systematic annotation style of one expert.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpertStyle {
    /// Mean signed boundary displacement in pixels; positive is broader.
    pub boundary_offset: f64,
    /// Per-sample standard deviation of the displacement.
    pub offset_jitter: f64,
    /// Scale of the low-frequency angular boundary perturbation.
    pub smoothing: f64,
}

impl ExpertStyle {
    pub fn new(boundary_offset: f64, offset_jitter: f64, smoothing: f64) -> Self {
        Self {
            boundary_offset,
            offset_jitter,
            smoothing,
        }
    }
}

/// Default nested styles: integer offsets descending from broad to tight,
/// skipping zero for even `M` (so `M = 4` gives `+2, +1, -1, -2`).
pub fn default_styles(experts: usize) -> Vec<ExpertStyle> {
    let half = (experts / 2) as i64;
    let mut offsets: Vec<i64> = (1..=half).rev().collect();
    if experts % 2 == 1 {
        offsets.push(0);
    }
    offsets.extend((1..=half).map(|v| -v));
    offsets
        .into_iter()
        .map(|o| ExpertStyle::new(o as f64, 0.3, 0.75))
        .collect()
}

/// One image with its expert annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiRaterSample {
    pub id: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `channels x height x width`, values in `[0, 1]`.
    pub image: Vec<f32>,
    /// One binary `height x width` mask per expert.
    pub annotations: Vec<Vec<u8>>,
}

impl MultiRaterSample {
    pub fn experts(&self) -> usize {
        self.annotations.len()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn mask(&self, expert: usize) -> Mask {
        Mask::new(self.height, self.width, self.annotations[expert].clone())
            .expect("annotation dims are fixed at construction")
    }

    pub fn field(&self, expert: usize) -> LabelField {
        LabelField::from_mask(&self.annotations[expert])
    }

    pub fn fields(&self) -> Vec<LabelField> {
        (0..self.experts()).map(|i| self.field(i)).collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// First-order distance estimate `k0 (k0 - 1) / k1` with
    /// `k0 = |p / r|`, `k1 = |p / r^2|`.
    fn sdf(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = self.cos * dx + self.sin * dy;
        let v = -self.sin * dx + self.cos * dy;
        let k0 = libm::hypot(u / self.a, v / self.b);
        let k1 = libm::hypot(u / (self.a * self.a), v / (self.b * self.b));
        if k1 == 0.0 {
            return -self.a.min(self.b);
        }
        k0 * (k0 - 1.0) / k1
    }
}

/// Blob geometry of one sample; exposed for tests of the level-set contract.
#[derive(Debug, Clone)]
pub struct Blob {
    ellipses: Vec<Ellipse>,
    cx: f64,
    cy: f64,
    harmonics: [(f64, f64); 3],
}

impl Blob {
    fn random<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> Self {
        let scale = height.min(width) as f64 / 32.0;
        let cx = width as f64 / 2.0 + rng.random_range(-3.0..3.0) * scale;
        let cy = height as f64 / 2.0 + rng.random_range(-3.0..3.0) * scale;
        let count = rng.random_range(2..=4);
        let mut ellipses = Vec::with_capacity(count);
        let main_a = rng.random_range(4.5..7.5) * scale;
        let main_b = rng.random_range(4.5..7.5) * scale;
        let theta: f64 = rng.random_range(0.0..PI);
        ellipses.push(Ellipse {
            cx,
            cy,
            a: main_a,
            b: main_b,
            cos: libm::cos(theta),
            sin: libm::sin(theta),
        });
        let reach = 0.5 * main_a.min(main_b);
        for _ in 1..count {
            let r = rng.random_range(0.0..reach);
            let phi: f64 = rng.random_range(0.0..2.0 * PI);
            let theta: f64 = rng.random_range(0.0..PI);
            ellipses.push(Ellipse {
                cx: cx + r * libm::cos(phi),
                cy: cy + r * libm::sin(phi),
                a: rng.random_range(3.5..6.0) * scale,
                b: rng.random_range(3.5..6.0) * scale,
                cos: libm::cos(theta),
                sin: libm::sin(theta),
            });
        }
        let mut harmonics = [(0.0, 0.0); 3];
        for h in harmonics.iter_mut() {
            *h = (rng.random_range(-1.0..1.0), rng.random_range(0.0..2.0 * PI));
        }
        Self {
            ellipses,
            cx,
            cy,
            harmonics,
        }
    }

    pub fn sdf(&self, x: f64, y: f64) -> f64 {
        self.ellipses
            .iter()
            .map(|e| e.sdf(x, y))
            .fold(f64::INFINITY, f64::min)
    }

    /// Angular perturbation in `[-1, 1]` around the blob centre, harmonics 2-4.
    pub fn perturbation(&self, x: f64, y: f64) -> f64 {
        let theta = libm::atan2(y - self.cy, x - self.cx);
        let norm: f64 = self.harmonics.iter().map(|(a, _)| libm::fabs(*a)).sum();
        if norm == 0.0 {
            return 0.0;
        }
        self.harmonics
            .iter()
            .enumerate()
            .map(|(k, (a, phase))| a * libm::cos((k + 2) as f64 * theta + phase))
            .sum::<f64>()
            / norm
    }
}

fn check_styles(height: usize, width: usize, experts: usize, styles: &[ExpertStyle]) -> Result<()> {
    if experts < 2 {
        return Err(Error::InvalidArgument("need at least two experts"));
    }
    if styles.len() != experts {
        return Err(Error::Shape("style count differs from expert count"));
    }
    let bound = height.min(width) as f64 / 8.0;
    for s in styles {
        if !(libm::fabs(s.boundary_offset) < bound) {
            return Err(Error::InvalidArgument("boundary offset must stay below H/8"));
        }
        if !(s.offset_jitter >= 0.0) || !(s.smoothing >= 0.0) {
            return Err(Error::InvalidArgument("jitter and smoothing must be non-negative"));
        }
    }
    Ok(())
}

/// Generate `n` samples. Sample `i` draws from its own ChaCha stream, so any
/// sample can be regenerated independently of the others.
pub fn generate_dataset(
    n: usize,
    height: usize,
    width: usize,
    experts: usize,
    styles: &[ExpertStyle],
    seed: u64,
) -> Result<Vec<MultiRaterSample>> {
    if height < 8 || width < 8 {
        return Err(Error::InvalidArgument("images must be at least 8x8"));
    }
    check_styles(height, width, experts, styles)?;
    Ok((0..n)
        .map(|i| generate_sample(i, height, width, styles, seed))
        .collect())
}

/// Sample `index` of the dataset generated from `seed`.
pub fn generate_sample(
    index: usize,
    height: usize,
    width: usize,
    styles: &[ExpertStyle],
    seed: u64,
) -> MultiRaterSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let blob = Blob::random(height, width, &mut rng);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let shifts: Vec<f64> = styles
        .iter()
        .map(|s| s.boundary_offset + s.offset_jitter * unit.sample(&mut rng))
        .collect();

    let fx = rng.random_range(0.2..0.6);
    let fy = rng.random_range(0.2..0.6);
    let (p1, p2) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
    let mut image = Vec::with_capacity(height * width);
    let mut sdfs = Vec::with_capacity(height * width);
    let mut perts = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            let d = blob.sdf(x, y);
            sdfs.push(d);
            perts.push(blob.perturbation(x, y));
            let soft = 1.0 / (1.0 + libm::exp(d));
            let texture = 0.08 * libm::sin(fx * x + p1) * libm::sin(fy * y + p2);
            let noise = IMAGE_NOISE_SIGMA * unit.sample(&mut rng);
            image.push((0.2 + 0.55 * soft + texture + noise).clamp(0.0, 1.0) as f32);
        }
    }
    let annotations = styles
        .iter()
        .zip(&shifts)
        .map(|(style, shift)| {
            sdfs.iter()
                .zip(&perts)
                .map(|(d, g)| u8::from(*d <= shift + style.smoothing * g))
                .collect()
        })
        .collect();
    MultiRaterSample {
        id: format!("{index:05}"),
        channels: 1,
        height,
        width,
        image,
        annotations,
    }
}
