//! Per-pixel categorical label fields.
//!
//! A field is a `pixels x labels` row-major matrix whose rows are
//! probability vectors. Hard fields have one-hot rows (an annotation or a
//! sampled diffusion state); soft fields hold arbitrary probability rows
//! (consensus labels, predicted `p0`, noised marginals).

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result, ROW_SUM_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Hard,
    Soft,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelField {
    pixels: usize,
    labels: usize,
    probs: Vec<f64>,
    kind: FieldKind,
}

impl LabelField {
    /// Hard field from one label index per pixel.
    pub fn hard(labels: usize, indices: &[usize]) -> Result<Self> {
        if labels < 1 {
            return Err(Error::InvalidArgument("label count must be at least 1"));
        }
        let mut probs = vec![0.0; indices.len() * labels];
        for (k, &l) in indices.iter().enumerate() {
            if l >= labels {
                return Err(Error::InvalidField("label index out of range"));
            }
            probs[k * labels + l] = 1.0;
        }
        Ok(Self {
            pixels: indices.len(),
            labels,
            probs,
            kind: FieldKind::Hard,
        })
    }

    /// Binary mask (0 = background, nonzero = foreground) as a two-label hard field.
    pub fn from_mask(mask: &[u8]) -> Self {
        let mut probs = vec![0.0; mask.len() * 2];
        for (k, &m) in mask.iter().enumerate() {
            probs[k * 2 + usize::from(m != 0)] = 1.0;
        }
        Self {
            pixels: mask.len(),
            labels: 2,
            probs,
            kind: FieldKind::Hard,
        }
    }

    /// Soft field; every row must be non-negative and sum to one within
    /// [`ROW_SUM_TOL`].
    pub fn soft(pixels: usize, labels: usize, probs: Vec<f64>) -> Result<Self> {
        if labels < 1 {
            return Err(Error::InvalidArgument("label count must be at least 1"));
        }
        if probs.len() != pixels * labels {
            return Err(Error::Shape("probability buffer does not match pixels x labels"));
        }
        for row in probs.chunks_exact(labels) {
            if row.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
                return Err(Error::InvalidField("negative or non-finite probability"));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidField("row does not sum to one"));
            }
        }
        Ok(Self {
            pixels,
            labels,
            probs,
            kind: FieldKind::Soft,
        })
    }

    /// Soft field with every row equal to `1/L`.
    pub fn uniform(pixels: usize, labels: usize) -> Self {
        let v = 1.0 / labels as f64;
        Self {
            pixels,
            labels,
            probs: vec![v; pixels * labels],
            kind: FieldKind::Soft,
        }
    }

    /// Soft field from unnormalized scores via a per-pixel softmax.
    pub fn from_logits(pixels: usize, labels: usize, logits: &[f64]) -> Result<Self> {
        if logits.len() != pixels * labels {
            return Err(Error::Shape("logit buffer does not match pixels x labels"));
        }
        let mut probs = vec![0.0; logits.len()];
        for (row, out) in logits.chunks_exact(labels).zip(probs.chunks_exact_mut(labels)) {
            softmax_into(row, out);
        }
        Self::soft(pixels, labels, probs)
    }

    pub fn pixels(&self) -> usize {
        self.pixels
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn is_hard(&self) -> bool {
        self.kind == FieldKind::Hard
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.probs[k * self.labels..(k + 1) * self.labels]
    }

    /// Label index of a hard row. Soft rows return their argmax.
    pub fn label_at(&self, k: usize) -> usize {
        argmax(self.row(k))
    }

    /// Label index per pixel (argmax for soft fields).
    pub fn label_indices(&self) -> Vec<usize> {
        (0..self.pixels).map(|k| self.label_at(k)).collect()
    }

    /// Binary mask of pixels whose label is not the background label 0.
    pub fn foreground_mask(&self) -> Vec<u8> {
        (0..self.pixels).map(|k| u8::from(self.label_at(k) != 0)).collect()
    }

    /// Stack fields of equal label count along the pixel axis.
    pub fn concat(fields: &[LabelField]) -> Result<Self> {
        let first = fields.first().ok_or(Error::InvalidArgument("no fields to concatenate"))?;
        let labels = first.labels;
        let mut probs = Vec::new();
        let mut kind = FieldKind::Hard;
        for f in fields {
            if f.labels != labels {
                return Err(Error::Shape("label counts differ"));
            }
            if f.kind == FieldKind::Soft {
                kind = FieldKind::Soft;
            }
            probs.extend_from_slice(&f.probs);
        }
        Ok(Self {
            pixels: probs.len() / labels,
            labels,
            probs,
            kind,
        })
    }

    /// Split into consecutive fields of `chunk` pixels each.
    pub fn split(&self, chunk: usize) -> Result<Vec<LabelField>> {
        if chunk == 0 || self.pixels % chunk != 0 {
            return Err(Error::Shape("pixel count is not a multiple of the chunk size"));
        }
        Ok(self
            .probs
            .chunks_exact(chunk * self.labels)
            .map(|p| Self {
                pixels: chunk,
                labels: self.labels,
                probs: p.to_vec(),
                kind: self.kind,
            })
            .collect())
    }

    pub(crate) fn from_parts_unchecked(
        pixels: usize,
        labels: usize,
        probs: Vec<f64>,
        kind: FieldKind,
    ) -> Self {
        debug_assert_eq!(probs.len(), pixels * labels);
        Self {
            pixels,
            labels,
            probs,
            kind,
        }
    }

    pub(crate) fn same_shape(&self, other: &LabelField) -> bool {
        self.pixels == other.pixels && self.labels == other.labels
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax of one row.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(logits) {
        *o = libm::exp(x - max);
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}
