//! Metric reports for trained checkpoints.
//!
//! Stage I checkpoints are scored with GED and Dice_soft against the full
//! set of expert masks; Stage II checkpoints with per-expert Dice. Reports
//! are CSV: one row per image, then a `mean` row.

use std::fmt::Write as _;

use diffoseg_core::metrics::{dice, dice_soft, ged, DICE_SOFT_THRESHOLDS};
use diffoseg_core::{Mask, MaskSet, MultiRaterSample};

use crate::dataset::Dataset;
use crate::sampler::Model;
use crate::{Error, Result};

/// Default sample counts for Stage I reports.
pub const DEFAULT_NS: [usize; 3] = [10, 30, 50];

#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusRow {
    pub id: String,
    pub ged: Vec<f64>,
    pub dice_soft: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusReport {
    pub ns: Vec<usize>,
    pub rows: Vec<ConsensusRow>,
    pub mean_ged: Vec<f64>,
    pub mean_dice_soft: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertRow {
    pub id: String,
    pub dice: Vec<f64>,
    pub mean: f64,
    /// Mean predicted foreground area per expert, in pixels.
    pub area: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertReport {
    pub samples: usize,
    pub rows: Vec<ExpertRow>,
    pub mean_dice: Vec<f64>,
    pub d_mean: f64,
    pub mean_area: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Report {
    Consensus(ConsensusReport),
    Experts(ExpertReport),
}

fn expert_masks(s: &MultiRaterSample) -> Vec<Mask> {
    (0..s.experts()).map(|e| s.mask(e)).collect()
}

fn column_means(rows: impl Iterator<Item = Vec<f64>>, width: usize) -> Vec<f64> {
    let mut acc = vec![0.0; width];
    let mut count = 0usize;
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
        count += 1;
    }
    acc.iter().map(|a| a / count.max(1) as f64).collect()
}

/// GED_n and Dice_soft_n for every `n` in `ns`, using the first `n` of
/// `max(ns)` samples per image.
pub fn evaluate_consensus(model: &Model, data: &Dataset, ns: &[usize], seed: u64) -> Result<ConsensusReport> {
    let max_n = *ns.iter().max().ok_or_else(|| Error::config("at least one sample count required"))?;
    if ns.contains(&0) {
        return Err(Error::config("sample counts must be positive"));
    }
    let images: Vec<&MultiRaterSample> = data.samples.iter().collect();
    let preds = model.sample_masks(&images, None, max_n, seed)?;
    score_consensus(&images, &preds, ns)
}

/// Score given predictions (`preds[i]` holds at least `max(ns)` masks).
pub fn score_consensus(images: &[&MultiRaterSample], preds: &[Vec<Mask>], ns: &[usize]) -> Result<ConsensusReport> {
    let mut rows = Vec::with_capacity(images.len());
    for (s, p) in images.iter().zip(preds) {
        let gts = MaskSet::new(expert_masks(s))?;
        let mut g = Vec::with_capacity(ns.len());
        let mut d = Vec::with_capacity(ns.len());
        for &n in ns {
            if p.len() < n {
                return Err(Error::config(format!("image {} has {} predictions, need {n}", s.id, p.len())));
            }
            let set = MaskSet::new(p[..n].to_vec())?;
            g.push(ged(&set, &gts)?);
            d.push(dice_soft(&set, &gts, &DICE_SOFT_THRESHOLDS)?);
        }
        rows.push(ConsensusRow { id: s.id.clone(), ged: g, dice_soft: d });
    }
    let mean_ged = column_means(rows.iter().map(|r| r.ged.clone()), ns.len());
    let mean_dice_soft = column_means(rows.iter().map(|r| r.dice_soft.clone()), ns.len());
    Ok(ConsensusReport { ns: ns.to_vec(), rows, mean_ged, mean_dice_soft })
}

/// Per-expert Dice with `n` samples per expert and image. A network without
/// identity conditioning is sampled once and scored against every expert.
pub fn evaluate_experts(model: &Model, data: &Dataset, n: usize, seed: u64) -> Result<ExpertReport> {
    if n == 0 {
        return Err(Error::config("sample count must be positive"));
    }
    let images: Vec<&MultiRaterSample> = data.samples.iter().collect();
    let m = data.experts;
    let per_expert: Vec<Vec<Vec<Mask>>> = if model.conditioned() {
        (0..m)
            .map(|e| model.sample_masks(&images, Some(e), n, seed.wrapping_add(e as u64)))
            .collect::<Result<_>>()?
    } else {
        let shared = model.sample_masks(&images, None, n, seed)?;
        vec![shared; m]
    };
    score_experts(&images, &per_expert)
}

/// `preds[e][i]` are the predictions for expert `e` on image `i`.
pub fn score_experts(images: &[&MultiRaterSample], preds: &[Vec<Vec<Mask>>]) -> Result<ExpertReport> {
    let m = preds.len();
    let mut rows = Vec::with_capacity(images.len());
    let mut samples = 0;
    for (i, s) in images.iter().enumerate() {
        if s.experts() != m {
            return Err(Error::config("prediction sets do not match the expert count"));
        }
        let mut d = Vec::with_capacity(m);
        let mut area = Vec::with_capacity(m);
        for e in 0..m {
            let set = &preds[e][i];
            if set.is_empty() {
                return Err(Error::config("empty prediction set"));
            }
            samples = set.len();
            let gt = s.mask(e);
            let mut total = 0.0;
            for p in set {
                total += dice(p, &gt)?;
            }
            d.push(total / set.len() as f64);
            area.push(set.iter().map(|p| p.area() as f64).sum::<f64>() / set.len() as f64);
        }
        let mean = d.iter().sum::<f64>() / m as f64;
        rows.push(ExpertRow { id: s.id.clone(), dice: d, mean, area });
    }
    let mean_dice = column_means(rows.iter().map(|r| r.dice.clone()), m);
    let mean_area = column_means(rows.iter().map(|r| r.area.clone()), m);
    let d_mean = mean_dice.iter().sum::<f64>() / m as f64;
    Ok(ExpertReport { samples, rows, mean_dice, d_mean, mean_area })
}

/// Stage I checkpoints get a consensus report, Stage II an expert report
/// (using the largest of `ns` as the per-expert sample count).
pub fn evaluate(model: &Model, data: &Dataset, ns: &[usize], seed: u64) -> Result<Report> {
    if ns.is_empty() || ns.contains(&0) {
        return Err(Error::config("sample counts must be positive"));
    }
    if model.stage == 1 {
        Ok(Report::Consensus(evaluate_consensus(model, data, ns, seed)?))
    } else {
        let n = *ns.iter().max().expect("non-empty");
        Ok(Report::Experts(evaluate_experts(model, data, n, seed)?))
    }
}

fn f(v: f64) -> String {
    format!("{v:.6}")
}

impl ConsensusReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id");
        for n in &self.ns {
            let _ = write!(out, ",GED_{n}");
        }
        for n in &self.ns {
            let _ = write!(out, ",Dsoft_{n}");
        }
        out.push('\n');
        let mut line = |id: &str, g: &[f64], d: &[f64]| {
            out.push_str(id);
            for v in g.iter().chain(d) {
                out.push(',');
                out.push_str(&f(*v));
            }
            out.push('\n');
        };
        for r in &self.rows {
            line(&r.id, &r.ged, &r.dice_soft);
        }
        line("mean", &self.mean_ged, &self.mean_dice_soft);
        out
    }

    pub fn summary(&self) -> String {
        self.ns
            .iter()
            .enumerate()
            .map(|(k, n)| format!("GED_{n}={} Dsoft_{n}={}", f(self.mean_ged[k]), f(self.mean_dice_soft[k])))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl ExpertReport {
    pub fn to_csv(&self) -> String {
        let m = self.mean_dice.len();
        let mut out = String::from("id");
        for e in 1..=m {
            let _ = write!(out, ",D_A{e}");
        }
        out.push_str(",D_mean");
        for e in 1..=m {
            let _ = write!(out, ",area_A{e}");
        }
        out.push('\n');
        let mut line = |id: &str, d: &[f64], mean: f64, a: &[f64]| {
            out.push_str(id);
            for v in d.iter().chain([mean].iter()).chain(a) {
                out.push(',');
                out.push_str(&f(*v));
            }
            out.push('\n');
        };
        for r in &self.rows {
            line(&r.id, &r.dice, r.mean, &r.area);
        }
        line("mean", &self.mean_dice, self.d_mean, &self.mean_area);
        out
    }

    pub fn summary(&self) -> String {
        let parts: Vec<String> = self
            .mean_dice
            .iter()
            .enumerate()
            .map(|(e, d)| format!("D_A{}={}", e + 1, f(*d)))
            .collect();
        format!("{} D_mean={}", parts.join(" "), f(self.d_mean))
    }
}

impl Report {
    pub fn to_csv(&self) -> String {
        match self {
            Report::Consensus(r) => r.to_csv(),
            Report::Experts(r) => r.to_csv(),
        }
    }

    pub fn summary(&self) -> String {
        match self {
            Report::Consensus(r) => r.summary(),
            Report::Experts(r) => r.summary(),
        }
    }
}
