//! Segmentation metrics over binary masks.
//!
//! Conventions: `dice(empty, empty) = 1`, and the GED mask distance is
//! `d = 1 - IoU` with `d(empty, empty) = 0`.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Thresholds used by the threshold-aware Dice.
pub const DICE_SOFT_THRESHOLDS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

/// Binary mask, row-major, values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape("mask buffer does not match height x width"));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument("mask values must be 0 or 1"));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn area(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    fn check_dims(&self, other: &Mask) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::Shape("mask dimensions differ"));
        }
        Ok(())
    }

    fn overlap(&self, other: &Mask) -> (usize, usize) {
        let mut inter = 0;
        let mut union = 0;
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += (a & b) as usize;
            union += (a | b) as usize;
        }
        (inter, union)
    }
}

/// Non-empty collection of same-sized masks.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    masks: Vec<Mask>,
}

impl MaskSet {
    pub fn new(masks: Vec<Mask>) -> Result<Self> {
        let first = masks.first().ok_or(Error::InvalidArgument("mask set is empty"))?;
        for m in &masks {
            first.check_dims(m)?;
        }
        Ok(Self { masks })
    }

    pub fn masks(&self) -> &[Mask] {
        &self.masks
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn height(&self) -> usize {
        self.masks[0].height
    }

    pub fn width(&self) -> usize {
        self.masks[0].width
    }

    /// Per-pixel foreground frequency.
    pub fn mean_map(&self) -> Vec<f64> {
        let n = self.masks.len() as f64;
        let mut counts = vec![0usize; self.masks[0].data.len()];
        for m in &self.masks {
            for (c, &v) in counts.iter_mut().zip(&m.data) {
                *c += v as usize;
            }
        }
        counts.into_iter().map(|c| c as f64 / n).collect()
    }
}

/// `2|a ∩ b| / (|a| + |b|)`, 1 when both are empty.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    a.check_dims(b)?;
    let (inter, _) = a.overlap(b);
    let total = a.area() + b.area();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// `1 - |a ∩ b| / |a ∪ b|`, 0 when both are empty.
pub fn iou_distance(a: &Mask, b: &Mask) -> Result<f64> {
    a.check_dims(b)?;
    let (inter, union) = a.overlap(b);
    if union == 0 {
        return Ok(0.0);
    }
    Ok(1.0 - inter as f64 / union as f64)
}

fn mean_cross(xs: &[Mask], ys: &[Mask]) -> Result<f64> {
    let mut s = 0.0;
    for x in xs {
        for y in ys {
            s += iou_distance(x, y)?;
        }
    }
    Ok(s / (xs.len() * ys.len()) as f64)
}

fn mean_within(xs: &[Mask]) -> Result<f64> {
    let n = xs.len();
    if n < 2 {
        return Ok(0.0);
    }
    let mut s = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            s += iou_distance(&xs[i], &xs[j])?;
        }
    }
    Ok(s / (n * (n - 1) / 2) as f64)
}

/// Generalized energy distance between predicted and reference mask sets:
/// `sqrt(max(0, 2 E[d(s,y)] - E[d(s,s')] - E[d(y,y')]))`. Within-set
/// expectations run over distinct pairs; a singleton set contributes 0.
pub fn ged(preds: &MaskSet, gts: &MaskSet) -> Result<f64> {
    if preds.height() != gts.height() || preds.width() != gts.width() {
        return Err(Error::Shape("mask dimensions differ"));
    }
    let cross = mean_cross(&preds.masks, &gts.masks)?;
    let sq = 2.0 * cross - mean_within(&preds.masks)? - mean_within(&gts.masks)?;
    Ok(libm::sqrt(sq.max(0.0)))
}

/// Threshold-aware Dice: binarize the mean prediction map and the mean
/// reference map at each threshold (`>= tau`) and average the Dice scores.
pub fn dice_soft(preds: &MaskSet, gts: &MaskSet, thresholds: &[f64]) -> Result<f64> {
    if thresholds.is_empty() {
        return Err(Error::InvalidArgument("threshold list is empty"));
    }
    if preds.height() != gts.height() || preds.width() != gts.width() {
        return Err(Error::Shape("mask dimensions differ"));
    }
    let p = preds.mean_map();
    let y = gts.mean_map();
    let (h, w) = (preds.height(), preds.width());
    let mut total = 0.0;
    for &tau in thresholds {
        let bp = Mask {
            height: h,
            width: w,
            data: p.iter().map(|&v| u8::from(v >= tau)).collect(),
        };
        let by = Mask {
            height: h,
            width: w,
            data: y.iter().map(|&v| u8::from(v >= tau)).collect(),
        };
        total += dice(&bp, &by)?;
    }
    Ok(total / thresholds.len() as f64)
}

/// Per-expert Dice: for expert `i`, the mean Dice between each of its sampled
/// predictions and its reference mask. Returns the scores and their mean.
pub fn per_expert_dice(preds_by_expert: &[MaskSet], gts: &[Mask]) -> Result<(Vec<f64>, f64)> {
    if preds_by_expert.is_empty() || preds_by_expert.len() != gts.len() {
        return Err(Error::Shape("prediction sets and references are misaligned"));
    }
    let scores = preds_by_expert
        .iter()
        .zip(gts)
        .map(|(set, gt)| {
            let s: Result<f64> = set.masks.iter().map(|p| dice(p, gt)).sum();
            Ok(s? / set.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok((scores, mean))
}

/// Per-pixel binary entropy of the foreground frequency, divided by `ln 2`.
pub fn uncertainty_map(preds: &MaskSet) -> Vec<f64> {
    preds
        .mean_map()
        .into_iter()
        .map(|p| {
            if p <= 0.0 || p >= 1.0 {
                0.0
            } else {
                -(p * libm::log(p) + (1.0 - p) * libm::log(1.0 - p)) / core::f64::consts::LN_2
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(bits: &[u8]) -> Mask {
        Mask::new(1, bits.len(), bits.to_vec()).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = m(&[1, 1, 1, 1, 0, 0]);
        let b = m(&[0, 0, 1, 1, 1, 1]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(dice(&m(&[1, 0]), &m(&[0, 1])).unwrap(), 0.0);
        assert_eq!(dice(&m(&[0, 0]), &m(&[0, 0])).unwrap(), 1.0);
        assert!(dice(&m(&[0]), &m(&[0, 0])).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = m(&[1, 1, 0]);
        let b = m(&[0, 1, 1]);
        assert!((iou_distance(&a, &b).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(iou_distance(&m(&[1, 0]), &m(&[0, 1])).unwrap(), 1.0);
        assert_eq!(iou_distance(&m(&[0, 0]), &m(&[0, 0])).unwrap(), 0.0);
    }

    #[test]
    fn ged_examples() {
        // d(A, B) = 1 - 1/2 = 0.5
        let a = m(&[1, 1]);
        let b = m(&[1, 0]);
        let sa = MaskSet::new(vec![a.clone()]).unwrap();
        let sb = MaskSet::new(vec![b.clone()]).unwrap();
        assert!((ged(&sa, &sb).unwrap() - 1.0).abs() < 1e-15);
        let both = MaskSet::new(vec![a, b]).unwrap();
        assert_eq!(ged(&both, &both).unwrap(), 0.0);
    }

    #[test]
    fn dice_soft_examples() {
        let a = m(&[1, 1, 0, 0]);
        let empty = m(&[0, 0, 0, 0]);
        let preds = MaskSet::new(vec![a.clone(), empty]).unwrap();
        let gts = MaskSet::new(vec![a.clone()]).unwrap();
        let v = dice_soft(&preds, &gts, &DICE_SOFT_THRESHOLDS).unwrap();
        assert!((v - 0.6).abs() < 1e-15);
        assert_eq!(dice_soft(&gts, &gts, &DICE_SOFT_THRESHOLDS).unwrap(), 1.0);
        assert!(dice_soft(&gts, &gts, &[]).is_err());
    }

    #[test]
    fn per_expert_examples() {
        let a = m(&[1, 0]);
        let b = m(&[0, 1]);
        let sets = [
            MaskSet::new(vec![a.clone()]).unwrap(),
            MaskSet::new(vec![a.clone()]).unwrap(),
        ];
        let (scores, mean) = per_expert_dice(&sets, &[a.clone(), b]).unwrap();
        assert_eq!(scores, vec![1.0, 0.0]);
        assert_eq!(mean, 0.5);
        assert!(per_expert_dice(&sets, &[a]).is_err());
    }

    #[test]
    fn uncertainty_examples() {
        let set = MaskSet::new(vec![m(&[1, 1, 0]), m(&[1, 0, 0]), m(&[1, 0, 0]), m(&[1, 1, 0])])
            .unwrap();
        let u = uncertainty_map(&set);
        assert_eq!(u[0], 0.0);
        assert!((u[1] - 1.0).abs() < 1e-15);
        assert_eq!(u[2], 0.0);
        let quarter =
            MaskSet::new(vec![m(&[1]), m(&[0]), m(&[0]), m(&[0])]).unwrap();
        assert!((uncertainty_map(&quarter)[0] - 0.811_278_124_459_132_8).abs() < 1e-12);
    }
}
