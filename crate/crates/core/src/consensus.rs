//! Probabilistic consensus over expert annotations.
//!
//! A weight vector selects an active subset of experts with equal weight
//! `1/k`; the consensus label is the weighted sum of the experts' one-hot
//! fields. Sampling picks the subset size first (uniform over `1..=M`), then a
//! subset of that size uniformly, so single votes and full votes are seen
//! equally often for any `M`.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng;

use crate::field::{FieldKind, LabelField};
use crate::{Error, Result};

/// Which voting regime to draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scenario {
    /// One expert, weight 1.
    Single,
    /// `2..=M-1` experts; needs `M >= 3`.
    Subgroup,
    /// All experts, weight `1/M` each.
    Full,
    /// Subset size uniform over `1..=M`.
    #[default]
    Mixed,
}

/// Training target construction (ablation modes).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConsensusMode {
    /// One expert's annotation picked uniformly at random.
    Random,
    /// Mean of all annotations.
    Average,
    /// Consensus under a sampled mixed-scenario weight vector.
    #[default]
    Probabilistic,
}

impl ConsensusMode {
    pub fn short_name(self) -> &'static str {
        match self {
            ConsensusMode::Random => "R",
            ConsensusMode::Average => "A",
            ConsensusMode::Probabilistic => "P",
        }
    }
}

/// Expert weights: `1/k` on `k` active experts, zero elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    weights: Vec<f64>,
    active: usize,
}

impl WeightVector {
    /// Uniform weights over the given (distinct) expert indices.
    pub fn uniform_over(experts: usize, active: &[usize]) -> Result<Self> {
        if active.is_empty() || active.len() > experts {
            return Err(Error::InvalidArgument("active subset must have 1..=M members"));
        }
        let mut weights = vec![0.0; experts];
        let w = 1.0 / active.len() as f64;
        for &i in active {
            if i >= experts || weights[i] != 0.0 {
                return Err(Error::InvalidArgument("active indices must be distinct and < M"));
            }
            weights[i] = w;
        }
        Ok(Self {
            weights,
            active: active.len(),
        })
    }

    /// Full vote: every expert weighted `1/M`.
    pub fn full(experts: usize) -> Result<Self> {
        let all: Vec<usize> = (0..experts).collect();
        Self::uniform_over(experts, &all)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Number of experts with nonzero weight.
    pub fn active_count(&self) -> usize {
        self.active
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Draw a weight vector for `experts` annotators under `scenario`.
pub fn sample_weight_vector<R: Rng + ?Sized>(
    experts: usize,
    rng: &mut R,
    scenario: Scenario,
) -> Result<WeightVector> {
    if experts == 0 {
        return Err(Error::InvalidArgument("need at least one expert"));
    }
    let k = match scenario {
        Scenario::Single => 1,
        Scenario::Full => experts,
        Scenario::Mixed => rng.random_range(1..=experts),
        Scenario::Subgroup => {
            if experts < 3 {
                return Err(Error::InvalidArgument("subgroup scenario needs at least 3 experts"));
            }
            rng.random_range(2..experts)
        }
    };
    let chosen = index::sample(rng, experts, k).into_vec();
    WeightVector::uniform_over(experts, &chosen)
}

/// Weighted sum of expert annotations, `sum_i w_i z^i` per pixel.
pub fn build_consensus(annotations: &[LabelField], w: &WeightVector) -> Result<LabelField> {
    let first = annotations.first().ok_or(Error::InvalidArgument("no annotations"))?;
    if annotations.len() != w.len() {
        return Err(Error::Shape("weight vector length differs from expert count"));
    }
    if annotations
        .iter()
        .any(|a| a.pixels() != first.pixels() || a.labels() != first.labels())
    {
        return Err(Error::Shape("annotations differ in shape"));
    }
    let mut probs = vec![0.0; first.probs().len()];
    for (a, &wi) in annotations.iter().zip(w.weights()) {
        if wi == 0.0 {
            continue;
        }
        for (o, p) in probs.iter_mut().zip(a.probs()) {
            *o += wi * p;
        }
    }
    Ok(LabelField::from_parts_unchecked(
        first.pixels(),
        first.labels(),
        probs,
        FieldKind::Soft,
    ))
}

/// Training target under an ablation mode.
pub fn ablation_target<R: Rng + ?Sized>(
    annotations: &[LabelField],
    rng: &mut R,
    mode: ConsensusMode,
) -> Result<LabelField> {
    let m = annotations.len();
    if m == 0 {
        return Err(Error::InvalidArgument("no annotations"));
    }
    match mode {
        ConsensusMode::Random => Ok(annotations[rng.random_range(0..m)].clone()),
        ConsensusMode::Average => build_consensus(annotations, &WeightVector::full(m)?),
        ConsensusMode::Probabilistic => {
            let w = sample_weight_vector(m, rng, Scenario::Mixed)?;
            build_consensus(annotations, &w)
        }
    }
}
