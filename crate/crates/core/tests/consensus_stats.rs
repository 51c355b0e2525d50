use std::collections::HashMap;

use diffoseg_core::consensus::{
    ablation_target, build_consensus, sample_weight_vector, ConsensusMode, Scenario, WeightVector,
};
use diffoseg_core::LabelField;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DRAWS: usize = 100_000;

fn binom(n: usize, k: usize) -> usize {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

#[test]
fn mixed_sampler_subset_sizes_and_subsets() {
    let m = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut sizes = [0usize; 5];
    let mut subsets: HashMap<Vec<usize>, usize> = HashMap::new();
    let mut weight_sums = vec![0.0; m];
    for _ in 0..DRAWS {
        let w = sample_weight_vector(m, &mut rng, Scenario::Mixed).unwrap();
        sizes[w.active_count()] += 1;
        let members: Vec<usize> = (0..m).filter(|&i| w.weights()[i] > 0.0).collect();
        *subsets.entry(members).or_default() += 1;
        for (acc, wi) in weight_sums.iter_mut().zip(w.weights()) {
            *acc += wi;
        }
        assert!((w.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    for k in 1..=m {
        let f = sizes[k] as f64 / DRAWS as f64;
        assert!((f - 0.25).abs() < 0.01, "size {k}: {f}");
    }
    // Within a size class every subset should carry 1/C(M,k) of the mass.
    for (members, count) in &subsets {
        let k = members.len();
        let within = *count as f64 / sizes[k] as f64;
        let expect = 1.0 / binom(m, k) as f64;
        assert!((within - expect).abs() < 0.02, "{members:?}: {within} vs {expect}");
    }
    assert_eq!(subsets.len(), 15);
    for s in weight_sums {
        assert!((s / DRAWS as f64 - 0.25).abs() < 0.01);
    }
}

#[test]
fn probabilistic_mode_expectation_equals_average() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let experts: Vec<LabelField> = (0..4)
        .map(|_| LabelField::from_mask(&(0..16).map(|_| rng.random_range(0..2u8)).collect::<Vec<_>>()))
        .collect();
    let avg = ablation_target(&experts, &mut rng, ConsensusMode::Average).unwrap();
    let n = 20_000;
    let mut acc = vec![0.0; avg.probs().len()];
    for _ in 0..n {
        let p = ablation_target(&experts, &mut rng, ConsensusMode::Probabilistic).unwrap();
        for (a, v) in acc.iter_mut().zip(p.probs()) {
            *a += v;
        }
    }
    for (a, v) in acc.iter().zip(avg.probs()) {
        assert!((a / n as f64 - v).abs() < 0.02);
    }
}

fn random_experts(seed: u64, m: usize, k: usize, l: usize) -> Vec<LabelField> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m)
        .map(|_| LabelField::hard(l, &(0..k).map(|_| rng.random_range(0..l)).collect::<Vec<_>>()).unwrap())
        .collect()
}

proptest! {
    #[test]
    fn consensus_rows_lie_in_convex_hull(seed in any::<u64>(), m in 1usize..6, l in 2usize..4) {
        let experts = random_experts(seed, m, 12, l);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let w = sample_weight_vector(m, &mut rng, Scenario::Mixed).unwrap();
        let c = build_consensus(&experts, &w).unwrap();
        for k in 0..12 {
            let row = c.row(k);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            // Every label with mass must be voted for by an active expert, and
            // the mass can not exceed the active experts' share.
            for lab in 0..l {
                let share: f64 = experts
                    .iter()
                    .zip(w.weights())
                    .filter(|(e, _)| e.label_at(k) == lab)
                    .map(|(_, wi)| *wi)
                    .sum();
                prop_assert!((row[lab] - share).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn consensus_is_permutation_symmetric(seed in any::<u64>(), m in 2usize..6) {
        let experts = random_experts(seed, m, 10, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = sample_weight_vector(m, &mut rng, Scenario::Mixed).unwrap();
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut rng);
        let permuted: Vec<LabelField> = perm.iter().map(|&i| experts[i].clone()).collect();
        let active: Vec<usize> = (0..m).filter(|&j| w.weights()[perm[j]] > 0.0).collect();
        let pw = WeightVector::uniform_over(m, &active).unwrap();
        let a = build_consensus(&experts, &w).unwrap();
        let b = build_consensus(&permuted, &pw).unwrap();
        for (x, y) in a.probs().iter().zip(b.probs()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
