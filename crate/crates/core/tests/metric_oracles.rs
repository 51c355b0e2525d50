//! Metrics against set arithmetic on bit patterns.

use diffoseg_core::metrics::{
    dice, dice_soft, ged, iou_distance, per_expert_dice, uncertainty_map, DICE_SOFT_THRESHOLDS,
};
use diffoseg_core::{Mask, MaskSet};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mask_from_bits(bits: u32, h: usize, w: usize) -> Mask {
    Mask::new(h, w, (0..h * w).map(|i| ((bits >> i) & 1) as u8).collect()).unwrap()
}

fn oracle_dice(a: u32, b: u32) -> f64 {
    let total = a.count_ones() + b.count_ones();
    if total == 0 {
        1.0
    } else {
        2.0 * (a & b).count_ones() as f64 / total as f64
    }
}

fn oracle_iou_d(a: u32, b: u32) -> f64 {
    let u = (a | b).count_ones();
    if u == 0 {
        0.0
    } else {
        1.0 - (a & b).count_ones() as f64 / u as f64
    }
}

#[test]
fn small_pairs_match_bit_oracles() {
    for a in 0u32..16 {
        for b in 0u32..16 {
            let ma = mask_from_bits(a, 2, 2);
            let mb = mask_from_bits(b, 2, 2);
            assert_eq!(dice(&ma, &mb).unwrap(), oracle_dice(a, b));
            assert_eq!(iou_distance(&ma, &mb).unwrap(), oracle_iou_d(a, b));
            assert_eq!(dice(&ma, &mb).unwrap(), dice(&mb, &ma).unwrap());
        }
    }
}

#[test]
fn per_expert_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (h, w, m, n) = (4, 4, 4, 7);
    let mut sets = Vec::new();
    let mut gts = Vec::new();
    let mut bits_sets = Vec::new();
    let mut bits_gts = Vec::new();
    for _ in 0..m {
        let bits: Vec<u32> = (0..n).map(|_| rng.random_range(0..1u32 << 16)).collect();
        let g = rng.random_range(0..1u32 << 16);
        sets.push(MaskSet::new(bits.iter().map(|&b| mask_from_bits(b, h, w)).collect()).unwrap());
        gts.push(mask_from_bits(g, h, w));
        bits_sets.push(bits);
        bits_gts.push(g);
    }
    let (scores, mean) = per_expert_dice(&sets, &gts).unwrap();
    let mut oracle_mean = 0.0;
    for i in 0..m {
        let mut s = 0.0;
        for &b in &bits_sets[i] {
            s += oracle_dice(b, bits_gts[i]);
        }
        let s = s / n as f64;
        assert!((scores[i] - s).abs() < 1e-12);
        oracle_mean += s / m as f64;
    }
    assert!((mean - oracle_mean).abs() < 1e-12);
}

fn random_set(rng: &mut ChaCha8Rng, n: usize) -> MaskSet {
    MaskSet::new((0..n).map(|_| mask_from_bits(rng.random_range(0..1u32 << 9), 3, 3)).collect())
        .unwrap()
}

proptest! {
    #[test]
    fn ged_of_set_with_itself_is_zero(seed in any::<u64>(), n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_set(&mut rng, n);
        prop_assert_eq!(ged(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn dice_soft_single_threshold_is_plain_dice(a in 0u32..512, b in 0u32..512) {
        let ma = mask_from_bits(a, 3, 3);
        let mb = mask_from_bits(b, 3, 3);
        let sa = MaskSet::new(vec![ma.clone()]).unwrap();
        let sb = MaskSet::new(vec![mb.clone()]).unwrap();
        prop_assert_eq!(dice_soft(&sa, &sb, &[0.5]).unwrap(), dice(&ma, &mb).unwrap());
    }

    #[test]
    fn dice_soft_is_bounded(seed in any::<u64>(), n in 1usize..5, k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_set(&mut rng, n);
        let y = random_set(&mut rng, k);
        let v = dice_soft(&p, &y, &DICE_SOFT_THRESHOLDS).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!(ged(&p, &y).unwrap() >= 0.0);
    }

    #[test]
    fn uncertainty_is_in_unit_interval(seed in any::<u64>(), n in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_set(&mut rng, n);
        prop_assert!(uncertainty_map(&p).iter().all(|u| (0.0..=1.0 + 1e-12).contains(u)));
    }
}
