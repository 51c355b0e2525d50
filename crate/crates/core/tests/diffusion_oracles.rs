//! Brute-force checks of the categorical diffusion engine.
//!
//! The oracle here never uses the closed-form marginal or posterior: it builds
//! the single-step transition matrices `Q_s = alpha_s I + beta_s / L` and
//! applies Bayes' rule by explicit enumeration of `z_{t-1}`.

use diffoseg_core::diffusion::{
    forward_marginal, kl_loss, kl_loss_logits, model_reverse, posterior, reverse_step,
    sample_chain,
};
use diffoseg_core::{Error, LabelField, NoiseSchedule};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn step_matrix(sched: &NoiseSchedule, s: usize, l: usize) -> Vec<Vec<f64>> {
    let (a, b) = (sched.alpha(s), sched.beta(s));
    (0..l)
        .map(|i| (0..l).map(|j| if i == j { a + b / l as f64 } else { b / l as f64 }).collect())
        .collect()
}

/// `q(z_t = . | z_0 = row)` by propagating the row through steps `1..=t`.
fn marginal_by_steps(sched: &NoiseSchedule, z0: &[f64], t: usize) -> Vec<f64> {
    let l = z0.len();
    let mut p = z0.to_vec();
    for s in 1..=t {
        let q = step_matrix(sched, s, l);
        p = (0..l).map(|j| (0..l).map(|i| p[i] * q[i][j]).sum()).collect();
    }
    p
}

/// Bayes posterior `q(z_{t-1} = j | z_t = zt, z_0)` by enumeration over j.
fn bayes_posterior(sched: &NoiseSchedule, zt: usize, z0: &[f64], t: usize) -> Vec<f64> {
    let l = z0.len();
    let prior = marginal_by_steps(sched, z0, t - 1);
    let q = step_matrix(sched, t, l);
    let joint: Vec<f64> = (0..l).map(|j| prior[j] * q[j][zt]).collect();
    let z: f64 = joint.iter().sum();
    joint.iter().map(|v| v / z).collect()
}

fn one_hot(l: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; l];
    v[i] = 1.0;
    v
}

#[test]
fn posterior_matches_bayes_enumeration() {
    for l in 2..=4 {
        for steps in [4, 8] {
            let sched = NoiseSchedule::cosine(steps, 0.008).unwrap();
            for t in 2..=steps {
                for zt in 0..l {
                    for a in 0..l {
                        let z_t = LabelField::hard(l, &[zt]).unwrap();
                        let z0 = LabelField::hard(l, &[a]).unwrap();
                        let got = posterior(&z_t, &z0, t, &sched).unwrap();
                        let want = bayes_posterior(&sched, zt, &one_hot(l, a), t);
                        for (g, w) in got.row(0).iter().zip(&want) {
                            assert!((g - w).abs() < 1e-9, "L={l} T={steps} t={t}");
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn soft_z0_posterior_is_likelihood_weighted_mixture() {
    let sched = NoiseSchedule::cosine(4, 0.008).unwrap();
    for t in 2..=4 {
        for zt in 0..2 {
            let z_t = LabelField::hard(2, &[zt]).unwrap();
            let soft = LabelField::soft(1, 2, vec![0.5, 0.5]).unwrap();
            let got = posterior(&z_t, &soft, t, &sched).unwrap();
            // Weight of clean label a: 0.5 * q(z_t | z_0 = e_a).
            let lik: Vec<f64> = (0..2)
                .map(|a| 0.5 * marginal_by_steps(&sched, &one_hot(2, a), t)[zt])
                .collect();
            let z: f64 = lik.iter().sum();
            let mut want = [0.0; 2];
            for a in 0..2 {
                let comp = bayes_posterior(&sched, zt, &one_hot(2, a), t);
                for j in 0..2 {
                    want[j] += lik[a] / z * comp[j];
                }
            }
            for j in 0..2 {
                assert!((got.row(0)[j] - want[j]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn kernel_composition_matches_closed_form() {
    for l in 2..=4 {
        for steps in 1..=8 {
            let sched = NoiseSchedule::cosine(steps, 0.008).unwrap();
            for t in 1..=steps {
                for a in 0..l {
                    let z0 = LabelField::hard(l, &[a]).unwrap();
                    let closed = forward_marginal(&z0, t, &sched).unwrap();
                    let stepped = marginal_by_steps(&sched, &one_hot(l, a), t);
                    for (c, s) in closed.row(0).iter().zip(&stepped) {
                        assert!((c - s).abs() < 1e-9);
                    }
                }
            }
        }
    }
}

#[test]
fn bayes_consistency_identity() {
    // posterior(j) * q(z_t | z_0) == q(z_{t-1} = j | z_0) * q(z_t | z_{t-1} = j)
    for l in 2..=4 {
        let sched = NoiseSchedule::cosine(6, 0.008).unwrap();
        for t in 2..=6 {
            for zt in 0..l {
                for a in 0..l {
                    let z_t = LabelField::hard(l, &[zt]).unwrap();
                    let z0 = LabelField::hard(l, &[a]).unwrap();
                    let post = posterior(&z_t, &z0, t, &sched).unwrap();
                    let evidence = forward_marginal(&z0, t, &sched).unwrap().row(0)[zt];
                    let prev = forward_marginal(&z0, t - 1, &sched).unwrap().row(0).to_vec();
                    let q = step_matrix(&sched, t, l);
                    for j in 0..l {
                        let lhs = post.row(0)[j] * evidence;
                        let rhs = prev[j] * q[j][zt];
                        assert!((lhs - rhs).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

/// The delta form written out literally: normalizer uses `[z_t == z_0]`.
fn delta_form(sched: &NoiseSchedule, zt: usize, z0: usize, t: usize, l: usize) -> Vec<f64> {
    let lf = l as f64;
    let delta = if zt == z0 { 1.0 } else { 0.0 };
    let norm = (1.0 - sched.alpha_bar(t)) / lf + sched.alpha_bar(t) * delta;
    (0..l)
        .map(|j| {
            let a = sched.beta(t) / lf + sched.alpha(t) * if j == zt { 1.0 } else { 0.0 };
            let b = (1.0 - sched.alpha_bar(t - 1)) / lf
                + sched.alpha_bar(t - 1) * if j == z0 { 1.0 } else { 0.0 };
            a * b / norm
        })
        .collect()
}

#[test]
fn soft_posterior_reduces_bitwise_to_delta_form() {
    for l in 2..=4 {
        let sched = NoiseSchedule::cosine(8, 0.008).unwrap();
        for t in 2..=8 {
            for zt in 0..l {
                for a in 0..l {
                    let z_t = LabelField::hard(l, &[zt]).unwrap();
                    let z0 = LabelField::hard(l, &[a]).unwrap();
                    let got = posterior(&z_t, &z0, t, &sched).unwrap();
                    let want = delta_form(&sched, zt, a, t, l);
                    for (g, w) in got.row(0).iter().zip(&want) {
                        assert_eq!(g.to_bits(), w.to_bits());
                    }
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn reverse_rows_are_distributions(
        l in 2usize..=4,
        steps in 2usize..=30,
        t_frac in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let sched = NoiseSchedule::cosine(steps, 0.008).unwrap();
        let t = 2 + ((steps - 1) as f64 * t_frac) as usize;
        let t = t.min(steps);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 6;
        let idx: Vec<usize> = (0..k).map(|_| rng.random_range(0..l)).collect();
        let z_t = LabelField::hard(l, &idx).unwrap();
        let mut probs = Vec::new();
        for _ in 0..k {
            let raw: Vec<f64> = (0..l).map(|_| rng.random::<f64>() + 1e-3).collect();
            let s: f64 = raw.iter().sum();
            probs.extend(raw.iter().map(|v| v / s));
        }
        let z0 = LabelField::soft(k, l, probs).unwrap();
        for dist in [
            posterior(&z_t, &z0, t, &sched).unwrap(),
            model_reverse(&z_t, &z0, t, &sched).unwrap(),
        ] {
            for p in 0..k {
                let row = dist.row(p);
                prop_assert!(row.iter().all(|v| *v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn kl_hand_evaluated_instance() {
    // alpha_1 = 0.8, alpha_2 = 0.5 => alpha_bar_1 = 0.8, alpha_bar_2 = 0.4.
    // z_t = e_0, z_0 = e_1, p0_hat = (0.3, 0.7):
    //   q = (0.075, 0.225) / 0.3 = (1/4, 3/4)
    //   component e_0 = (0.675, 0.025) / 0.7, component e_1 = q
    //   p = 0.3 * (27/28, 1/28) + 0.7 * (1/4, 3/4) = (13/28, 15/28)
    let sched = NoiseSchedule::from_alphas(&[0.8, 0.5]).unwrap();
    let z_t = LabelField::hard(2, &[0]).unwrap();
    let z0 = LabelField::hard(2, &[1]).unwrap();
    let p0 = LabelField::soft(1, 2, vec![0.3, 0.7]).unwrap();
    let want = 0.25 * (7.0f64 / 13.0).ln() + 0.75 * (7.0f64 / 5.0).ln();
    let got = kl_loss(&z_t, &z0, &p0, 2, &sched).unwrap();
    assert!((got - want).abs() < 1e-14, "{got} vs {want}");
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-300)
}

#[test]
fn kl_logit_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for trial in 0..20 {
        let l = 2 + trial % 3;
        let k = 5;
        let steps = 8;
        let sched = NoiseSchedule::cosine(steps, 0.008).unwrap();
        let t = 1 + trial % steps;
        let z_t = LabelField::hard(l, &(0..k).map(|_| rng.random_range(0..l)).collect::<Vec<_>>())
            .unwrap();
        let z0 = LabelField::hard(l, &(0..k).map(|_| rng.random_range(0..l)).collect::<Vec<_>>())
            .unwrap();
        let logits: Vec<f64> = (0..k * l).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (_, grad) = kl_loss_logits(&z_t, &z0, &logits, t, &sched).unwrap();
        let h = 1e-5;
        let numeric: Vec<f64> = (0..logits.len())
            .map(|i| {
                let mut plus = logits.clone();
                plus[i] += h;
                let mut minus = logits.clone();
                minus[i] -= h;
                let fp = kl_loss_logits(&z_t, &z0, &plus, t, &sched).unwrap().0;
                let fm = kl_loss_logits(&z_t, &z0, &minus, t, &sched).unwrap().0;
                (fp - fm) / (2.0 * h)
            })
            .collect();
        let e = rel_err(&grad, &numeric);
        assert!(e < 1e-4, "trial {trial}: rel err {e}");
    }
}

#[test]
fn reverse_step_frequencies_match_mixture() {
    let sched = NoiseSchedule::cosine(4, 0.008).unwrap();
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for t in 2..=4 {
        for zt in 0..2 {
            let z_t = LabelField::hard(2, &vec![zt; n]).unwrap();
            let p0 = LabelField::soft(n, 2, [0.3, 0.7].repeat(n)).unwrap();
            let out = reverse_step(&z_t, &p0, t, &sched, &mut rng).unwrap();
            let freq0 = out.label_indices().iter().filter(|&&v| v == 0).count() as f64 / n as f64;
            let analytic: f64 = [0.3, 0.7]
                .iter()
                .enumerate()
                .map(|(a, w)| w * bayes_posterior(&sched, zt, &one_hot(2, a), t)[0])
                .sum();
            assert!((freq0 - analytic).abs() < 0.01, "t={t} zt={zt}: {freq0} vs {analytic}");
        }
    }
}

#[test]
fn uniform_denoiser_chain_has_uniform_marginals() {
    for l in [2, 3] {
        let sched = NoiseSchedule::cosine(6, 0.008).unwrap();
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let out = sample_chain(
            |z: &LabelField, _t, _c: &()| Ok::<_, Error>(LabelField::uniform(z.pixels(), l)),
            &(),
            n,
            l,
            &sched,
            &mut rng,
        )
        .unwrap();
        let idx = out.label_indices();
        for lab in 0..l {
            let f = idx.iter().filter(|&&v| v == lab).count() as f64 / n as f64;
            assert!((f - 1.0 / l as f64).abs() < 0.01);
        }
    }
}

#[test]
fn chain_is_deterministic_per_seed() {
    let sched = NoiseSchedule::cosine(5, 0.008).unwrap();
    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample_chain(
            |z: &LabelField, _t, _c: &()| Ok::<_, Error>(LabelField::uniform(z.pixels(), 2)),
            &(),
            64,
            2,
            &sched,
            &mut rng,
        )
        .unwrap()
    };
    assert_eq!(run(4), run(4));
    assert_ne!(run(4), run(5));
}

#[test]
fn chain_propagates_denoiser_errors() {
    let sched = NoiseSchedule::cosine(5, 0.008).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let res = sample_chain(
        |_z: &LabelField, _t, _c: &()| Err::<LabelField, _>(Error::InvalidArgument("boom")),
        &(),
        4,
        2,
        &sched,
        &mut rng,
    );
    assert_eq!(res, Err(Error::InvalidArgument("boom")));
}
