//! Categorical diffusion with a uniform-noise kernel.
//!
//! Forward step: `q(z_t | z_{t-1}) = C(alpha_t z_{t-1} + beta_t / L)`.
//! Marginal:     `q(z_t | z_0)     = C(alpha_bar_t z_0 + (1 - alpha_bar_t) / L)`.
//!
//! The exact posterior `q(z_{t-1} | z_t, z_0)` is
//! `(beta_t/L + alpha_t z_t) * ((1 - alpha_bar_{t-1})/L + alpha_bar_{t-1} z_0)`
//! divided by `(1 - alpha_bar_t)/L + alpha_bar_t <z_t, z_0>`. For one-hot `z_0`
//! the inner product is the Kronecker delta; for soft `z_0` it is the same
//! Bayes posterior with `z_0` treated as a distribution over clean labels.
//!
//! The model reverse kernel for `t > 1` is the explicit mixture
//! `sum_l p0_hat[l] * posterior(z_t, e_l)`; at `t = 1` it is `C(p0_hat)`.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::field::{softmax_into, FieldKind, LabelField};
use crate::{Error, NoiseSchedule, Result, LOG_EPS};

/// Per-pixel categorical parameters of `p(z_{t-1} | z_t, .)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReverseDistribution {
    pixels: usize,
    labels: usize,
    probs: Vec<f64>,
}

impl ReverseDistribution {
    pub fn pixels(&self) -> usize {
        self.pixels
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.probs[k * self.labels..(k + 1) * self.labels]
    }

    pub fn into_field(self) -> LabelField {
        LabelField::from_parts_unchecked(self.pixels, self.labels, self.probs, FieldKind::Soft)
    }
}

/// Closed-form `q(z_t | z_0)`: `alpha_bar_t * z0 + (1 - alpha_bar_t) / L`.
pub fn forward_marginal(z0: &LabelField, t: usize, sched: &NoiseSchedule) -> Result<LabelField> {
    sched.check_step(t, 1)?;
    Ok(marginal_at(z0, sched.alpha_bar(t)))
}

/// Marginal for an arbitrary keep probability; `forward_marginal` at step `t`
/// is `marginal_at(z0, alpha_bar_t)`.
pub fn marginal_at(z0: &LabelField, alpha_bar: f64) -> LabelField {
    let l = z0.labels() as f64;
    let noise = (1.0 - alpha_bar) / l;
    let probs = z0.probs().iter().map(|p| alpha_bar * p + noise).collect();
    LabelField::from_parts_unchecked(z0.pixels(), z0.labels(), probs, FieldKind::Soft)
}

/// Independent categorical draw per pixel. Exactly one uniform variate is
/// consumed per pixel.
pub fn sample_field<R: Rng + ?Sized>(dist: &LabelField, rng: &mut R) -> LabelField {
    let labels = dist.labels();
    let mut out = vec![0.0; dist.probs().len()];
    for k in 0..dist.pixels() {
        let l = draw(dist.row(k), rng.random::<f64>());
        out[k * labels + l] = 1.0;
    }
    LabelField::from_parts_unchecked(dist.pixels(), labels, out, FieldKind::Hard)
}

fn draw(row: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (l, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return l;
        }
    }
    // Rounding left the cumulative sum just below one: take the last label
    // with nonzero mass.
    row.iter().rposition(|p| *p > 0.0).unwrap_or(row.len() - 1)
}

/// Posterior row for one pixel. `zt` is the one-hot row of `z_t`, `z0` a
/// (possibly soft) row of `z_0`.
fn posterior_row(zt: &[f64], z0: &[f64], t: usize, sched: &NoiseSchedule, out: &mut [f64]) {
    let l = zt.len() as f64;
    let alpha = sched.alpha(t);
    let beta = sched.beta(t);
    let ab_prev = sched.alpha_bar(t - 1);
    let ab = sched.alpha_bar(t);
    let inner: f64 = zt.iter().zip(z0).map(|(a, b)| a * b).sum();
    let norm = (1.0 - ab) / l + ab * inner;
    for j in 0..zt.len() {
        let from_zt = beta / l + alpha * zt[j];
        let from_z0 = (1.0 - ab_prev) / l + ab_prev * z0[j];
        out[j] = from_zt * from_z0 / norm;
    }
}

/// Mixture `sum_l p0[l] * posterior(z_t, e_l)` for one pixel. `comps` receives
/// the `L x L` component matrix (row `l` = posterior given clean label `l`).
fn mixture_row(
    zt: &[f64],
    p0: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    comps: &mut [f64],
    out: &mut [f64],
) {
    let labels = zt.len();
    let l_f = labels as f64;
    let alpha = sched.alpha(t);
    let beta = sched.beta(t);
    let ab_prev = sched.alpha_bar(t - 1);
    let ab = sched.alpha_bar(t);
    out.iter_mut().for_each(|o| *o = 0.0);
    for l in 0..labels {
        // posterior_row with z0 = e_l: the inner product <z_t, e_l> is zt[l].
        let norm = (1.0 - ab) / l_f + ab * zt[l];
        let comp = &mut comps[l * labels..(l + 1) * labels];
        for j in 0..labels {
            let from_zt = beta / l_f + alpha * zt[j];
            let onehot = if j == l { 1.0 } else { 0.0 };
            let from_z0 = (1.0 - ab_prev) / l_f + ab_prev * onehot;
            comp[j] = from_zt * from_z0 / norm;
            out[j] += p0[l] * comp[j];
        }
    }
}

fn check_hard(z_t: &LabelField) -> Result<()> {
    if !z_t.is_hard() {
        return Err(Error::InvalidField("z_t must be a hard field"));
    }
    Ok(())
}

/// Exact reverse posterior `q(z_{t-1} | z_t, z_0)` for `2 <= t <= T`.
pub fn posterior(
    z_t: &LabelField,
    z0: &LabelField,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<ReverseDistribution> {
    sched.check_step(t, 2)?;
    check_hard(z_t)?;
    if !z_t.same_shape(z0) {
        return Err(Error::Shape("z_t and z0 differ in shape"));
    }
    let labels = z_t.labels();
    let mut probs = vec![0.0; z_t.probs().len()];
    for (k, out) in probs.chunks_exact_mut(labels).enumerate() {
        posterior_row(z_t.row(k), z0.row(k), t, sched, out);
    }
    Ok(ReverseDistribution {
        pixels: z_t.pixels(),
        labels,
        probs,
    })
}

/// Model reverse distribution `p(z_{t-1} | z_t)` given the predicted clean
/// distribution: `C(p0_hat)` at `t = 1`, the posterior mixture otherwise.
pub fn model_reverse(
    z_t: &LabelField,
    p0_hat: &LabelField,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<ReverseDistribution> {
    sched.check_step(t, 1)?;
    check_hard(z_t)?;
    if !z_t.same_shape(p0_hat) {
        return Err(Error::Shape("z_t and p0_hat differ in shape"));
    }
    let labels = z_t.labels();
    if t == 1 {
        return Ok(ReverseDistribution {
            pixels: p0_hat.pixels(),
            labels,
            probs: p0_hat.probs().to_vec(),
        });
    }
    let mut probs = vec![0.0; z_t.probs().len()];
    let mut comps = vec![0.0; labels * labels];
    for (k, out) in probs.chunks_exact_mut(labels).enumerate() {
        mixture_row(z_t.row(k), p0_hat.row(k), t, sched, &mut comps, out);
    }
    Ok(ReverseDistribution {
        pixels: z_t.pixels(),
        labels,
        probs,
    })
}

/// One ancestral step `z_t -> z_{t-1}`.
pub fn reverse_step<R: Rng + ?Sized>(
    z_t: &LabelField,
    p0_hat: &LabelField,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<LabelField> {
    let dist = model_reverse(z_t, p0_hat, t, sched)?.into_field();
    Ok(sample_field(&dist, rng))
}

/// Training objective, averaged over pixels. For `t > 1` this is
/// `KL(q(z_{t-1}|z_t,z_0) || p(z_{t-1}|z_t))`; at `t = 1` it is the cross
/// entropy of `z0` under `p0_hat`.
pub fn kl_loss(
    z_t: &LabelField,
    z0: &LabelField,
    p0_hat: &LabelField,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<f64> {
    kl_terms(z_t, z0, p0_hat, t, sched, None)
}

/// [`kl_loss`] together with its gradient with respect to `p0_hat`
/// (row-major `pixels x labels`).
pub fn kl_loss_grad(
    z_t: &LabelField,
    z0: &LabelField,
    p0_hat: &LabelField,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; p0_hat.probs().len()];
    let loss = kl_terms(z_t, z0, p0_hat, t, sched, Some(&mut grad))?;
    Ok((loss, grad))
}

/// [`kl_loss`] where `p0_hat = softmax(logits)` per pixel, with the gradient
/// with respect to the logits.
pub fn kl_loss_logits(
    z_t: &LabelField,
    z0: &LabelField,
    logits: &[f64],
    t: usize,
    sched: &NoiseSchedule,
) -> Result<(f64, Vec<f64>)> {
    let p0_hat = LabelField::from_logits(z_t.pixels(), z_t.labels(), logits)?;
    let (loss, dp) = kl_loss_grad(z_t, z0, &p0_hat, t, sched)?;
    let labels = z_t.labels();
    let mut dlogits = vec![0.0; dp.len()];
    for k in 0..z_t.pixels() {
        let p = p0_hat.row(k);
        let g = &dp[k * labels..(k + 1) * labels];
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for m in 0..labels {
            dlogits[k * labels + m] = p[m] * (g[m] - dot);
        }
    }
    Ok((loss, dlogits))
}

fn kl_terms(
    z_t: &LabelField,
    z0: &LabelField,
    p0_hat: &LabelField,
    t: usize,
    sched: &NoiseSchedule,
    mut grad: Option<&mut Vec<f64>>,
) -> Result<f64> {
    sched.check_step(t, 1)?;
    check_hard(z_t)?;
    if !z_t.same_shape(z0) || !z_t.same_shape(p0_hat) {
        return Err(Error::Shape("z_t, z0 and p0_hat must share a shape"));
    }
    let labels = z_t.labels();
    let pixels = z_t.pixels();
    if pixels == 0 {
        return Err(Error::Shape("empty field"));
    }
    let scale = 1.0 / pixels as f64;
    let mut total = 0.0;
    if t == 1 {
        for k in 0..pixels {
            let target = z0.row(k);
            let p = p0_hat.row(k);
            for l in 0..labels {
                if target[l] == 0.0 {
                    continue;
                }
                total -= target[l] * libm::log(p[l].max(LOG_EPS));
                if let Some(g) = grad.as_deref_mut() {
                    if p[l] > LOG_EPS {
                        g[k * labels + l] = -target[l] / p[l] * scale;
                    }
                }
            }
        }
        return Ok(total * scale);
    }
    let mut q = vec![0.0; labels];
    let mut p = vec![0.0; labels];
    let mut comps = vec![0.0; labels * labels];
    for k in 0..pixels {
        posterior_row(z_t.row(k), z0.row(k), t, sched, &mut q);
        mixture_row(z_t.row(k), p0_hat.row(k), t, sched, &mut comps, &mut p);
        for j in 0..labels {
            if q[j] == 0.0 {
                continue;
            }
            total += q[j] * (libm::log(q[j].max(LOG_EPS)) - libm::log(p[j].max(LOG_EPS)));
            if let Some(g) = grad.as_deref_mut() {
                if p[j] > LOG_EPS {
                    let w = -q[j] / p[j] * scale;
                    for l in 0..labels {
                        g[k * labels + l] += w * comps[l * labels + j];
                    }
                }
            }
        }
    }
    Ok(total * scale)
}

/// Ancestral sampling: `z_T` is drawn from the uniform categorical prior, then
/// `reverse_step` runs for `t = T..1` with `p0_hat` from `denoiser`.
///
/// Several images can be sampled at once by stacking them along the pixel
/// axis; every operation here is per pixel.
pub fn sample_chain<C, E, F, R>(
    mut denoiser: F,
    condition: &C,
    pixels: usize,
    labels: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> core::result::Result<LabelField, E>
where
    C: ?Sized,
    E: From<Error>,
    F: FnMut(&LabelField, usize, &C) -> core::result::Result<LabelField, E>,
    R: Rng + ?Sized,
{
    let mut z = sample_field(&LabelField::uniform(pixels, labels), rng);
    for t in (1..=sched.steps()).rev() {
        let p0 = denoiser(&z, t, condition)?;
        z = reverse_step(&z, &p0, t, sched, rng)?;
    }
    Ok(z)
}

/// Row-wise softmax helper shared with callers that hold raw logits.
pub fn softmax_rows(logits: &[f64], labels: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (row, o) in logits.chunks_exact(labels).zip(out.chunks_exact_mut(labels)) {
        softmax_into(row, o);
    }
    out
}
