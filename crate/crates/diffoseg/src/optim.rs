//! Adam with optional global-norm gradient clipping.

use crate::nn::{Module, Param};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients whose global L2 norm exceeds this; `None` disables.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(1.0) }
    }
}

/// First and second moment estimates, stored per parameter in visit order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new<S: Scalar, M: Module<S>>(config: AdamConfig, model: &mut M) -> Self {
        let mut m = Vec::new();
        model.visit_params("", &mut |_, p| m.push(vec![0.0; p.len()]));
        let v = m.clone();
        Self { config, step: 0, m, v }
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm<S: Scalar, M: Module<S>>(model: &mut M) -> f64 {
        let mut sq = 0.0;
        model.visit_params("", &mut |_, p| {
            sq += p.grad.iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>();
        });
        sq.sqrt()
    }

    /// Apply one update from the accumulated gradients. Returns the gradient
    /// norm before clipping.
    pub fn step<S: Scalar, M: Module<S>>(&mut self, model: &mut M) -> f64 {
        let norm = Self::grad_norm(model);
        let scale = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let mut idx = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_params("", &mut |_, p: &mut Param<S>| {
            let (m, v) = (&mut ms[idx], &mut vs[idx]);
            for j in 0..p.len() {
                let g = p.grad[j].as_f64() * scale;
                let mj = c.beta1 * m[j] as f64 + (1.0 - c.beta1) * g;
                let vj = c.beta2 * v[j] as f64 + (1.0 - c.beta2) * g * g;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let upd = c.lr * (mj / bc1) / ((vj / bc2).sqrt() + c.eps);
                p.value[j] = S::of(p.value[j].as_f64() - upd);
            }
            idx += 1;
        });
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{join, Param};

    struct Quadratic(Param<f64>);

    impl Module<f64> for Quadratic {
        fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
            f(&join(prefix, "x"), &mut self.0);
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut q = Quadratic(Param::filled(&[2], 1.0));
        q.0.grad = vec![0.5, -2.0];
        let mut opt = Adam::new(AdamConfig { clip_norm: None, ..Default::default() }, &mut q);
        opt.step(&mut q);
        // Bias-corrected first step is lr * sign(g) up to eps.
        assert!((q.0.value[0] - (1.0 - 1e-4)).abs() < 1e-9);
        assert!((q.0.value[1] - (1.0 + 1e-4)).abs() < 1e-9);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut q = Quadratic(Param::filled(&[3], 5.0));
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &mut q);
        for _ in 0..500 {
            q.0.grad = q.0.value.iter().map(|x| 2.0 * (x - 1.5)).collect();
            opt.step(&mut q);
        }
        assert!(q.0.value.iter().all(|x| (x - 1.5).abs() < 1e-2));
    }

    #[test]
    fn clipping_caps_the_effective_gradient() {
        let mut q = Quadratic(Param::filled(&[1], 0.0));
        q.0.grad = vec![100.0];
        let mut opt = Adam::new(AdamConfig::default(), &mut q);
        assert_eq!(opt.step(&mut q), 100.0);
        assert!((opt.m[0][0] - 0.1).abs() < 1e-6);
    }
}
