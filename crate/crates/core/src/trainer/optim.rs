//! Adam optimizer over a flat parameter vector.

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Updates over which the step size ramps linearly up to `learning_rate`.
    pub warmup_steps: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, warmup_steps: 40 }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    config: AdamConfig,
    m: Vec<T>,
    v: Vec<T>,
    step: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        Self {
            config,
            m: vec![T::zero(); num_params],
            v: vec![T::zero(); num_params],
            step: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn update(&mut self, params: &mut [T], grads: &[T]) {
        assert_eq!(params.len(), grads.len());
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let corr1 = 1.0 - c.beta1.powi(self.step);
        let corr2 = 1.0 - c.beta2.powi(self.step);
        let ramp = if c.warmup_steps > 0 { (self.step as f64 / c.warmup_steps as f64).min(1.0) } else { 1.0 };
        let step_size = T::of(ramp * c.learning_rate / corr1);
        let inv_sqrt_corr2 = T::of(1.0 / corr2.sqrt());
        let eps = T::of(c.epsilon);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            *p -= step_size * *m / ((*v).sqrt() * inv_sqrt_corr2 + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = AdamConfig { warmup_steps: 0, ..AdamConfig::default() };
        let mut adam = Adam::<f64>::new(cfg, 3);
        let mut p = vec![1.0, -2.0, 0.5];
        adam.update(&mut p, &[0.3, -4.0, 0.0]);
        // bias-corrected first step is lr * g / (|g| + eps)
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p[1] - (-2.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn warmup_scales_early_steps() {
        let cfg = AdamConfig { warmup_steps: 4, ..AdamConfig::default() };
        let mut adam = Adam::<f64>::new(cfg, 1);
        let mut p = vec![0.0];
        adam.update(&mut p, &[1.0]);
        assert!((p[0] + 0.25e-3).abs() < 1e-10);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let cfg = AdamConfig { learning_rate: 0.05, warmup_steps: 0, ..AdamConfig::default() };
        let mut adam = Adam::<f64>::new(cfg, 2);
        let mut p = vec![5.0, -3.0];
        for _ in 0..2000 {
            let g = vec![2.0 * (p[0] - 1.0), 2.0 * (p[1] + 2.0)];
            adam.update(&mut p, &g);
        }
        assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 2.0).abs() < 1e-3);
    }
}
