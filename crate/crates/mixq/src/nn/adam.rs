//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::layers::ParamSet;
use super::mat::Mat;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<Mat>,
    v: Vec<Mat>,
    step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Self {
        let m = params.mats.iter().map(|p| Mat::zeros(p.rows, p.cols)).collect();
        let v = params.mats.iter().map(|p| Mat::zeros(p.rows, p.cols)).collect();
        Adam { cfg, m, v, step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update: bias-corrected moments plus decoupled decay
    /// `θ <- θ - lr * m̂ / (sqrt(v̂) + eps) - lr * wd * θ`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Mat]) {
        debug_assert_eq!(params.mats.len(), grads.len());
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .mats
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * gi;
                v.data[i] = c.beta2 * v.data[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= c.lr * mhat / (vhat.sqrt() + c.eps) + c.lr * c.weight_decay * p.data[i];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParamSet {
        ParamSet {
            mats: vec![Mat::filled(1, 3, v)],
            names: vec!["p".into()],
        }
    }

    #[test]
    fn zero_gradient_no_decay_leaves_params() {
        let mut p = one_param(0.7);
        let mut opt = Adam::new(
            AdamConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &p,
        );
        opt.step(&mut p, &[Mat::zeros(1, 3)]);
        assert_eq!(p.mats[0].data, vec![0.7; 3]);
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        // Bias correction makes m̂/sqrt(v̂) = sgn(g) on the first step.
        for &g in &[1e-6, 0.5, 400.0, -3.0] {
            let mut p = one_param(0.0);
            let cfg = AdamConfig {
                lr: 1e-3,
                weight_decay: 0.0,
                ..Default::default()
            };
            let mut opt = Adam::new(cfg, &p);
            opt.step(&mut p, &[Mat::filled(1, 3, g)]);
            let delta = p.mats[0].data[0].abs();
            assert!(
                (delta - 1e-3).abs() < 1e-5,
                "g={g} moved {delta}, expected ~lr"
            );
            assert_eq!(p.mats[0].data[0].signum(), -g.signum());
        }
    }

    #[test]
    fn decoupled_decay_shrinks_with_zero_gradient() {
        let mut p = one_param(2.0);
        let cfg = AdamConfig {
            lr: 0.01,
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut opt = Adam::new(cfg, &p);
        opt.step(&mut p, &[Mat::zeros(1, 3)]);
        let expect = 2.0 * (1.0 - 0.01 * 0.1);
        for v in &p.mats[0].data {
            assert!((v - expect).abs() < 1e-12);
        }
    }
}
