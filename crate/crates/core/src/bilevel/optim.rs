use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::params;

/// Adam with an optional linear decay of the step size to zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps over which the rate decays linearly to zero.
    pub decay_steps: Option<u64>,
    t: u64,
    m: Vec<Array>,
    v: Vec<Array>,
}

impl Adam {
    pub fn new(lr: f64, like: &[Array]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_steps: None,
            t: 0,
            m: params::zeros_like(like),
            v: params::zeros_like(like),
        }
    }

    pub fn with_linear_decay(mut self, steps: u64) -> Self {
        self.decay_steps = Some(steps);
        self
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    fn current_lr(&self) -> f64 {
        match self.decay_steps {
            Some(total) if total > 0 => self.lr * (1.0 - (self.t - 1) as f64 / total as f64).max(0.0),
            _ => self.lr,
        }
    }

    pub fn step(&mut self, params: &mut [Array], grads: &[Array]) {
        self.t += 1;
        let lr = self.current_lr();
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Rescale `g` in place so its global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_to_norm(g: &mut [Array], max_norm: f64) -> f64 {
    let norm = params::norm(g);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for a in g.iter_mut() {
            for x in a.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut p = vec![Array::vector(vec![1.0, -1.0])];
        let g = vec![Array::vector(vec![0.3, -5.0])];
        let mut opt = Adam::new(0.1, &p);
        opt.step(&mut p, &g);
        assert!((p[0].data()[0] - 0.9).abs() < 1e-6);
        assert!((p[0].data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![Array::vector(vec![3.0])];
        let mut opt = Adam::new(0.05, &p);
        for _ in 0..2000 {
            let g = vec![p[0].scaled(2.0)];
            opt.step(&mut p, &g);
        }
        assert!(p[0].data()[0].abs() < 1e-2);
    }

    #[test]
    fn linear_decay_reaches_zero() {
        let mut p = vec![Array::vector(vec![0.0])];
        let mut opt = Adam::new(1.0, &p).with_linear_decay(2);
        opt.step(&mut p, &[Array::vector(vec![1.0])]);
        opt.step(&mut p, &[Array::vector(vec![1.0])]);
        let before = p[0].data()[0];
        opt.step(&mut p, &[Array::vector(vec![1.0])]);
        assert_eq!(p[0].data()[0], before);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Array::vector(vec![3.0, 4.0])];
        assert_eq!(clip_to_norm(&mut g, 10.0), 5.0);
        assert_eq!(g[0].data(), &[3.0, 4.0]);
        assert_eq!(clip_to_norm(&mut g, 1.0), 5.0);
        assert!((params::norm(&g) - 1.0).abs() < 1e-15);
    }
}
