//! Adam with per-parameter-group state.

use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1.6e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }

    /// One bias-corrected update with learning rate `lr`.
    pub fn update(&mut self, params: &mut [T], grads: &[T], lr: f64, cfg: &AdamConfig) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let b1 = T::lit(cfg.beta1);
        let b2 = T::lit(cfg.beta2);
        let c1 = T::one() - T::lit(cfg.beta1.powi(self.step as i32));
        let c2 = T::one() - T::lit(cfg.beta2.powi(self.step as i32));
        let lr = T::lit(lr);
        let eps = T::lit(cfg.eps);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![1.0f64, -2.0];
        let mut opt = Adam::new(2);
        opt.update(&mut p, &[3.0, -0.5], 0.1, &AdamConfig::default());
        assert!((p[0] - 0.9).abs() < 1e-12);
        assert!((p[1] + 1.9).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_is_noop() {
        let mut p = vec![0.25f32; 4];
        let mut opt = Adam::new(4);
        for _ in 0..5 {
            opt.update(&mut p, &[1.0; 4], 0.0, &AdamConfig::default());
        }
        assert_eq!(p, vec![0.25; 4]);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = vec![5.0f64];
        let mut opt = Adam::new(1);
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.5)];
            opt.update(&mut p, &g, 0.05, &AdamConfig::default());
        }
        assert!((p[0] - 1.5).abs() < 1e-2);
    }
}
