//! Adam with a step-halving learning-rate schedule and global-norm clipping.

use crate::error::{Error, Result};
use crate::modelkit::params::{GradStore, Params};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr0: f64,
    /// Effective lr is lr0 * 2^-(floor(step / halving_period)), step counted from 0.
    pub halving_period: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr0: 4e-4, halving_period: 50_000, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps_done: u64,
}

impl Adam {
    pub fn new(params: &Params, cfg: AdamConfig) -> Self {
        let m = params.iter().map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        let v = params.iter().map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        Adam { cfg, m, v, steps_done: 0 }
    }

    pub fn steps_done(&self) -> u64 {
        self.steps_done
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        self.cfg.lr0 * 2f64.powi(-((step / self.cfg.halving_period) as i32))
    }

    /// One update. `grads` must already be clipped; non-finite gradients abort.
    pub fn step(&mut self, params: &mut Params, grads: &GradStore) -> Result<()> {
        if !grads.all_finite() {
            return Err(Error::Numeric("non-finite gradient reached the optimizer".into()));
        }
        let lr = self.lr_at(self.steps_done);
        let t = (self.steps_done + 1) as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
        for i in 0..params.len() {
            let id = crate::modelkit::params::ParamId(i);
            let g = grads.get(id);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = params.get_mut(id);
            let (md, vd, pd, gd) = (m.data_mut(), v.data_mut(), p.data_mut(), g.data());
            for j in 0..gd.len() {
                md[j] = b1 * md[j] + (1.0 - b1) * gd[j];
                vd[j] = b2 * vd[j] + (1.0 - b2) * gd[j] * gd[j];
                let mhat = md[j] / bc1;
                let vhat = vd[j] / bc2;
                pd[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        self.steps_done += 1;
        Ok(())
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut GradStore, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelkit::params::ParamId;

    fn one_param(v: Vec<f64>) -> (Params, ParamId) {
        let mut p = Params::new();
        let id = p.add("w", Tensor::row_vector(v));
        (p, id)
    }

    #[test]
    fn schedule_halves_by_period() {
        let (p, _) = one_param(vec![0.0]);
        let adam = Adam::new(&p, AdamConfig { lr0: 4e-4, halving_period: 50_000, ..Default::default() });
        assert!((adam.lr_at(0) - 4e-4).abs() < 1e-18);
        assert!((adam.lr_at(49_999) - 4e-4).abs() < 1e-18);
        assert!((adam.lr_at(50_000) - 2e-4).abs() < 1e-18);
        assert!((adam.lr_at(100_000) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn zero_gradients_leave_fresh_parameters_unchanged() {
        let (mut p, id) = one_param(vec![1.0, -2.0, 3.0]);
        let before = p.get(id).clone();
        let grads = GradStore::zeros_like(&p);
        let mut adam = Adam::new(&p, AdamConfig::default());
        adam.step(&mut p, &grads).unwrap();
        assert_eq!(p.get(id), &before);
    }

    #[test]
    fn first_step_moves_against_gradient_sign() {
        let (mut p, id) = one_param(vec![0.5, 0.5]);
        let mut grads = GradStore::zeros_like(&p);
        grads.acc(id, &[1.0, -1.0]);
        let mut adam = Adam::new(&p, AdamConfig { lr0: 0.1, ..Default::default() });
        adam.step(&mut p, &grads).unwrap();
        // Bias-corrected first step is ~lr * sign(g).
        assert!(p.get(id).data()[0] < 0.5);
        assert!(p.get(id).data()[1] > 0.5);
        assert!((p.get(id).data()[0] - (0.5 - 0.1)).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradients_abort() {
        let (mut p, id) = one_param(vec![0.0]);
        let mut grads = GradStore::zeros_like(&p);
        grads.acc(id, &[f64::NAN]);
        let mut adam = Adam::new(&p, AdamConfig::default());
        assert!(matches!(adam.step(&mut p, &grads), Err(Error::Numeric(_))));
    }

    #[test]
    fn clipping_caps_global_norm() {
        let (p, id) = one_param(vec![0.0, 0.0]);
        let mut grads = GradStore::zeros_like(&p);
        grads.acc(id, &[30.0, 40.0]);
        let pre = clip_global_norm(&mut grads, 5.0);
        assert!((pre - 50.0).abs() < 1e-12);
        assert!((grads.global_norm() - 5.0).abs() < 1e-12);
        // Already-small gradients are untouched.
        let pre2 = clip_global_norm(&mut grads, 5.0);
        assert!((pre2 - 5.0).abs() < 1e-12);
        assert!((grads.get(id).data()[0] - 3.0).abs() < 1e-12);
    }
}
