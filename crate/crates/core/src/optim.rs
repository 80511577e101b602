//! Adam with a step-decay learning-rate schedule.

use crate::error::{contract, Result};
use crate::params::{ParamId, ParamStore};

/// Adam hyperparameters, moments and step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub base_lr: f64,
    /// Steps between learning-rate decays.
    pub decay_interval: u64,
    pub decay_factor: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(base_lr: f64, decay_interval: u64, decay_factor: f64) -> Self {
        Self {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            base_lr,
            decay_interval: decay_interval.max(1),
            decay_factor,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// `base_lr · decay_factor^⌊step / decay_interval⌋`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let decays = (step / self.decay_interval) as i32;
        self.base_lr * self.decay_factor.powi(decays)
    }

    /// Learning rate the next update will use.
    pub fn effective_lr(&self) -> f64 {
        self.lr_at(self.step)
    }

    /// Applies one update to every parameter listed in `grads`.
    ///
    /// `grads[i]` pairs a parameter with its gradient; parameters that do not
    /// appear keep their moments but are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)]) -> Result<()> {
        for (id, g) in grads {
            if store.value(*id).len() != g.len() {
                return Err(contract(format!(
                    "adam: gradient for {} has {} entries, parameter has {}",
                    store.name(*id),
                    g.len(),
                    store.value(*id).len()
                )));
            }
        }
        if self.m.len() < store.len() {
            self.m.resize(store.len(), Vec::new());
            self.v.resize(store.len(), Vec::new());
        }
        let lr = self.effective_lr();
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads {
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            if m.is_empty() {
                *m = vec![0.0; g.len()];
                *v = vec![0.0; g.len()];
            }
            let p = store.value_mut(*id).data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_param(value: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add_param("p", Tensor::scalar(value));
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut s, id) = one_param(0.7);
        let mut adam = AdamState::new(0.001, 100, 0.5);
        adam.step(&mut s, &[(id, vec![0.0])]).unwrap();
        assert_eq!(s.value(id).data(), &[0.7]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn first_update_by_hand() {
        // m̂ = 1, v̂ = 1 after bias correction, so Δ = -lr / (1 + eps).
        let (mut s, id) = one_param(0.0);
        let mut adam = AdamState::new(0.001, 300_000, 0.5);
        adam.step(&mut s, &[(id, vec![1.0])]).unwrap();
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((s.value(id).data()[0] - expected).abs() < 1e-18);
        assert!((s.value(id).data()[0] - -0.000999999995).abs() < 1e-11);
    }

    #[test]
    fn schedule_halves_at_boundaries() {
        let adam = AdamState::new(0.001, 10, 0.5);
        assert_eq!(adam.lr_at(25), 0.001 * 0.25);
        for k in 0..6u64 {
            assert_eq!(adam.lr_at(10 * k + 9), adam.lr_at(10 * k));
            assert_eq!(adam.lr_at(10 * (k + 1)), adam.lr_at(10 * k) * 0.5);
        }
    }

    #[test]
    fn rejects_shape_mismatch() {
        let (mut s, id) = one_param(0.0);
        let mut adam = AdamState::new(0.001, 10, 0.5);
        assert!(adam.step(&mut s, &[(id, vec![1.0, 2.0])]).is_err());
        assert_eq!(adam.step, 0);
    }
}
