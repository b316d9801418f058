use serde::{Deserialize, Serialize};

use super::layers::Slot;

/// Adam with bias-corrected moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub(crate) step: u64,
    pub(crate) m: Vec<f64>,
    pub(crate) v: Vec<f64>,
}

impl Adam {
    pub fn new(learning_rate: f64, params: usize) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: vec![0.0; params],
            v: vec![0.0; params],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }

    /// Moments for a re-laid-out parameter vector: copied ranges keep their
    /// moments, new parameters start at zero. The step count carries over.
    pub fn remap(&self, copied: &[(Slot, Slot)], new_len: usize) -> Adam {
        let mut out = Adam {
            m: vec![0.0; new_len],
            v: vec![0.0; new_len],
            ..self.clone()
        };
        for (old, new) in copied {
            out.m[new.range()].copy_from_slice(old.of(&self.m));
            out.v[new.range()].copy_from_slice(old.of(&self.v));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_closed_form() {
        let mut opt = Adam::new(1e-3, 1);
        let mut p = [0.5];
        opt.step(&mut p, &[1.0]);
        let expected = 0.5 - 1e-3 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_at_minimum_leaves_parameter() {
        // f(p) = (p - 3)^2 has zero gradient at its minimum.
        let mut opt = Adam::new(1e-3, 1);
        let mut p = [3.0];
        let grad = 2.0 * (p[0] - 3.0);
        assert_eq!(grad, 0.0);
        opt.step(&mut p, &[grad]);
        assert_eq!(p[0], 3.0);
    }
}
