//! Adam with explicit, serializable state.

use crate::tensor::Tensor;
use crate::var::Var;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

/// Snapshot of the moment buffers, for checkpointing.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates each parameter in place. `params` must keep the same order and
    /// shapes across calls.
    pub fn step(&mut self, params: &mut [&mut Var], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "parameter list changed size");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch for parameter {i}");
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let mut value = p.value().clone();
            let data = value.data_mut();
            for j in 0..data.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            **p = Var::param(value);
        }
    }

    pub fn state(&self) -> AdamState {
        AdamState {
            step: self.step,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    pub fn load_state(&mut self, state: AdamState) {
        self.step = state.step;
        self.m = state.m;
        self.v = state.v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut adam = Adam::new(1e-4, 0.0, 0.99);
        let mut p = Var::param(Tensor::new(&[3], vec![0.3, -1.2, 7.0]));
        let before = p.value().clone();
        adam.step(&mut [&mut p], &[Tensor::zeros(&[3])]);
        assert_eq!(p.value(), &before);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        let mut adam = Adam::new(0.1, 0.0, 0.99);
        let mut p = Var::param(Tensor::new(&[2], vec![1.0, 1.0]));
        adam.step(&mut [&mut p], &[Tensor::new(&[2], vec![2.0, -3.0])]);
        let d = p.value().data();
        assert!((d[0] - 0.9).abs() < 1e-6);
        assert!((d[1] - 1.1).abs() < 1e-6);
    }
}
