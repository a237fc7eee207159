//! Adam optimizer with bias correction.

use alloc::string::ToString;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Adam moment decay rates and denominator epsilon.
#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.98, eps: 1e-6 }
    }
}

/// First/second moment estimates, one tensor per parameter, plus step count.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    /// Fresh zeroed state shaped like `params`.
    pub fn new(params: &ParamSet) -> Self {
        let m = params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        let v = params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        AdamState { m, v, t: 0 }
    }

    /// One bias-corrected Adam update from the gradients stored in `params`.
    /// Fails with the offending parameter's name if an update is non-finite.
    pub fn step(&mut self, params: &mut ParamSet, lr: f64, h: &AdamHyper) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                expected: alloc::vec![self.m.len()],
                got: alloc::vec![params.len()],
            });
        }
        self.t += 1;
        let bc1 = 1.0 - libm::pow(h.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(h.beta2, self.t as f64);
        for (idx, p) in params.iter_mut().enumerate() {
            let theta = p.value.make_mut();
            let grad = p.grad.data();
            let m = self.m[idx].make_mut();
            let v = self.v[idx].make_mut();
            for i in 0..theta.len() {
                let g = grad[i];
                m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
                v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                theta[i] -= lr * mhat / (libm::sqrt(vhat) + h.eps);
                if !theta[i].is_finite() {
                    return Err(Error::TrainingDiverged(p.name.to_string()));
                }
            }
        }
        Ok(())
    }
}
