//! Named, ordered model parameters with gradient buffers.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One named parameter tensor and its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered collection of parameters. Order is the checkpoint and update
/// order, so it must be identical across runs (it is a function of model
/// construction only).
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    /// Append a parameter; names must be unique.
    pub fn add(&mut self, name: &str, value: Tensor) {
        debug_assert!(self.index_of(name).is_none(), "duplicate parameter {name}");
        let grad = Tensor::zeros(value.shape().to_vec());
        self.params.push(Parameter { name: String::from(name), value, grad });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> core::slice::Iter<'_, Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> core::slice::IterMut<'_, Parameter> {
        self.params.iter_mut()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn at(&self, idx: usize) -> &Parameter {
        &self.params[idx]
    }

    pub fn at_mut(&mut self, idx: usize) -> &mut Parameter {
        &mut self.params[idx]
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Config(alloc::format!("unknown parameter `{name}`")))
    }

    pub fn grad_of(&self, name: &str) -> Result<&Tensor> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.grad)
            .ok_or_else(|| Error::Config(alloc::format!("unknown parameter `{name}`")))
    }

    /// Total scalar count across all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.make_mut().fill(0.0);
        }
    }

    /// Add `delta` into the gradient buffer of parameter `idx`.
    pub fn accumulate_grad(&mut self, idx: usize, delta: &[f64]) {
        let g = self.params[idx].grad.make_mut();
        debug_assert_eq!(g.len(), delta.len());
        for (gi, di) in g.iter_mut().zip(delta.iter()) {
            *gi += di;
        }
    }

    /// Euclidean norm over all gradient buffers.
    pub fn grad_norm(&self) -> f64 {
        let mut acc = 0.0;
        for p in &self.params {
            for g in p.grad.data() {
                acc += g * g;
            }
        }
        libm::sqrt(acc)
    }

    /// True when both sets hold bitwise-identical values in the same order.
    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(other.params.iter())
                .all(|(a, b)| a.name == b.name && a.value.bit_eq(&b.value))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn add_get_and_order() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::zeros(vec![2, 2]));
        ps.add("b", Tensor::zeros(vec![2]));
        assert_eq!(ps.len(), 2);
        assert_eq!(ps.index_of("b"), Some(1));
        assert!(ps.get("w").is_ok());
        assert!(ps.get("missing").is_err());
        assert_eq!(ps.numel(), 6);
    }

    #[test]
    fn grad_accumulation_and_reset() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::zeros(vec![2]));
        ps.accumulate_grad(0, &[1.0, 2.0]);
        ps.accumulate_grad(0, &[0.5, -1.0]);
        assert_eq!(ps.at(0).grad.data(), &[1.5, 1.0]);
        assert!((ps.grad_norm() - libm::sqrt(1.5 * 1.5 + 1.0)).abs() < 1e-15);
        ps.zero_grads();
        assert_eq!(ps.at(0).grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn bit_eq_detects_divergence() {
        let mut a = ParamSet::new();
        a.add("w", Tensor::full(vec![2], 0.1));
        let mut b = a.clone();
        assert!(a.bit_eq(&b));
        b.at_mut(0).value.make_mut()[0] += 1e-16;
        assert!(!a.bit_eq(&b));
    }
}
