//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        Self::with_betas(params, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &ModelParams, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = |p: &ModelParams| p.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &Tensor {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &Tensor {
        &self.v[i]
    }

    /// One update of every parameter. `grads` is aligned with the parameter
    /// order of `params`; every entry must be present.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (name, p)) in params.tensors_mut().enumerate() {
            let g = grads[i]
                .as_ref()
                .ok_or_else(|| Error::MissingGradient(name.to_string()))?;
            if g.shape() != p.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("`{name}`: grad {:?} vs param {:?}", g.shape(), p.shape()),
                ));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((pv, gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Role;

    fn one(v: f64) -> ModelParams {
        let mut p = ModelParams::new(Role::Classifier);
        p.insert("x", Tensor::from_vec(vec![v]));
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = one(1.0);
        let mut s = AdamState::new(&p, 0.01);
        s.step(&mut p, &[Some(Tensor::from_vec(vec![1.0]))]).unwrap();
        let after_first = p.get("x").unwrap().item();
        let m1 = s.first_moment(0).item();
        s.step(&mut p, &[Some(Tensor::from_vec(vec![0.0]))]).unwrap();
        // Momentum still moves the parameter; a fresh state must not.
        assert!(s.first_moment(0).item().abs() < m1.abs());
        let mut fresh = one(after_first);
        let mut s2 = AdamState::new(&fresh, 0.01);
        s2.step(&mut fresh, &[Some(Tensor::from_vec(vec![0.0]))]).unwrap();
        assert_eq!(fresh.get("x").unwrap().item(), after_first);
    }

    #[test]
    fn first_step_has_lr_magnitude() {
        let mut p = one(0.0);
        let mut s = AdamState::new(&p, 0.01);
        s.step(&mut p, &[Some(Tensor::from_vec(vec![1.0]))]).unwrap();
        // mhat = 1, vhat = 1 -> update = lr / (1 + eps)
        let expected = -0.01 / (1.0 + 1e-8);
        assert!((p.get("x").unwrap().item() - expected).abs() < 1e-15);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn constant_gradient_moves_against_sign() {
        let mut p = one(0.0);
        let mut s = AdamState::new(&p, 0.01);
        let mut prev = 0.0;
        for _ in 0..50 {
            s.step(&mut p, &[Some(Tensor::from_vec(vec![-3.0]))]).unwrap();
            let x = p.get("x").unwrap().item();
            assert!(x > prev);
            prev = x;
        }
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = one(0.0);
        let mut s = AdamState::new(&p, 0.01);
        assert!(matches!(s.step(&mut p, &[None]), Err(Error::MissingGradient(_))));
    }
}
