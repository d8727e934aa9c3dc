//! Adam optimiser over a flat list of parameter tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, shapes: &[&[usize]]) -> Self {
        Self {
            config,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// One bias-corrected update with learning rate `lr` (overrides the
    /// configured rate, e.g. during warm-up).
    pub fn update_with_lr(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Invalid(format!(
                "optimiser tracks {} tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (ib1, ib2) = (T::one() - b1, T::one() - b2);
        let step_size = T::from_f64_lossy(lr / bc1);
        let sqrt_bc2 = T::from_f64_lossy(bc2.sqrt());
        let eps = T::from_f64_lossy(c.eps);
        for (k, p) in params.iter_mut().enumerate() {
            if p.shape() != grads[k].shape() {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: grads[k].shape().to_vec(),
                });
            }
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (((w, &g), mi), vi) in p.data_mut().iter_mut().zip(grads[k].data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + ib1 * g;
                *vi = b2 * *vi + ib2 * g * g;
                *w -= step_size * *mi / ((*vi).sqrt() / sqrt_bc2 + eps);
            }
        }
        Ok(())
    }

    pub fn update(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        let lr = self.config.lr;
        self.update_with_lr(params, grads, lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient() {
        let mut w = Tensor::<f64>::from_f64(&[2], &[1.0, -1.0]).unwrap();
        let g = Tensor::<f64>::from_f64(&[2], &[0.5, -3.0]).unwrap();
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &[&[2]]);
        adam.update(&mut [&mut w], &[g]).unwrap();
        assert!((w.data()[0] - 0.9).abs() < 1e-6);
        assert!((w.data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut w = Tensor::<f64>::from_f64(&[3], &[2.0, -1.0, 0.5]).unwrap();
        let mut adam = Adam::new(AdamConfig { lr: 0.05, ..Default::default() }, &[&[3]]);
        for _ in 0..2000 {
            let g = w.clone();
            adam.update(&mut [&mut w], &[g]).unwrap();
        }
        assert!(w.data().iter().all(|v| v.abs() < 1e-2), "{w:?}");
    }
}
