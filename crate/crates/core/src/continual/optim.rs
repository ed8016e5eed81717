//! Adaptive-moment optimizer with bias correction.

use crate::error::{Error, Result};
use crate::numkit::Tensor;

/// Adam over a fixed list of parameter tensors. Decay rates 0.9 / 0.999,
/// epsilon 1e-8. Updates run in parameter order, sequentially.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, params: &[Tensor]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params[i].data_mut();
            let g = grads[i].data();
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descends_a_quadratic() {
        let mut params = vec![Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap()];
        let mut opt = Adam::new(0.1, &params);
        for _ in 0..200 {
            let grads = vec![params[0].scale(2.0)];
            opt.step(&mut params, &grads).unwrap();
        }
        assert!(params[0].data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn first_step_moves_by_roughly_the_learning_rate() {
        let mut params = vec![Tensor::from_vec(&[1], vec![1.0]).unwrap()];
        let mut opt = Adam::new(0.01, &params);
        let grads = vec![Tensor::from_vec(&[1], vec![0.5]).unwrap()];
        opt.step(&mut params, &grads).unwrap();
        // Bias-corrected first step is lr * g / (|g| + eps) ~= lr.
        assert!((params[0].data()[0] - (1.0 - 0.01)).abs() < 1e-6);
    }

    #[test]
    fn deterministic_across_replays() {
        let run = || {
            let mut params = vec![Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap()];
            let mut opt = Adam::new(0.05, &params);
            for k in 0..50 {
                let grads = vec![params[0].scale(1.0 + k as f64 * 0.1)];
                opt.step(&mut params, &grads).unwrap();
            }
            params.remove(0)
        };
        assert_eq!(run(), run());
    }
}
