//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::params::{GradStore, ParameterSet};
use crate::scalar::Scalar;

/// Optimizer state: first/second moment per parameter tensor plus the step
/// counter. Moments are stored in parameter order.
pub struct AdamW<F> {
    beta1: F,
    beta2: F,
    eps: F,
    t: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(params: &ParameterSet<F>) -> Self {
        AdamW {
            beta1: F::cast(0.9),
            beta2: F::cast(0.999),
            eps: F::cast(1e-8),
            t: 0,
            m: params.iter().map(|(_, t)| vec![F::zero(); t.numel()]).collect(),
            v: params.iter().map(|(_, t)| vec![F::zero(); t.numel()]).collect(),
        }
    }

    /// One decoupled update:
    /// `theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta`.
    pub fn step(
        &mut self,
        params: &mut ParameterSet<F>,
        grads: &GradStore<F>,
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        if grads.has_non_finite() {
            return Err(Error::domain("NaN/Inf gradient; aborting the run"));
        }
        self.t += 1;
        let lr = F::cast(lr);
        let wd = F::cast(weight_decay);
        let bc1 = F::one() - self.beta1.powi(self.t as i32);
        let bc2 = F::one() - self.beta2.powi(self.t as i32);
        for (idx, (name, tensor)) in params.iter_mut().enumerate() {
            let g = grads.get(name);
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for j in 0..tensor.data.len() {
                m[j] = self.beta1 * m[j] + (F::one() - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (F::one() - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                let theta = tensor.data[j];
                tensor.data[j] = theta - lr * (m_hat / (v_hat.sqrt() + self.eps)) - lr * wd * theta;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single_param(value: f64) -> ParameterSet<f64> {
        let mut p = ParameterSet::new();
        p.insert("x", Tensor::vector(vec![value])).unwrap();
        p
    }

    fn grad_of(params: &ParameterSet<f64>, g: f64) -> GradStore<f64> {
        let mut store = GradStore::zeros_like(params);
        store.add_scaled("x", &[g], 1.0);
        store
    }

    #[test]
    fn zero_grad_with_decay_scales_theta() {
        let mut p = single_param(2.0);
        let mut opt = AdamW::new(&p);
        let g = grad_of(&p, 0.0);
        opt.step(&mut p, &g, 0.1, 0.5).unwrap();
        // pure decoupled decay: theta * (1 - lr*wd)
        assert!((p.get("x").unwrap().data[0] - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut p = single_param(1.5);
        let mut opt = AdamW::new(&p);
        let g = grad_of(&p, 0.0);
        opt.step(&mut p, &g, 0.1, 0.0).unwrap();
        assert_eq!(p.get("x").unwrap().data[0], 1.5);
    }

    #[test]
    fn two_steps_match_hand_formula() {
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let (lr, wd) = (0.01, 0.1);
        let mut p = single_param(1.0);
        let mut opt = AdamW::new(&p);
        // reference trajectory computed directly from the update equations
        let mut theta = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=2 {
            let g = 1.0f64;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            theta = theta - lr * (m_hat / (v_hat.sqrt() + eps)) - lr * wd * theta;
            let grad = grad_of(&p, g);
            opt.step(&mut p, &grad, lr, wd).unwrap();
        }
        assert!((p.get("x").unwrap().data[0] - theta).abs() < 1e-12);
    }

    #[test]
    fn random_trajectory_matches_scalar_reimplementation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let (lr, wd) = (3e-3, 5e-4);
        let mut p = single_param(0.7);
        let mut opt = AdamW::new(&p);
        let mut theta = 0.7f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=200 {
            let g: f64 = rng.gen_range(-2.0..2.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            theta = theta - lr * (m_hat / (v_hat.sqrt() + eps)) - lr * wd * theta;
            let grad = grad_of(&p, g);
            opt.step(&mut p, &grad, lr, wd).unwrap();
        }
        assert!((p.get("x").unwrap().data[0] - theta).abs() < 1e-10);
    }

    #[test]
    fn nan_grad_aborts() {
        let mut p = single_param(1.0);
        let mut opt = AdamW::new(&p);
        let g = grad_of(&p, f64::NAN);
        assert!(opt.step(&mut p, &g, 0.1, 0.0).is_err());
    }
}
