use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(params: &[Tensor<S>], lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.iter().map(|p| vec![S::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![S::zero(); p.numel()]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. A `None` gradient leaves moments and weights untouched
    /// apart from weight decay.
    pub fn step(&mut self, params: &mut [Tensor<S>], grads: &[Option<&Tensor<S>>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return shape_err("optimizer state does not match parameter list");
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (S::of(self.beta1), S::of(self.beta2));
        let (one_b1, one_b2) = (S::of(1.0 - self.beta1), S::of(1.0 - self.beta2));
        let step_size = S::of(self.lr / bc1);
        let inv_bc2 = S::of(1.0 / bc2);
        let decay = S::of(1.0 - self.lr * self.weight_decay);
        let eps = S::of(self.eps);
        for (i, p) in params.iter_mut().enumerate() {
            let data = p.data_mut();
            data.iter_mut().for_each(|w| *w *= decay);
            let Some(g) = grads[i] else { continue };
            if g.numel() != data.len() {
                return shape_err(format!("gradient {i} has {} entries, parameter {}", g.numel(), data.len()));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in data.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                *w -= step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
