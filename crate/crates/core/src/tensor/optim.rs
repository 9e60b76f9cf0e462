use serde::{Deserialize, Serialize};

use super::{Real, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay. Moment buffers are allocated on the
/// first step and must stay aligned with the parameter order afterwards.
#[derive(Clone, Debug)]
pub struct AdamW<T: Real = f32> {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, index: usize) -> Option<(&[T], &[T])> {
        Some((self.first.get(index)?, self.second.get(index)?))
    }

    /// Applies one update from each parameter's accumulated gradient. A
    /// parameter without a gradient buffer is treated as having zero gradient.
    pub fn step<'a, I>(&mut self, params: I) -> Result<(), TensorError>
    where
        I: IntoIterator<Item = &'a mut Tensor<T>>,
    {
        let params: Vec<&mut Tensor<T>> = params.into_iter().collect();
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adamw_step",
                left: vec![self.first.len()],
                right: vec![params.len()],
            });
        }
        for (i, p) in params.iter().enumerate() {
            let bad_state = self.first[i].len() != p.numel();
            let bad_grad = p.grad().is_some_and(|g| g.len() != p.numel());
            if bad_state || bad_grad {
                return Err(TensorError::ShapeMismatch {
                    op: "adamw_step",
                    left: p.shape().to_vec(),
                    right: vec![self.first[i].len()],
                });
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let lr = T::of(c.lr);
        let decay = T::of(1.0 - c.lr * c.weight_decay);
        let (inv_bc1, inv_bc2) = (T::of(1.0 / bc1), T::of(1.0 / bc2));
        let eps = T::of(c.eps);
        for (i, p) in params.into_iter().enumerate() {
            let grad = p.grad().map(|g| g.to_vec());
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            let data = p.data_mut();
            for j in 0..data.len() {
                let g = grad.as_ref().map_or(T::zero(), |g| g[j]);
                m[j] = b1 * m[j] + one_b1 * g;
                v[j] = b2 * v[j] + one_b2 * g * g;
                let mhat = m[j] * inv_bc1;
                let vhat = v[j] * inv_bc2;
                data[j] = data[j] * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
