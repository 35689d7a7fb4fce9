//! Adam with decoupled weight decay.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u32,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }

    /// One update of `params` given `grads` (same order, same sizes, stable
    /// across calls).
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        let lrs = vec![lr; params.len()];
        self.step_with_rates(params, grads, &lrs)
    }

    /// As [`AdamW::step`] with a learning rate per tensor.
    pub fn step_with_rates(&mut self, params: Vec<&mut Tensor>, grads: &[Vec<f64>], lrs: &[f64]) -> Result<()> {
        if params.len() != grads.len() || params.len() != lrs.len() {
            return Err(Error::config(format!(
                "optimizer got {} params, {} gradients and {} rates",
                params.len(),
                grads.len(),
                lrs.len()
            )));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::config("optimizer parameter list changed between steps"));
        }
        self.t += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (k, ((p, g), &lr)) in params.into_iter().zip(grads).zip(lrs).enumerate() {
            if p.numel() != g.len() || self.m[k].len() != g.len() {
                return Err(Error::shape("adamw", p.shape(), &[g.len()]));
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *w -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *w);
            }
        }
        Ok(())
    }
}

/// Global L2 norm over a set of gradients.
pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}
