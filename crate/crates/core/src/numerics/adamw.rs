//! AdamW with decoupled weight decay.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        // Desk-scale default step size; the toy nets need larger steps than
        // a fine-tuned foundation model would.
        AdamWConfig {
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Optimizer state: per-parameter moment buffers plus a step counter.
pub struct AdamW {
    pub cfg: AdamWConfig,
    moments: Vec<Moments>,
    step: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            moments: Vec::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over parameters paired positionally with gradients.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "adamw: {} params vs {} grads",
                params.len(),
                grads.len()
            )));
        }
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| Moments {
                    m: vec![0.0; p.numel()],
                    v: vec![0.0; p.numel()],
                })
                .collect();
        }
        self.step += 1;
        let t = self.step as f64;
        let c = self.cfg;
        let bc1 = 1.0 - f64::from(c.beta1).powf(t);
        let bc2 = 1.0 - f64::from(c.beta2).powf(t);

        for ((param, grad), moments) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            if param.shape() != grad.shape() {
                return Err(Error::shape("adamw", param.shape(), grad.shape()));
            }
            let data = param.data_mut();
            for i in 0..data.len() {
                let g = grad.data()[i];
                moments.m[i] = c.beta1 * moments.m[i] + (1.0 - c.beta1) * g;
                moments.v[i] = c.beta2 * moments.v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = f64::from(moments.m[i]) / bc1;
                let v_hat = f64::from(moments.v[i]) / bc2;
                let update =
                    m_hat / (v_hat.sqrt() + f64::from(c.eps)) + f64::from(c.weight_decay) * f64::from(data[i]);
                data[i] -= (f64::from(c.lr) * update) as f32;
            }
        }
        Ok(())
    }
}
