use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ParamGroup, ParamStore, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient in parameter `{param}` at step {step}")]
    NonFiniteGradient { param: String, step: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr_backbone: f64,
    pub lr_column_embedding: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr_backbone: 1e-4,
            lr_column_embedding: 5e-3,
            weight_decay: 1e-5,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn lr_for(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Backbone => self.lr_backbone,
            ParamGroup::ColumnEmbedding => self.lr_column_embedding,
        }
    }
}

/// AdamW with decoupled weight decay and per-group learning rates.
#[derive(Clone, Debug)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    first: Vec<Vec<F>>,
    second: Vec<Vec<F>>,
    step: u64,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(config: AdamWConfig, store: &ParamStore<F>) -> Self {
        Self {
            config,
            first: store.iter().map(|(_, p)| vec![F::zero(); p.numel()]).collect(),
            second: store.iter().map(|(_, p)| vec![F::zero(); p.numel()]).collect(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients held in `store`. Nothing is
    /// modified when any trainable gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<F>) -> Result<(), OptimError> {
        for (_, p) in store.iter() {
            if p.trainable && p.grad.iter().any(|g| !g.is_finite()) {
                return Err(OptimError::NonFiniteGradient {
                    param: p.name().to_string(),
                    step: self.step,
                });
            }
        }
        self.step += 1;
        let (b1, b2) = self.config.betas;
        let t = self.step as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let (b1f, b2f) = (F::lit(b1), F::lit(b2));
        let (ob1, ob2) = (F::lit(1.0 - b1), F::lit(1.0 - b2));
        let eps = F::lit(self.config.eps);
        for (k, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let lr = self.config.lr_for(p.group());
            let step_size = F::lit(lr / bc1);
            let bc2_sqrt = F::lit(bc2.sqrt());
            let shrink = if p.decay {
                F::lit(1.0 - lr * self.config.weight_decay)
            } else {
                F::one()
            };
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for j in 0..p.data.len() {
                let g = p.grad[j];
                m[j] = b1f * m[j] + ob1 * g;
                v[j] = b2f * v[j] + ob2 * g * g;
                let denom = v[j].sqrt() / bc2_sqrt + eps;
                p.data[j] = p.data[j] * shrink - step_size * m[j] / denom;
            }
        }
        Ok(())
    }
}
