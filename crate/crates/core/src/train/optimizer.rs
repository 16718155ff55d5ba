use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::checkpoint::OptimizerState;
use crate::model::{param_specs, ModelConfig, ParamKind, Params};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: 1.0,
        }
    }
}

/// AdamW with decoupled weight decay on matrices and embeddings only.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub state: OptimizerState<T>,
    decay: Vec<bool>,
}

/// L2 norm over every gradient entry.
pub fn global_norm<T: Scalar>(grads: &[Vec<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| {
            let v = v.as_f64();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, model: &ModelConfig) -> Self {
        let specs = param_specs(model);
        let zeros: Vec<Tensor<T>> = specs.iter().map(|s| Tensor::zeros(&s.shape)).collect();
        Self {
            config,
            state: OptimizerState {
                step: 0,
                m: zeros.clone(),
                v: zeros,
            },
            decay: specs.iter().map(|s| s.kind == ParamKind::Weight).collect(),
        }
    }

    /// Resume from stored moments.
    pub fn with_state(config: AdamWConfig, model: &ModelConfig, state: OptimizerState<T>) -> Result<Self> {
        let mut opt = Self::new(config, model);
        let ok = state.m.len() == opt.state.m.len()
            && state.m.iter().zip(&opt.state.m).all(|(a, b)| a.shape() == b.shape())
            && state.v.iter().zip(&opt.state.v).all(|(a, b)| a.shape() == b.shape());
        if !ok {
            return Err(Error::shape("optimizer state does not match the model"));
        }
        opt.state = state;
        Ok(opt)
    }

    /// Clip, then apply one update. Returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut Params<T>, grads: &mut [Vec<T>], lr: f64) -> Result<f64> {
        if grads.len() != params.tensors.len() {
            return Err(Error::shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.tensors.len()
            )));
        }
        let norm = global_norm(grads);
        if !norm.is_finite() {
            return Err(Error::Numeric("non-finite gradient norm".into()));
        }
        let c = self.config;
        if c.grad_clip > 0.0 && norm > c.grad_clip {
            let s = T::of(c.grad_clip / norm);
            grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|v| *v = *v * s);
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (ob1, ob2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let step_size = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(c.eps);
        for (i, p) in params.tensors.iter_mut().enumerate() {
            let shrink = if self.decay[i] {
                T::of(1.0 - lr * c.weight_decay)
            } else {
                T::one()
            };
            let m = self.state.m[i].data_mut();
            let v = self.state.v[i].data_mut();
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(&grads[i]).zip(m).zip(v) {
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                let denom = (*v * inv_bc2).sqrt() + eps;
                *w = *w * shrink - step_size * *m / denom;
            }
        }
        Ok(norm)
    }
}
