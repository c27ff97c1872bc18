use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    first: Tensor,
    second: Tensor,
    step: u64,
}

/// Adam with bias correction. Moments and step counts are kept per
/// parameter, so disjoint parameter groups can be stepped alternately.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    state: HashMap<ParamId, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: HashMap::new(),
        }
    }

    pub fn step_count(&self, id: ParamId) -> u64 {
        self.state.get(&id).map_or(0, |m| m.step)
    }

    /// Updates `params` from their accumulated gradients. Nothing is written
    /// if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, params: &[ParamId]) -> Result<()> {
        for &id in params {
            if !store.grad(id).is_finite() {
                return Err(TensorError::NonFiniteGradient(store.get(id).name.clone()));
            }
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        for &id in params {
            let param = store.get_mut(id);
            let st = self.state.entry(id).or_insert_with(|| Moments {
                first: Tensor::zeros(param.value.shape()),
                second: Tensor::zeros(param.value.shape()),
                step: 0,
            });
            st.step += 1;
            let bc1 = 1.0 - beta1.powi(st.step as i32);
            let bc2 = 1.0 - beta2.powi(st.step as i32);
            let values = param.value.data_mut();
            let grads = param.grad.data();
            let m = st.first.data_mut();
            let v = st.second.data_mut();
            for i in 0..values.len() {
                let g = grads[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
