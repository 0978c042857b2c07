use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::supernet::AdapterKey;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Decoupled weight decay.
    pub weight_decay: f32,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment buffers for one tensor with its own update counter.
///
/// Bias correction uses this counter, not the global training step, so a
/// tensor that is rarely on the sampled path still gets a full-size first step.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Matrix,
    pub v: Matrix,
    pub step: u64,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize) -> Self {
        AdamState {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            step: 0,
        }
    }

    pub fn update(&mut self, param: &mut Matrix, grad: &Matrix, hp: &AdamParams) -> Result<()> {
        if param.shape() != grad.shape() || param.shape() != self.m.shape() {
            return Err(crate::QfaError::Shape(format!(
                "adam: param {:?}, grad {:?}, state {:?}",
                param.shape(),
                grad.shape(),
                self.m.shape()
            )));
        }
        self.step += 1;
        let c1 = 1.0 - hp.beta1.powi(self.step as i32);
        let c2 = 1.0 - hp.beta2.powi(self.step as i32);
        let p = param.data_mut();
        let m = self.m.data_mut();
        let v = self.v.data_mut();
        for (i, &g) in grad.data().iter().enumerate() {
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= hp.lr * (m_hat / (v_hat.sqrt() + hp.eps) + hp.weight_decay * p[i]);
        }
        Ok(())
    }
}

/// Optimizer state for the supernet's trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptState {
    /// `(Ã state, B state)` per adapter.
    pub adapters: BTreeMap<AdapterKey, (AdamState, AdamState)>,
    pub head: Option<AdamState>,
}
