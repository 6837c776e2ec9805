//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use super::model::{Gradients, ModelParameters, TENSOR_NAMES};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn for_model(model: &ModelParameters) -> Self {
        let zeros: Vec<Tensor> = model
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Applies one update in place. A non-finite gradient leaves the model
/// untouched and reports the first offending entry.
pub fn adam_step(model: &mut ModelParameters, grads: &Gradients, config: &AdamConfig) -> Result<()> {
    let shapes_match = grads.0.len() == TENSOR_NAMES.len()
        && grads
            .0
            .iter()
            .zip(model.tensors())
            .all(|(g, p)| g.shape() == p.shape());
    if !shapes_match {
        return Err(Error::invalid("gradient shapes do not match the parameters"));
    }
    if let Some((name, idx, value)) = grads.first_non_finite() {
        return Err(Error::NonFinite {
            what: format!("gradient of {name}"),
            detail: format!("entry {idx} is {value}; step {} rejected", model.adam.step + 1),
        });
    }
    if model.adam.m.len() != TENSOR_NAMES.len() {
        model.adam = AdamState::for_model(model);
    }

    let AdamConfig { lr, beta1, beta2, eps } = *config;
    let t = model.adam.step + 1;
    let c1 = 1.0 - beta1.powf(t as f64);
    let c2 = 1.0 - beta2.powf(t as f64);

    let mut state = std::mem::take(&mut model.adam);
    for (((p, g), m), v) in model
        .tensors_mut()
        .into_iter()
        .zip(&grads.0)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    state.step = t;
    model.adam = state;
    Ok(())
}
