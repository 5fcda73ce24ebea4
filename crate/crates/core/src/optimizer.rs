//! Adam with per-parameter step counts.
//!
//! Feature-layer parameters are stepped more often than regression-layer
//! parameters (the 2:1 update schedule), so bias correction has to track
//! each parameter's own step count rather than a global one.

use std::collections::HashMap;

use thiserror::Error;

use crate::autodiff::tape::Gradients;
use crate::autodiff::tensor::Tensor2;
use crate::network::ParamSet;

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("gradient for `{name}` is {got_rows}x{got_cols}, parameter is {rows}x{cols}")]
    ShapeMismatch {
        name: String,
        rows: usize,
        cols: usize,
        got_rows: usize,
        got_cols: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig::with_lr(1e-3)
    }
}

#[derive(Debug, Clone)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    slots: HashMap<String, Slot>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            slots: HashMap::new(),
        }
    }

    /// Apply one update to every parameter that passes `gate` and has a
    /// gradient. Parameters without gradients (heads absent from the step's
    /// graph) keep their moment state untouched. Returns how many parameters
    /// moved.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &Gradients,
        gate: impl Fn(&str) -> bool,
    ) -> Result<usize, OptimizerError> {
        let mut updated = 0;
        for (name, value) in params.iter_mut() {
            if !gate(name) {
                continue;
            }
            let Some(grad) = grads.get(name) else {
                continue;
            };
            if grad.rows() != value.rows() || grad.cols() != value.cols() {
                return Err(OptimizerError::ShapeMismatch {
                    name: name.to_string(),
                    rows: value.rows(),
                    cols: value.cols(),
                    got_rows: grad.rows(),
                    got_cols: grad.cols(),
                });
            }
            if grad.data().iter().any(|g| !g.is_finite()) {
                return Err(OptimizerError::NonFiniteGradient(name.to_string()));
            }
            let slot = self.slots.entry(name.to_string()).or_insert_with(|| Slot {
                m: vec![0.0; grad.data().len()],
                v: vec![0.0; grad.data().len()],
                t: 0,
            });
            slot.t += 1;
            let AdamConfig {
                lr,
                beta1,
                beta2,
                eps,
            } = self.cfg;
            let bc1 = 1.0 - beta1.powi(slot.t as i32);
            let bc2 = 1.0 - beta2.powi(slot.t as i32);
            update_in_place(value, grad, slot, lr, beta1, beta2, eps, bc1, bc2);
            updated += 1;
        }
        Ok(updated)
    }

    pub fn reset(&mut self) {
        self.slots.clear();
    }
}

#[allow(clippy::too_many_arguments)]
fn update_in_place(
    value: &mut Tensor2,
    grad: &Tensor2,
    slot: &mut Slot,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
) {
    let data = value.data_mut();
    for (i, &g) in grad.data().iter().enumerate() {
        slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * g;
        slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * g * g;
        let m_hat = slot.m[i] / bc1;
        let v_hat = slot.v[i] / bc2;
        data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}
