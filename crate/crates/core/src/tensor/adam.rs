//! Adam with bias correction.

use super::scalar::Scalar;
use super::Tensor;
use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moment buffers; `step` increases by one per
/// [`AdamState::step`] call.
pub struct AdamState<S: Scalar> {
    config: AdamConfig,
    step: u64,
    moments: Vec<Moment<S>>,
}

struct Moment<S> {
    m: Vec<S>,
    v: Vec<S>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(config: AdamConfig, params: &[(String, Tensor<S>)]) -> Self {
        let moments = params
            .iter()
            .map(|(_, p)| Moment {
                m: vec![S::ZERO; p.len()],
                v: vec![S::ZERO; p.len()],
            })
            .collect();
        AdamState {
            config,
            step: 0,
            moments,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over all parameters. Every parameter must carry a gradient;
    /// parameters that took no part in the step's graph should be given an
    /// explicit zero gradient by the caller (`grad_or_zeros`).
    pub fn step(&mut self, params: &[(String, Tensor<S>)], lr: f64) -> Result<()> {
        if params.len() != self.moments.len() {
            return Err(CoreError::Contract(format!(
                "adam: {} parameters but {} moment slots",
                params.len(),
                self.moments.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let beta1 = S::from_f64(self.config.beta1);
        let beta2 = S::from_f64(self.config.beta2);
        let eps = S::from_f64(self.config.eps);
        let one = S::ONE;
        let bias1 = S::from_f64(1.0 - self.config.beta1.powi(t));
        let bias2 = S::from_f64(1.0 - self.config.beta2.powi(t));
        let lr_s = S::from_f64(lr);

        for ((name, p), moment) in params.iter().zip(self.moments.iter_mut()) {
            let grad = p.grad().ok_or_else(|| CoreError::MissingGrad {
                name: name.clone(),
            })?;
            p.with_data_mut(|data| {
                for i in 0..data.len() {
                    let g = grad[i];
                    moment.m[i] = beta1 * moment.m[i] + (one - beta1) * g;
                    moment.v[i] = beta2 * moment.v[i] + (one - beta2) * g * g;
                    let m_hat = moment.m[i] / bias1;
                    let v_hat = moment.v[i] / bias2;
                    data[i] -= lr_s * m_hat / (v_hat.sqrt() + eps);
                }
            });
        }
        Ok(())
    }
}
