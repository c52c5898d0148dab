use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DiffError, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
    /// Number of updates this parameter has received.
    steps: u64,
}

/// Adam optimizer state. Parameters absent from a step's gradient map are
/// left untouched, moments included, so sub-networks that a batch does not
/// reach stay bitwise unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Number of optimizer steps taken.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.moments.get(name).map(|m| m.first.as_slice())
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.moments.get(name).map(|m| m.second.as_slice())
    }

    /// One bias-corrected Adam update of every parameter named in `grads`.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<(), DiffError> {
        for (name, grad) in grads {
            let param = params
                .get(name)
                .ok_or_else(|| DiffError::InvalidArgument(format!("unknown parameter {name}")))?;
            if param.shape() != grad.shape() {
                return Err(DiffError::ShapeMismatch {
                    op: "adam_step",
                    detail: format!("{name}: param {:?}, grad {:?}", param.shape(), grad.shape()),
                });
            }
            if let Some(m) = self.moments.get(name) {
                if m.first.len() != grad.len() {
                    return Err(DiffError::ShapeMismatch {
                        op: "adam_step",
                        detail: format!("{name}: moments hold {} values", m.first.len()),
                    });
                }
            }
        }

        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        for (name, grad) in grads {
            let param = params.get_mut(name).expect("checked above");
            let m = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                first: vec![0.0; grad.len()],
                second: vec![0.0; grad.len()],
                steps: 0,
            });
            m.steps += 1;
            let c1 = 1.0 - beta1.powi(m.steps as i32);
            let c2 = 1.0 - beta2.powi(m.steps as i32);
            for (((p, &g), mo), vo) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.first.iter_mut())
                .zip(m.second.iter_mut())
            {
                *mo = beta1 * *mo + (1.0 - beta1) * g;
                *vo = beta2 * *vo + (1.0 - beta2) * g * g;
                let m_hat = *mo / c1;
                let v_hat = *vo / c2;
                *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        self.step += 1;
        Ok(())
    }
}
