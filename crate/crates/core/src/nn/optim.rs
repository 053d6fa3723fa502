use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// First-order optimizer over a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Optimizer {
    learning_rate: f64,
    kind: OptimizerKind,
    beta1: f64,
    beta2: f64,
    eps: f64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(Optimizer {
            learning_rate,
            kind,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            moments: BTreeMap::new(),
            steps: 0,
        })
    }

    pub fn sgd(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Adam, learning_rate)
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    /// Applies one update and clears gradients. Parameters that received
    /// no gradient this step are left untouched.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if !store.has_gradients() {
            return Err(Error::MissingGradient(
                "optimizer step called before any backward pass".into(),
            ));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let lr = self.learning_rate;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (name, value, grad) in store.iter_mut() {
            let Some(grad) = grad else { continue };
            match self.kind {
                OptimizerKind::Sgd => {
                    for (v, g) in value.data_mut().iter_mut().zip(grad.data()) {
                        *v -= lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, s) = self
                        .moments
                        .entry(name.to_string())
                        .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
                    let c1 = 1.0 - b1.powi(t);
                    let c2 = 1.0 - b2.powi(t);
                    for (((v, g), mi), si) in value
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .zip(m.iter_mut())
                        .zip(s.iter_mut())
                    {
                        *mi = b1 * *mi + (1.0 - b1) * g;
                        *si = b2 * *si + (1.0 - b2) * g * g;
                        *v -= lr * (*mi / c1) / ((*si / c2).sqrt() + eps);
                    }
                }
            }
        }
        store.zero_grad();
        store.bump_step();
        Ok(())
    }
}
