use serde::{Deserialize, Serialize};

use crate::numerics::ParamStore;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerSettings {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Step count and first/second moment estimates, one buffer per parameter
/// tensor (empty for frozen tensors and for SGD).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub settings: OptimizerSettings,
    pub state: OptimizerState,
}

impl Optimizer {
    pub fn new(settings: OptimizerSettings, params: &ParamStore) -> Self {
        let sizes = |on: bool| {
            params
                .iter()
                .map(|(_, t)| if on && t.is_trainable() { vec![0.0; t.len()] } else { Vec::new() })
                .collect::<Vec<_>>()
        };
        let adam = settings.kind == OptimizerKind::Adam;
        Self {
            settings,
            state: OptimizerState {
                step: 0,
                m: sizes(adam),
                v: sizes(adam),
            },
        }
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, params: &mut ParamStore) {
        let s = self.settings;
        self.state.step += 1;
        let t = self.state.step as i32;
        let (c1, c2) = (1.0 - s.beta1.powi(t), 1.0 - s.beta2.powi(t));
        for (i, (_, tensor)) in params.iter_mut().enumerate() {
            let (value, grad) = tensor.value_and_grad_mut();
            let Some(grad) = grad else { continue };
            match s.kind {
                OptimizerKind::Sgd => {
                    for (p, g) in value.iter_mut().zip(grad.iter()) {
                        *p -= s.learning_rate * g;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.state.m[i], &mut self.state.v[i]);
                    for j in 0..value.len() {
                        let g = grad[j];
                        m[j] = s.beta1 * m[j] + (1.0 - s.beta1) * g;
                        v[j] = s.beta2 * v[j] + (1.0 - s.beta2) * g * g;
                        let mh = m[j] / c1;
                        let vh = v[j] / c2;
                        value[j] -= s.learning_rate * mh / (vh.sqrt() + s.eps);
                    }
                }
            }
            grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }
}
