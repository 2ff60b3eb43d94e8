//! SGD (with momentum) and Adam, both with decoupled weight decay.
//!
//! Decay is applied as `p -= lr * wd * p` before the gradient step, so it
//! never enters the momentum/moment statistics.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Result<OptimizerKind> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::InvalidConfig {
                field: "optimizer".into(),
                message: format!("unknown optimizer `{other}` (expected sgd|adam)"),
            }),
        }
    }
}

enum State {
    Sgd {
        momentum: f64,
        velocity: Vec<Vec<f64>>,
    },
    Adam {
        betas: (f64, f64),
        eps: f64,
        step: u64,
        first: Vec<Vec<f64>>,
        second: Vec<Vec<f64>>,
    },
}

/// Stateful optimizer over a parameter registry.
pub struct Optimizer {
    weight_decay: f64,
    state: State,
}

impl Optimizer {
    pub fn sgd(momentum: f64, weight_decay: f64) -> Optimizer {
        Optimizer {
            weight_decay,
            state: State::Sgd {
                momentum,
                velocity: Vec::new(),
            },
        }
    }

    pub fn adam(betas: (f64, f64), eps: f64, weight_decay: f64) -> Optimizer {
        Optimizer {
            weight_decay,
            state: State::Adam {
                betas,
                eps,
                step: 0,
                first: Vec::new(),
                second: Vec::new(),
            },
        }
    }

    /// One update over every registered parameter. `grads` must align with
    /// the registry order and shapes.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::ShapeMismatch {
                context: "optimizer step",
                dimension: "gradient count",
                expected: params.len(),
                found: grads.len(),
            });
        }
        let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
        for (id, g) in ids.iter().zip(grads) {
            if params.value(*id).shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    context: "optimizer step",
                    dimension: "gradient elements",
                    expected: params.value(*id).len(),
                    found: g.len(),
                });
            }
        }

        let wd = self.weight_decay;
        match &mut self.state {
            State::Sgd { momentum, velocity } => {
                if velocity.is_empty() {
                    *velocity = grads.iter().map(|g| vec![0.0; g.len()]).collect();
                }
                for ((id, g), v) in ids.iter().zip(grads).zip(velocity.iter_mut()) {
                    let p = params.value_mut(*id).data_mut();
                    for i in 0..p.len() {
                        p[i] -= lr * wd * p[i];
                        v[i] = *momentum * v[i] + g.data()[i];
                        p[i] -= lr * v[i];
                    }
                }
            }
            State::Adam {
                betas,
                eps,
                step,
                first,
                second,
            } => {
                if first.is_empty() {
                    *first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
                    *second = grads.iter().map(|g| vec![0.0; g.len()]).collect();
                }
                *step += 1;
                let (b1, b2) = *betas;
                let bc1 = 1.0 - b1.powi(*step as i32);
                let bc2 = 1.0 - b2.powi(*step as i32);
                for (((id, g), m), v) in ids
                    .iter()
                    .zip(grads)
                    .zip(first.iter_mut())
                    .zip(second.iter_mut())
                {
                    let p = params.value_mut(*id).data_mut();
                    for i in 0..p.len() {
                        p[i] -= lr * wd * p[i];
                        let gi = g.data()[i];
                        m[i] = b1 * m[i] + (1.0 - b1) * gi;
                        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        p[i] -= lr * m_hat / (v_hat.sqrt() + *eps);
                    }
                }
            }
        }
        Ok(())
    }
}
