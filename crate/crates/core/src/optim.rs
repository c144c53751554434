//! First-order optimizers over a flat list of parameter tensors.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd {
        momentum: f64,
        velocity: Vec<Vec<f64>>,
    },
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        step: i32,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, sizes: &[usize]) -> Self {
        let zeros = || sizes.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        match kind {
            OptimizerKind::SgdMomentum => Optimizer::Sgd {
                momentum: 0.9,
                velocity: zeros(),
            },
            OptimizerKind::Adam => Optimizer::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                step: 0,
                m: zeros(),
                v: zeros(),
            },
        }
    }

    /// Updates `params[i]` in place with `grads[i]`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) {
        match self {
            Optimizer::Sgd { momentum, velocity } => {
                for ((p, g), vel) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
                    for ((w, &gr), u) in p.data_mut().iter_mut().zip(g.data()).zip(vel.iter_mut()) {
                        *u = *momentum * *u + gr;
                        *w -= lr * *u;
                    }
                }
            }
            Optimizer::Adam {
                beta1,
                beta2,
                eps,
                step,
                m,
                v,
            } => {
                *step += 1;
                let c1 = 1.0 - beta1.powi(*step);
                let c2 = 1.0 - beta2.powi(*step);
                for (((p, g), mi), vi) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                    for (((w, &gr), a), b) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(mi.iter_mut())
                        .zip(vi.iter_mut())
                    {
                        *a = *beta1 * *a + (1.0 - *beta1) * gr;
                        *b = *beta2 * *b + (1.0 - *beta2) * gr * gr;
                        *w -= lr * (*a / c1) / ((*b / c2).sqrt() + *eps);
                    }
                }
            }
        }
    }
}
