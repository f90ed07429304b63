//! First-order parameter updates: plain gradient descent and Adam.

use std::collections::HashMap;

use crate::autodiff::Tensor;
use crate::error::{DetaError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

/// Applies descent steps to a set of parameters and clears their gradients.
///
/// Adam moment buffers are keyed by tensor identity, so one optimizer can be
/// reused across iterations as long as the same parameter tensors are passed.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps: u64,
    slots: HashMap<u64, AdamSlot>,
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Optimizer {
            kind: OptimizerKind::Sgd,
            lr,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
            steps: 0,
            slots: HashMap::new(),
        }
    }

    pub fn adam(lr: f64) -> Self {
        Optimizer {
            kind: OptimizerKind::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            slots: HashMap::new(),
        }
    }

    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::sgd(lr),
            OptimizerKind::Adam => Self::adam(lr),
        }
    }

    /// One descent step over `params`. Every parameter must carry a gradient;
    /// gradients are consumed (cleared) by the update.
    pub fn step(&mut self, params: &[&Tensor]) -> Result<()> {
        if let Some(index) = params.iter().position(|p| p.grad().is_none()) {
            return Err(DetaError::MissingGrad { index });
        }
        self.steps += 1;
        for p in params {
            let grad = p.take_grad().expect("checked above");
            match self.kind {
                OptimizerKind::Sgd => {
                    let lr = self.lr;
                    p.update_data(|i, v| v - lr * grad[i]);
                }
                OptimizerKind::Adam => {
                    let slot = self.slots.entry(p.id()).or_insert_with(|| AdamSlot {
                        m: vec![0.0; grad.len()],
                        v: vec![0.0; grad.len()],
                        steps: 0,
                    });
                    slot.steps += 1;
                    let (b1, b2) = (self.beta1, self.beta2);
                    let bc1 = 1.0 - b1.powi(slot.steps as i32);
                    let bc2 = 1.0 - b2.powi(slot.steps as i32);
                    let (lr, eps) = (self.lr, self.eps);
                    let (m, v) = (&mut slot.m, &mut slot.v);
                    p.update_data(|i, x| {
                        m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                        v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        x - lr * mhat / (vhat.sqrt() + eps)
                    });
                }
            }
        }
        Ok(())
    }
}
