use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Gradients, Parameterized};
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

pub trait Optimizer {
    /// Applies one update to every trainable parameter that has a gradient.
    fn step(&mut self, model: &mut dyn Parameterized, grads: &Gradients) -> Result<()>;

    fn learning_rate(&self) -> f64;
}

fn check(name: &str, p: &DenseTensor, g: &DenseTensor) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(Error::shape(format!(
            "gradient for {name} has shape {:?}, parameter has {:?}",
            g.shape(),
            p.shape()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Self { lr }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, model: &mut dyn Parameterized, grads: &Gradients) -> Result<()> {
        let mut result = Ok(());
        let lr = self.lr;
        model.visit_params_mut(&mut |name, p, trainable| {
            if !trainable || result.is_err() {
                return;
            }
            if let Some(g) = grads.get(name) {
                if let Err(e) = check(name, p, g) {
                    result = Err(e);
                    return;
                }
                for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                    *w -= lr * d;
                }
            }
        });
        result
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }
}

/// Per-parameter Adam moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamSlot {
    pub step: u64,
    pub m: DenseTensor,
    pub v: DenseTensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub slots: BTreeMap<String, AdamSlot>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            slots: BTreeMap::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, model: &mut dyn Parameterized, grads: &Gradients) -> Result<()> {
        let mut result = Ok(());
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let slots = &mut self.slots;
        model.visit_params_mut(&mut |name, p, trainable| {
            if !trainable || result.is_err() {
                return;
            }
            let Some(g) = grads.get(name) else { return };
            if let Err(e) = check(name, p, g) {
                result = Err(e);
                return;
            }
            let slot = slots.entry(name.to_string()).or_insert_with(|| AdamSlot {
                step: 0,
                m: DenseTensor::zeros(p.shape()),
                v: DenseTensor::zeros(p.shape()),
            });
            slot.step += 1;
            let bc1 = 1.0 - b1.powi(slot.step as i32);
            let bc2 = 1.0 - b2.powi(slot.step as i32);
            let (m, v) = (slot.m.data_mut(), slot.v.data_mut());
            for (i, (w, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * d;
                v[i] = b2 * v[i] + (1.0 - b2) * d * d;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
        result
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }
}
