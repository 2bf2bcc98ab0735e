//! Adam with a stepwise learning-rate plan.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// One optimizer step as recorded in the state log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrRecord {
    pub stage: u8,
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    /// Per-parameter count of applied updates.
    t: Vec<u64>,
    pub log: Vec<LrRecord>,
}

impl Adam {
    pub fn new(shapes: &[&[usize]], lr: f64) -> Self {
        Adam {
            lr,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: vec![0; shapes.len()],
            log: Vec::new(),
        }
    }

    /// Multiplies the learning rate by `factor`.
    pub fn decay(&mut self, factor: f64) {
        self.lr *= factor;
    }

    /// Updates every parameter that has a gradient; the others keep their value and moments.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<Tensor>], stage: u8, epoch: usize) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract("optimizer built for a different parameter list".into()));
        }
        self.step += 1;
        self.log.push(LrRecord { stage, epoch, step: self.step, lr: self.lr });
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
                p[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + EPSILON);
            }
        }
        Ok(())
    }
}
