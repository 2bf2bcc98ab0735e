//! Building blocks shared by the attention heads and the network.

use crate::autodiff::{NormStats, Tape, Var};
use crate::error::Result;
use crate::kernels;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }

    /// Exponential update with the batch mean and the unbiased batch variance.
    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        let m = batch.count as f64;
        let unbias = if batch.count > 1 { m / (m - 1.0) } else { 1.0 };
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - momentum) * self.mean[c] + momentum * batch.mean[c];
            self.var[c] = (1.0 - momentum) * self.var[c] + momentum * batch.var[c] * unbias;
        }
    }
}

/// Statistics observed on one training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance.
    pub var: Vec<f64>,
    /// Values per channel the statistics were computed over.
    pub count: usize,
}

/// Batch norm in `mode`; in training mode also returns the batch statistics used.
pub fn batch_norm(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    running: &RunningStats,
    mode: Mode,
) -> Result<(Var, Option<BatchStats>)> {
    match mode {
        Mode::Train => {
            let s = tape.shape(x).to_vec();
            let inner: usize = s[2..].iter().product();
            let stats = kernels::channel_stats(tape.value(x).data(), s[0], s[1], inner);
            let out = tape.batch_norm(x, gamma, beta, &NormStats::Batch, BN_EPS)?;
            Ok((out, Some(BatchStats { mean: stats.mean, var: stats.var, count: s[0] * inner })))
        }
        Mode::Eval => {
            let stats = NormStats::Fixed { mean: running.mean.clone(), var: running.var.clone() };
            Ok((tape.batch_norm(x, gamma, beta, &stats, BN_EPS)?, None))
        }
    }
}

/// Tape handles of a conv → batch-norm → relu unit.
#[derive(Debug, Clone, Copy)]
pub struct ConvBnVars {
    pub weight: Var,
    pub bn_gamma: Var,
    pub bn_beta: Var,
}

pub fn conv_bn_relu(
    tape: &mut Tape,
    x: Var,
    vars: &ConvBnVars,
    pad: usize,
    running: &RunningStats,
    mode: Mode,
) -> Result<(Var, Option<BatchStats>)> {
    let y = tape.conv2d(x, vars.weight, pad)?;
    let (y, stats) = batch_norm(tape, y, vars.bn_gamma, vars.bn_beta, running, mode)?;
    Ok((tape.relu(y), stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn running_update_uses_unbiased_variance() {
        let mut r = RunningStats::new(1);
        r.update(&BatchStats { mean: vec![2.0], var: vec![1.0], count: 4 }, 0.1);
        assert!((r.mean[0] - 0.2).abs() < 1e-15);
        assert!((r.var[0] - (0.9 + 0.1 * 4.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn eval_mode_uses_running_statistics() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 1], vec![3.0, 5.0]).unwrap());
        let g = tape.constant(Tensor::filled(&[1], 2.0));
        let b = tape.constant(Tensor::filled(&[1], 0.5));
        let running = RunningStats { mean: vec![1.0], var: vec![4.0 - BN_EPS] };
        let (y, stats) = batch_norm(&mut tape, x, g, b, &running, Mode::Eval).unwrap();
        assert!(stats.is_none());
        let y = tape.value(y).data();
        assert!((y[0] - 2.5).abs() < 1e-12 && (y[1] - 4.5).abs() < 1e-12);
        let (y, stats) = batch_norm(&mut tape, x, g, b, &running, Mode::Train).unwrap();
        assert_eq!(stats.unwrap().mean, vec![4.0]);
        let y = tape.value(y).data();
        assert!((y[0] + y[1] - 1.0).abs() < 1e-12);
    }
}
