//! Identity cross-entropy, batch-hard triplet loss and the composite objective.

use std::collections::BTreeMap;

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Floor inside the square root of triplet distances.
pub const DISTANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub beta_tr: f64,
    pub beta_of: f64,
    pub beta_ow: f64,
    pub margin_alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { beta_tr: 1e-1, beta_of: 1e-6, beta_ow: 1e-3, margin_alpha: 1.2 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("beta_tr", self.beta_tr),
            ("beta_of", self.beta_of),
            ("beta_ow", self.beta_ow),
            ("margin_alpha", self.margin_alpha),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidValue { key: key.into(), reason: format!("must be finite and >= 0, got {v}") });
            }
        }
        Ok(())
    }
}

/// P identities × K instances of embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub embeddings: Tensor,
    pub labels: Vec<usize>,
    pub p: usize,
    pub k: usize,
}

impl Batch {
    pub fn new(embeddings: Tensor, labels: Vec<usize>) -> Result<Self> {
        let s = embeddings.shape2()?;
        let (p, k) = composition(&labels)?;
        if s.rows != labels.len() {
            return dim_err("batch", format!("{} embeddings for {} labels", s.rows, labels.len()));
        }
        Ok(Batch { embeddings, labels, p, k })
    }
}

/// Returns `(P, K)` if every label occurs the same number of times.
pub fn composition(labels: &[usize]) -> Result<(usize, usize)> {
    let mut counts = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    let k = counts.values().next().copied().unwrap_or(0);
    if k == 0 || counts.values().any(|&c| c != k) {
        return Err(Error::Contract(format!("batch is not P x K: per-identity counts {counts:?}")));
    }
    Ok((counts.len(), k))
}

pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let v = tape.cross_entropy(l, labels)?;
    tape.value(v).item()
}

/// Indices `(hardest positive, hardest negative)` per anchor, first index on ties.
pub fn hardest_pairs(dist: &Tensor, labels: &[usize]) -> Vec<(usize, usize)> {
    let n = labels.len();
    (0..n)
        .map(|a| {
            let row = dist.row(a);
            let mut pos = None::<usize>;
            let mut neg = None::<usize>;
            for j in 0..n {
                if j == a {
                    continue;
                }
                if labels[j] == labels[a] {
                    if pos.is_none_or(|p| row[j] > row[p]) {
                        pos = Some(j);
                    }
                } else if neg.is_none_or(|q| row[j] < row[q]) {
                    neg = Some(j);
                }
            }
            (pos.expect("validated K >= 2"), neg.expect("validated P >= 2"))
        })
        .collect()
}

/// Batch-hard triplet loss of `embeddings: [B, D]` node, mean over anchors.
pub fn batch_hard_triplet_on_tape(tape: &mut Tape, embeddings: Var, labels: &[usize], alpha: f64) -> Result<Var> {
    let (p, k) = composition(labels)?;
    if p < 2 || k < 2 {
        return Err(Error::Contract(format!("batch-hard mining needs P >= 2 and K >= 2, got P={p} K={k}")));
    }
    let n = tape.shape(embeddings)[0];
    if n != labels.len() {
        return dim_err("batch_hard_triplet", format!("{n} embeddings for {} labels", labels.len()));
    }
    let dist = tape.pairwise_distance(embeddings, DISTANCE_FLOOR)?;
    let pairs = hardest_pairs(tape.value(dist), labels);
    let pos_idx: Vec<usize> = pairs.iter().enumerate().map(|(a, &(p, _))| a * n + p).collect();
    let neg_idx: Vec<usize> = pairs.iter().enumerate().map(|(a, &(_, q))| a * n + q).collect();
    let dp = tape.gather(dist, &pos_idx)?;
    let dn = tape.gather(dist, &neg_idx)?;
    let diff = tape.sub(dp, dn)?;
    let margin = tape.constant(Tensor::filled(&[n], alpha));
    let shifted = tape.add(diff, margin)?;
    let hinge = tape.relu(shifted);
    Ok(tape.mean(hinge))
}

pub fn batch_hard_triplet(batch: &Batch, alpha: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let e = tape.constant(batch.embeddings.clone());
    let v = batch_hard_triplet_on_tape(&mut tape, e, &batch.labels, alpha)?;
    tape.value(v).item()
}

/// The four loss components of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub xent: f64,
    pub triplet: f64,
    pub of: f64,
    pub ow: f64,
}

pub fn total_loss(terms: &LossTerms, w: &LossWeights) -> f64 {
    terms.xent + w.beta_tr * terms.triplet + w.beta_of * terms.of + w.beta_ow * terms.ow
}

/// Weighted sum on the tape; a `None` term contributes nothing.
pub fn total_loss_on_tape(
    tape: &mut Tape,
    xent: Var,
    triplet: Option<Var>,
    of: Option<Var>,
    ow: Option<Var>,
    w: &LossWeights,
) -> Result<Var> {
    let mut parts = vec![xent];
    for (term, beta) in [(triplet, w.beta_tr), (of, w.beta_of), (ow, w.beta_ow)] {
        if let Some(t) = term {
            parts.push(tape.scale(t, beta));
        }
    }
    tape.add_n(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let w = LossWeights::default();
        assert_eq!((w.beta_tr, w.beta_of, w.beta_ow, w.margin_alpha), (0.1, 1e-6, 1e-3, 1.2));
        assert!(LossWeights { beta_of: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let l = Tensor::from_rows(&[vec![10.0, -10.0]]).unwrap();
        let v = cross_entropy(&l, &[0]).unwrap();
        assert!(v > 0.0 && v < 3e-9);
        let u = Tensor::zeros(&[2, 5]);
        assert!((cross_entropy(&u, &[1, 4]).unwrap() - 5f64.ln()).abs() < 1e-15);
        assert!(matches!(cross_entropy(&u, &[1, 5]), Err(Error::Contract(_))));
    }

    #[test]
    fn triplet_hand_cases() {
        let e = Tensor::new(vec![4, 1], vec![0.0, 0.0, 10.0, 10.0]).unwrap();
        let b = Batch::new(e, vec![0, 0, 1, 1]).unwrap();
        assert_eq!(batch_hard_triplet(&b, 1.2).unwrap(), 0.0);
        let e = Tensor::filled(&[4, 3], 0.25);
        let b = Batch::new(e, vec![3, 3, 8, 8]).unwrap();
        assert_eq!(batch_hard_triplet(&b, 1.2).unwrap(), 1.2);
    }

    #[test]
    fn triplet_rejects_degenerate_batches() {
        let e = Tensor::zeros(&[4, 2]);
        assert!(matches!(batch_hard_triplet(&Batch::new(e.clone(), vec![0, 1, 2, 3]).unwrap(), 1.0), Err(Error::Contract(_))));
        assert!(matches!(batch_hard_triplet(&Batch::new(e.clone(), vec![0; 4]).unwrap(), 1.0), Err(Error::Contract(_))));
        assert!(Batch::new(e, vec![0, 0, 0, 1]).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        let t = LossTerms { xent: 1.0, triplet: 2.0, of: 3.0, ow: 4.0 };
        let got = total_loss(&t, &LossWeights::default());
        assert!((got - (1.0 + 0.2 + 3e-6 + 4e-3)).abs() < 1e-15);
        let zero = LossWeights { beta_tr: 0.0, beta_of: 0.0, beta_ow: 0.0, margin_alpha: 1.2 };
        assert_eq!(total_loss(&t, &zero), 1.0);
    }
}
