//! Channel attention (CAM) and position attention (PAM).
//!
//! CAM builds a `C×C` affinity `X = softmax_rows(F·Fᵀ)` from the flattened map
//! `F` and outputs `E = γ·(X·F) + A`. PAM projects the input into query, key and
//! value maps `B, C, D` (conv → batch-norm → relu each), builds an `N×N` pixel
//! affinity `S = softmax_rows(Bᵀ·C)` normalized over key pixels, and outputs
//! `E = γ·(D·Sᵀ) + A`. Both mixing coefficients start at zero.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Result};
use crate::layers::{self, BatchStats, ConvBnVars, Mode, RunningStats};
use crate::seeds;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AffinityKind {
    Channel,
    Pixel,
}

/// Row-stochastic attention matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    pub entries: Tensor,
    pub kind: AffinityKind,
}

impl AffinityMatrix {
    fn checked(entries: Tensor, kind: AffinityKind) -> Self {
        let a = AffinityMatrix { entries, kind };
        debug_assert!(a.max_row_sum_error() <= 1e-8, "affinity rows do not sum to one");
        a
    }

    pub fn size(&self) -> usize {
        self.entries.shape()[0]
    }

    /// Largest `|Σ_j x_ij − 1|` over rows.
    pub fn max_row_sum_error(&self) -> f64 {
        let n = self.entries.shape()[1];
        self.entries.data().chunks(n).map(|r| (r.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
    }
}

fn debug_check_rows(tape: &Tape, affinity: Var) {
    if cfg!(debug_assertions) {
        let t = tape.value(affinity);
        let n = t.shape()[1];
        for row in t.data().chunks(n) {
            let s: f64 = row.iter().sum();
            debug_assert!((s - 1.0).abs() <= 1e-8, "affinity row sums to {s}");
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CamParams {
    pub gamma: f64,
}

impl Default for CamParams {
    fn default() -> Self {
        CamParams { gamma: 0.0 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    pub out: Var,
    pub affinity: Var,
}

/// Channel affinity of one `[C, H, W]` map node.
pub fn channel_affinity_on_tape(tape: &mut Tape, a: Var) -> Result<Var> {
    let s = tape.value(a).shape3()?;
    let f = tape.reshape(a, &[s.c, s.spatial()])?;
    let ft = tape.transpose(f)?;
    let logits = tape.matmul(f, ft)?;
    let x = tape.softmax_rows(logits)?;
    debug_check_rows(tape, x);
    Ok(x)
}

/// CAM on one `[C, H, W]` map node.
pub fn cam_on_tape(tape: &mut Tape, a: Var, gamma: Var) -> Result<AttentionOutput> {
    let s = tape.value(a).shape3()?;
    let x = channel_affinity_on_tape(tape, a)?;
    let f = tape.reshape(a, &[s.c, s.spatial()])?;
    let mixed = tape.matmul(x, f)?;
    let scaled = tape.mul_scalar(mixed, gamma)?;
    let scaled = tape.reshape(scaled, &[s.c, s.h, s.w])?;
    let out = tape.add(scaled, a)?;
    Ok(AttentionOutput { out, affinity: x })
}

/// CAM applied per sample of a `[B, C, H, W]` node.
pub fn cam_batch_on_tape(tape: &mut Tape, a: Var, gamma: Var) -> Result<(Var, Vec<Var>)> {
    let b = batch_of(tape, a, "cam")?;
    let mut outs = Vec::with_capacity(b);
    let mut affinities = Vec::with_capacity(b);
    for i in 0..b {
        let sample = tape.index(a, i)?;
        let o = cam_on_tape(tape, sample, gamma)?;
        outs.push(o.out);
        affinities.push(o.affinity);
    }
    Ok((tape.stack(&outs)?, affinities))
}

pub fn channel_affinity(a: &Tensor) -> Result<AffinityMatrix> {
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let x = channel_affinity_on_tape(&mut tape, av)?;
    Ok(AffinityMatrix::checked(tape.value(x).clone(), AffinityKind::Channel))
}

pub fn cam_forward(a: &Tensor, params: &CamParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let g = tape.constant(Tensor::scalar(params.gamma));
    let o = cam_on_tape(&mut tape, av, g)?;
    Ok(tape.value(o.out).clone())
}

/// Pixel affinity `softmax_rows(flatten(b)ᵀ · flatten(c))` of two `[C, H, W]` nodes.
pub fn pixel_affinity_on_tape(tape: &mut Tape, b: Var, c: Var) -> Result<Var> {
    let sb = tape.value(b).shape3()?;
    let sc = tape.value(c).shape3()?;
    if sb != sc {
        return dim_err("pixel_affinity", format!("{sb:?} vs {sc:?}"));
    }
    let bf = tape.reshape(b, &[sb.c, sb.spatial()])?;
    let bt = tape.transpose(bf)?;
    let cf = tape.reshape(c, &[sc.c, sc.spatial()])?;
    let logits = tape.matmul(bt, cf)?;
    let s = tape.softmax_rows(logits)?;
    debug_check_rows(tape, s);
    Ok(s)
}

/// PAM aggregation for one sample: `γ·(D·Sᵀ) + a` given head outputs.
pub fn pam_aggregate_on_tape(tape: &mut Tape, a: Var, query: Var, key: Var, value: Var, gamma: Var) -> Result<AttentionOutput> {
    let sa = tape.value(a).shape3()?;
    let sv = tape.value(value).shape3()?;
    if (sa.h, sa.w) != (sv.h, sv.w) || sa.c != sv.c {
        return dim_err("pam", format!("input {sa:?}, value {sv:?}"));
    }
    let s = pixel_affinity_on_tape(tape, query, key)?;
    let df = tape.reshape(value, &[sv.c, sv.spatial()])?;
    let st = tape.transpose(s)?;
    let mixed = tape.matmul(df, st)?;
    let scaled = tape.mul_scalar(mixed, gamma)?;
    let scaled = tape.reshape(scaled, &[sa.c, sa.h, sa.w])?;
    let out = tape.add(scaled, a)?;
    Ok(AttentionOutput { out, affinity: s })
}

/// Parameters of one PAM projection head (1×1 conv → batch-norm → relu).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub weight: Tensor,
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
    pub running: RunningStats,
}

impl HeadParams {
    /// He-initialized `channels → channels` head.
    pub fn init(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        HeadParams {
            weight: seeds::normal_tensor(rng, &[channels, channels, 1, 1], (2.0 / channels as f64).sqrt()),
            bn_gamma: Tensor::filled(&[channels], 1.0),
            bn_beta: Tensor::zeros(&[channels]),
            running: RunningStats::new(channels),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PamHeads {
    /// `B = C = D = A`.
    Identity,
    /// Query, key and value heads.
    Projection(Box<[HeadParams; 3]>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PamParams {
    pub gamma: f64,
    pub heads: PamHeads,
}

impl PamParams {
    pub fn init(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let heads = [HeadParams::init(channels, rng), HeadParams::init(channels, rng), HeadParams::init(channels, rng)];
        PamParams { gamma: 0.0, heads: PamHeads::Projection(Box::new(heads)) }
    }
}

/// Tape handles for PAM heads.
#[derive(Debug, Clone)]
pub enum PamHeadVars<'a> {
    Identity,
    Projection { heads: [ConvBnVars; 3], running: [&'a RunningStats; 3] },
}

#[derive(Debug, Clone)]
pub struct PamOutput {
    pub out: Var,
    pub affinities: Vec<Var>,
    /// Query, key and value maps, `[B, C, H, W]` each.
    pub heads: [Var; 3],
    /// Batch statistics of the three head batch-norms in training mode.
    pub head_stats: Option<[BatchStats; 3]>,
}

/// PAM on a `[B, C, H, W]` node.
pub fn pam_on_tape(tape: &mut Tape, a: Var, gamma: Var, heads: &PamHeadVars<'_>, mode: Mode) -> Result<PamOutput> {
    let batch = batch_of(tape, a, "pam")?;
    let (maps, head_stats) = match heads {
        PamHeadVars::Identity => ([a, a, a], None),
        PamHeadVars::Projection { heads, running } => {
            let mut maps = [a; 3];
            let mut stats = Vec::with_capacity(3);
            for k in 0..3 {
                let (m, s) = layers::conv_bn_relu(tape, a, &heads[k], 0, running[k], mode)?;
                maps[k] = m;
                stats.push(s);
            }
            let stats = match mode {
                Mode::Train => {
                    let mut it = stats.into_iter().map(|s| s.expect("training mode yields statistics"));
                    Some([it.next().unwrap(), it.next().unwrap(), it.next().unwrap()])
                }
                Mode::Eval => None,
            };
            (maps, stats)
        }
    };
    let mut outs = Vec::with_capacity(batch);
    let mut affinities = Vec::with_capacity(batch);
    for i in 0..batch {
        let ai = tape.index(a, i)?;
        let q = tape.index(maps[0], i)?;
        let k = tape.index(maps[1], i)?;
        let v = tape.index(maps[2], i)?;
        let o = pam_aggregate_on_tape(tape, ai, q, k, v, gamma)?;
        outs.push(o.out);
        affinities.push(o.affinity);
    }
    Ok(PamOutput { out: tape.stack(&outs)?, affinities, heads: maps, head_stats })
}

pub fn pixel_affinity(b: &Tensor, c: &Tensor) -> Result<AffinityMatrix> {
    let mut tape = Tape::new();
    let bv = tape.constant(b.clone());
    let cv = tape.constant(c.clone());
    let s = pixel_affinity_on_tape(&mut tape, bv, cv)?;
    Ok(AffinityMatrix::checked(tape.value(s).clone(), AffinityKind::Pixel))
}

/// PAM forward on a `[C, H, W]` map or a `[B, C, H, W]` batch; output has the input's shape.
pub fn pam_forward(a: &Tensor, params: &PamParams, mode: Mode) -> Result<Tensor> {
    let single = a.rank() == 3;
    let batch = if single {
        let mut s = vec![1];
        s.extend_from_slice(a.shape());
        a.reshape(&s)?
    } else {
        a.clone()
    };
    let mut tape = Tape::new();
    let av = tape.constant(batch);
    let g = tape.constant(Tensor::scalar(params.gamma));
    let out = match &params.heads {
        PamHeads::Identity => pam_on_tape(&mut tape, av, g, &PamHeadVars::Identity, mode)?,
        PamHeads::Projection(h) => {
            let mut vars = Vec::with_capacity(3);
            for head in h.iter() {
                vars.push(ConvBnVars {
                    weight: tape.constant(head.weight.clone()),
                    bn_gamma: tape.constant(head.bn_gamma.clone()),
                    bn_beta: tape.constant(head.bn_beta.clone()),
                });
            }
            let hv = PamHeadVars::Projection {
                heads: [vars[0], vars[1], vars[2]],
                running: [&h[0].running, &h[1].running, &h[2].running],
            };
            pam_on_tape(&mut tape, av, g, &hv, mode)?
        }
    };
    let t = tape.value(out.out).clone();
    if single {
        t.reshape(a.shape())
    } else {
        Ok(t)
    }
}

fn batch_of(tape: &Tape, a: Var, op: &'static str) -> Result<usize> {
    match tape.shape(a) {
        &[b, _, _, _] => Ok(b),
        s => dim_err(op, format!("expected [B, C, H, W], got {s:?}")),
    }
}
