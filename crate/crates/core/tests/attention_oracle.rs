//! CAM and PAM against loop oracles, symmetry properties and finite differences.

mod common;

use abd_core::attention::{
    cam_batch_on_tape, cam_forward, cam_on_tape, channel_affinity, pam_forward, pam_on_tape, pixel_affinity, CamParams,
    HeadParams, PamHeadVars, PamHeads, PamParams,
};
use abd_core::layers::{ConvBnVars, Mode, RunningStats};
use abd_core::{Tape, Tensor, Var};
use common::*;
use proptest::prelude::*;

const ROW_TOL: f64 = 1e-8;

fn at3(t: &Tensor, c: usize, p: usize) -> f64 {
    let s = t.shape();
    t.data()[c * s[1] * s[2] + p]
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn assert_rows_stochastic(tape: &Tape, affinities: &[Var]) {
    for &a in affinities {
        let t = tape.value(a);
        let n = t.shape()[1];
        for row in t.data().chunks(n) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= ROW_TOL);
        }
    }
}

/// `E_j = γ·Σ_i X_ji·A_i + A_j` with `X_ji = exp(A_j·A_i) / Σ_k exp(A_j·A_k)`.
fn cam_oracle(a: &Tensor, gamma: f64) -> Tensor {
    let (c, n) = (a.shape()[0], a.shape()[1] * a.shape()[2]);
    let dot = |i: usize, j: usize| (0..n).map(|p| at3(a, i, p) * at3(a, j, p)).sum::<f64>();
    let mut out = a.data().to_vec();
    for j in 0..c {
        let logits: Vec<f64> = (0..c).map(|i| dot(j, i)).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for p in 0..n {
            let mix: f64 = (0..c).map(|i| (logits[i] - m).exp() / z * at3(a, i, p)).sum();
            out[j * n + p] += gamma * mix;
        }
    }
    Tensor::new(a.shape().to_vec(), out).unwrap()
}

/// `E_j = γ·Σ_i s_ji·D_i + A_j` over pixels, `s_ji = exp(B_j·C_i) / Σ_k exp(B_j·C_k)`.
fn pam_oracle(a: &Tensor, b: &Tensor, c: &Tensor, d: &Tensor, gamma: f64) -> Tensor {
    let (ch, n) = (a.shape()[0], a.shape()[1] * a.shape()[2]);
    let qk = |j: usize, i: usize| (0..b.shape()[0]).map(|k| at3(b, k, j) * at3(c, k, i)).sum::<f64>();
    let mut out = a.data().to_vec();
    for j in 0..n {
        let logits: Vec<f64> = (0..n).map(|i| qk(j, i)).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for k in 0..ch {
            let mix: f64 = (0..n).map(|i| (logits[i] - m).exp() / z * at3(d, k, i)).sum();
            out[k * n + j] += gamma * mix;
        }
    }
    Tensor::new(a.shape().to_vec(), out).unwrap()
}

#[test]
fn cam_matches_loop_oracle() {
    let mut r = rng(1);
    for trial in 0..20 {
        let a = uniform(&mut r, &[4, 3, 2], -1.0, 1.0);
        assert!(channel_affinity(&a).unwrap().max_row_sum_error() <= ROW_TOL);
        for gamma in [1.0, -0.4] {
            let got = cam_forward(&a, &CamParams { gamma }).unwrap();
            let d = max_abs_diff(&got, &cam_oracle(&a, gamma));
            assert!(d < 1e-12, "trial {trial}: {d:e}");
        }
    }
}

#[test]
fn pam_identity_heads_match_loop_oracle() {
    let mut r = rng(2);
    for trial in 0..20 {
        let a = uniform(&mut r, &[3, 2, 3], -1.0, 1.0);
        assert!(pixel_affinity(&a, &a).unwrap().max_row_sum_error() <= ROW_TOL);
        let params = PamParams { gamma: 0.7, heads: PamHeads::Identity };
        let got = pam_forward(&a, &params, Mode::Eval).unwrap();
        let d = max_abs_diff(&got, &pam_oracle(&a, &a, &a, &a, 0.7));
        assert!(d < 1e-12, "trial {trial}: {d:e}");
    }
}

/// Applies a 1×1 conv, eval-mode batch-norm and relu by hand.
fn head_oracle(a: &Tensor, h: &HeadParams) -> Tensor {
    let (c, n) = (a.shape()[0], a.shape()[1] * a.shape()[2]);
    Tensor::from_fn(a.shape(), |idx| {
        let (o, p) = (idx / n, idx % n);
        let z: f64 = (0..c).map(|i| h.weight.data()[o * c + i] * at3(a, i, p)).sum();
        let bn = (z - h.running.mean[o]) / (h.running.var[o] + 1e-5).sqrt() * h.bn_gamma.data()[o] + h.bn_beta.data()[o];
        bn.max(0.0)
    })
}

#[test]
fn pam_projection_heads_match_loop_oracle() {
    let mut r = rng(3);
    let a = uniform(&mut r, &[3, 2, 2], -1.0, 1.0);
    let mut params = PamParams::init(3, &mut r);
    params.gamma = 0.5;
    if let PamHeads::Projection(h) = &mut params.heads {
        for head in h.iter_mut() {
            head.running = RunningStats { mean: vec![0.1, -0.1, 0.0], var: vec![0.5, 1.0, 2.0] };
            head.bn_beta = Tensor::filled(&[3], 0.3);
        }
        let want = pam_oracle(&a, &head_oracle(&a, &h[0]), &head_oracle(&a, &h[1]), &head_oracle(&a, &h[2]), 0.5);
        let got = pam_forward(&a, &params, Mode::Eval).unwrap();
        assert!(max_abs_diff(&got, &want) < 1e-12);
    } else {
        panic!("init builds projection heads");
    }
}

#[test]
fn zero_gamma_is_identity() {
    let mut r = rng(4);
    for _ in 0..20 {
        let a = uniform(&mut r, &[5, 3, 2], -3.0, 3.0);
        assert!(max_abs_diff(&cam_forward(&a, &CamParams::default()).unwrap(), &a) <= 1e-12);
        let params = PamParams::init(5, &mut r);
        assert_eq!(params.gamma, 0.0);
        assert!(max_abs_diff(&pam_forward(&a, &params, Mode::Eval).unwrap(), &a) <= 1e-12);
    }
}

fn permute_channels(a: &Tensor, perm: &[usize]) -> Tensor {
    let n = a.shape()[1] * a.shape()[2];
    Tensor::from_fn(a.shape(), |i| a.data()[perm[i / n] * n + i % n])
}

fn permute_pixels(a: &Tensor, perm: &[usize]) -> Tensor {
    let n = a.shape()[1] * a.shape()[2];
    Tensor::from_fn(a.shape(), |i| a.data()[(i / n) * n + perm[i % n]])
}

fn shuffled(n: usize, r: &mut rand_chacha::ChaCha8Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(r);
    v
}

#[test]
fn cam_is_channel_permutation_equivariant() {
    let mut r = rng(5);
    for trial in 0..50 {
        let a = uniform(&mut r, &[6, 3, 3], -1.0, 1.0);
        let perm = shuffled(6, &mut r);
        let p = CamParams { gamma: 0.8 };
        let lhs = cam_forward(&permute_channels(&a, &perm), &p).unwrap();
        let rhs = permute_channels(&cam_forward(&a, &p).unwrap(), &perm);
        assert!(max_abs_diff(&lhs, &rhs) <= 1e-9, "trial {trial}");
    }
}

#[test]
fn pam_is_pixel_permutation_equivariant() {
    let mut r = rng(6);
    for trial in 0..50 {
        let a = uniform(&mut r, &[3, 3, 4], -1.0, 1.0);
        let perm = shuffled(12, &mut r);
        let p = PamParams { gamma: 0.6, heads: PamHeads::Identity };
        let lhs = pam_forward(&permute_pixels(&a, &perm), &p, Mode::Eval).unwrap();
        let rhs = permute_pixels(&pam_forward(&a, &p, Mode::Eval).unwrap(), &perm);
        assert!(max_abs_diff(&lhs, &rhs) <= 1e-9, "trial {trial}");
    }
}

const GRAD_TOL: f64 = 1e-4;

#[test]
fn cam_gradients() {
    for trial in 0..20 {
        let a = uniform(&mut rng(100 + trial), &[2, 3, 2, 2], -1.0, 1.0);
        let rep = check(
            |t, x| {
                let g = t.constant(Tensor::scalar(0.7));
                let (out, aff) = cam_batch_on_tape(t, x, g)?;
                assert_rows_stochastic(t, &aff);
                project(t, out, trial)
            },
            &a,
            1e-5,
        );
        assert!(rep.max_rel_error < GRAD_TOL, "input trial {trial}: {:.3e}", rep.max_rel_error);

        let rep = check(
            |t, g| {
                let x = t.constant(a.clone());
                let (out, _) = cam_batch_on_tape(t, x, g)?;
                project(t, out, trial)
            },
            &Tensor::scalar(0.3),
            1e-5,
        );
        assert!(rep.max_rel_error < GRAD_TOL, "gamma trial {trial}: {:.3e}", rep.max_rel_error);
    }
}

#[test]
fn single_sample_cam_gradient() {
    let a = uniform(&mut rng(7), &[3, 2, 3], -1.0, 1.0);
    let rep = check(
        |t, x| {
            let g = t.constant(Tensor::scalar(-0.5));
            let o = cam_on_tape(t, x, g)?;
            project(t, o.out, 1)
        },
        &a,
        1e-5,
    );
    assert!(rep.max_rel_error < GRAD_TOL);
}

/// Which PAM quantity a gradient check perturbs.
#[derive(Clone, Copy, Debug)]
enum Probe {
    Input,
    Gamma,
    Weight(usize),
    BnGamma(usize),
    BnBeta(usize),
}

fn pam_loss(t: &mut Tape, x: Var, probe: Probe, a: &Tensor, heads: &[HeadParams; 3], seed: u64) -> abd_core::Result<Var> {
    let input = if let Probe::Input = probe { x } else { t.constant(a.clone()) };
    let gamma = if let Probe::Gamma = probe { x } else { t.constant(Tensor::scalar(0.8)) };
    let mut vars = Vec::new();
    for (k, h) in heads.iter().enumerate() {
        let pick = |t: &mut Tape, hit: bool, v: &Tensor| if hit { x } else { t.constant(v.clone()) };
        vars.push(ConvBnVars {
            weight: pick(t, matches!(probe, Probe::Weight(i) if i == k), &h.weight),
            bn_gamma: pick(t, matches!(probe, Probe::BnGamma(i) if i == k), &h.bn_gamma),
            bn_beta: pick(t, matches!(probe, Probe::BnBeta(i) if i == k), &h.bn_beta),
        });
    }
    let hv = PamHeadVars::Projection {
        heads: [vars[0], vars[1], vars[2]],
        running: [&heads[0].running, &heads[1].running, &heads[2].running],
    };
    let o = pam_on_tape(t, input, gamma, &hv, Mode::Train)?;
    assert_rows_stochastic(t, &o.affinities);
    project(t, o.out, seed)
}

#[test]
fn pam_gradients_through_heads_in_training_mode() {
    for trial in 0..10 {
        let mut r = rng(200 + trial);
        let a = uniform(&mut r, &[2, 3, 2, 2], -1.0, 1.0);
        let mut heads = [HeadParams::init(3, &mut r), HeadParams::init(3, &mut r), HeadParams::init(3, &mut r)];
        for h in heads.iter_mut() {
            // positive shifts keep most batch-norm outputs away from the relu kink
            h.bn_beta = uniform(&mut r, &[3], 0.5, 1.0);
            h.bn_gamma = uniform(&mut r, &[3], 0.2, 0.4);
        }
        let probes = [
            (Probe::Input, a.clone()),
            (Probe::Gamma, Tensor::scalar(0.8)),
            (Probe::Weight(0), heads[0].weight.clone()),
            (Probe::Weight(1), heads[1].weight.clone()),
            (Probe::Weight(2), heads[2].weight.clone()),
            (Probe::BnGamma(0), heads[0].bn_gamma.clone()),
            // a key-head shift moves each softmax row uniformly, so its gradient is
            // zero up to relu masking and carries no relative-error signal
            (Probe::BnBeta(0), heads[0].bn_beta.clone()),
            (Probe::BnBeta(2), heads[2].bn_beta.clone()),
            (Probe::BnGamma(2), heads[2].bn_gamma.clone()),
        ];
        for (probe, x0) in probes {
            let rep = check(|t, x| pam_loss(t, x, probe, &a, &heads, trial), &x0, 1e-5);
            assert!(rep.max_rel_error < GRAD_TOL, "{probe:?} trial {trial}: {:.3e}", rep.max_rel_error);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn affinity_rows_sum_to_one(data in prop::collection::vec(-4.0f64..4.0, 24)) {
        let a = Tensor::new(vec![4, 2, 3], data).unwrap();
        prop_assert!(channel_affinity(&a).unwrap().max_row_sum_error() <= ROW_TOL);
        prop_assert!(pixel_affinity(&a, &a.scale(-0.5)).unwrap().max_row_sum_error() <= ROW_TOL);
    }

    #[test]
    fn cam_output_keeps_shape_and_is_finite(data in prop::collection::vec(-10.0f64..10.0, 18), gamma in -2.0f64..2.0) {
        let a = Tensor::new(vec![3, 3, 2], data).unwrap();
        let out = cam_forward(&a, &CamParams { gamma }).unwrap();
        prop_assert_eq!(out.shape(), a.shape());
        prop_assert!(out.data().iter().all(|v| v.is_finite()));
    }
}
