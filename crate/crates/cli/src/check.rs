//! `check`: gradient checks and oracle comparisons with pinned tolerances.

use std::path::Path;

use abd_core::attention::{cam_on_tape, channel_affinity, pam_on_tape, HeadParams, PamHeadVars};
use abd_core::evaluate::average_precision;
use abd_core::gradcheck::{finite_diff_check, finite_diff_check_at, relative_error};
use abd_core::layers::{ConvBnVars, Mode};
use abd_core::losses::{batch_hard_triplet, cross_entropy, Batch};
use abd_core::network::{Config, ForwardOptions, Model, OfRequest, Variant};
use abd_core::orthogonality::{exact_extreme_eigs, gram, ow_on_tape, svdo_on_tape, svdo_penalty, SvdoConfig};
use abd_core::{losses, seeds, NormStats, Shape3, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::{csv_writer, num};

pub const CHECK_FILE: &str = "check.csv";

pub const TENSOR_OP_TOL: f64 = 1e-5;
pub const ATTENTION_TOL: f64 = 1e-4;
pub const SVDO_TOL: f64 = 1e-4;
pub const NETWORK_TOL: f64 = 1e-3;
pub const EIGEN_TOL: f64 = 1e-2;
pub const XENT_TOL: f64 = 1e-9;
pub const ROW_SUM_TOL: f64 = 1e-8;

/// Below this absolute disagreement a network coordinate is finite-difference noise.
const NOISE_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub name: String,
    /// Relative error for gradient and eigenvalue checks, absolute error for exact oracles.
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

/// Magnitudes in `[0.1, 1)` with random sign, away from relu and pooling kinks.
fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| if r.random_bool(0.5) { 1.0 } else { -1.0 } * r.random_range(0.1..1.0))
}

/// `Σ out ⊙ w` for a fixed random `w`.
fn project(t: &mut Tape, out: Var, seed: u64) -> abd_core::Result<Var> {
    let shape = t.shape(out).to_vec();
    let w = t.constant(uniform(&mut seeds::rng(seed), &shape, 0.5, 1.5));
    let p = t.mul(out, w)?;
    Ok(t.sum(p))
}

/// Worst relative error over coordinates above [`NOISE_FLOOR`]; deep compositions leave
/// some gradients at rounding level, where relative error carries no signal.
fn worst(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| if (a - n).abs() <= NOISE_FLOOR { 0.0 } else { relative_error(a, n) })
        .fold(0.0, f64::max)
}

fn grad<F>(f: F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> abd_core::Result<Var>,
{
    Ok(finite_diff_check(f, x, 1e-6)?.max_rel_error)
}

type OpFn = Box<dyn Fn(&mut Tape, Var) -> abd_core::Result<Var>>;

/// Every differentiable tape op, each projected to a scalar with fixed random weights.
fn tensor_op_checks() -> Result<Vec<(&'static str, f64)>> {
    let mut r = seeds::rng(1);
    let m = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let other = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let right = uniform(&mut r, &[4, 2], -1.0, 1.0);
    let img = away_from_zero(&mut r, &[2, 2, 4, 4]);
    let kernel = uniform(&mut r, &[3, 2, 3, 3], -0.5, 0.5);
    let bias = uniform(&mut r, &[2], -0.5, 0.5);
    let bn_gamma = uniform(&mut r, &[2], 0.5, 1.5);
    let bn_beta = uniform(&mut r, &[2], -0.5, 0.5);
    let c = |t: &Tensor| t.clone();
    let ops: Vec<(&'static str, Tensor, OpFn)> = vec![
        ("tensor.add", c(&m), { let o = c(&other); Box::new(move |t, x| { let y = t.constant(o.clone()); t.add(x, y) }) }),
        ("tensor.sub", c(&m), { let o = c(&other); Box::new(move |t, x| { let y = t.constant(o.clone()); t.sub(y, x) }) }),
        ("tensor.mul", c(&m), { let o = c(&other); Box::new(move |t, x| { let y = t.constant(o.clone()); t.mul(x, y) }) }),
        ("tensor.scale", c(&m), Box::new(|t, x| Ok(t.scale(x, -2.5)))),
        ("tensor.mul_scalar", Tensor::scalar(0.7), { let o = c(&m); Box::new(move |t, s| { let y = t.constant(o.clone()); t.mul_scalar(y, s) }) }),
        ("tensor.add_n", c(&m), Box::new(|t, x| { let sq = t.square(x); t.add_n(&[x, sq, x]) })),
        ("tensor.relu", away_from_zero(&mut r, &[3, 4]), Box::new(|t, x| Ok(t.relu(x)))),
        ("tensor.square", c(&m), Box::new(|t, x| Ok(t.square(x)))),
        ("tensor.sqrt_floor", uniform(&mut r, &[3, 4], 0.2, 2.0), Box::new(|t, x| Ok(t.sqrt_floor(x, 1e-12)))),
        ("tensor.sum", c(&m), Box::new(|t, x| Ok(t.sum(x)))),
        ("tensor.mean", c(&m), Box::new(|t, x| Ok(t.mean(x)))),
        ("tensor.norm", c(&m), Box::new(|t, x| Ok(t.norm(x)))),
        ("tensor.div", Tensor::scalar(1.7), Box::new(|t, x| { let n = t.constant(Tensor::scalar(-1.3)); t.div(n, x) })),
        ("tensor.matmul", c(&m), { let o = c(&right); Box::new(move |t, x| { let y = t.constant(o.clone()); t.matmul(x, y) }) }),
        ("tensor.transpose", c(&m), Box::new(|t, x| t.transpose(x))),
        ("tensor.softmax_rows", uniform(&mut r, &[3, 4], -3.0, 3.0), Box::new(|t, x| t.softmax_rows(x))),
        ("tensor.reshape", c(&m), Box::new(|t, x| t.reshape(x, &[2, 6]))),
        ("tensor.concat", c(&m), { let o = c(&other); Box::new(move |t, x| { let y = t.constant(o.clone()); t.concat(&[y, x, x]) }) }),
        ("tensor.index", c(&m), Box::new(|t, x| t.index(x, 1))),
        ("tensor.stack", c(&m), Box::new(|t, x| { let a = t.index(x, 0)?; let b = t.index(x, 2)?; t.stack(&[b, a, b]) })),
        ("tensor.gather", c(&m), Box::new(|t, x| t.gather(x, &[0, 5, 11, 5, 2]))),
        ("tensor.conv2d", c(&img), { let k = c(&kernel); Box::new(move |t, x| { let w = t.constant(k.clone()); t.conv2d(x, w, 1) }) }),
        ("tensor.conv2d_weight", c(&kernel), { let i = c(&img); Box::new(move |t, w| { let x = t.constant(i.clone()); t.conv2d(x, w, 0) }) }),
        ("tensor.batch_norm", c(&img), {
            let (g, b) = (c(&bn_gamma), c(&bn_beta));
            Box::new(move |t, x| {
                let g = t.constant(g.clone());
                let b = t.constant(b.clone());
                t.batch_norm(x, g, b, &NormStats::Batch, 1e-5)
            })
        }),
        ("tensor.max_pool2", c(&img), Box::new(|t, x| t.max_pool2(x))),
        ("tensor.global_avg_pool", c(&img), Box::new(|t, x| t.global_avg_pool(x))),
        ("tensor.add_bias", c(&img), { let b = c(&bias); Box::new(move |t, x| { let b = t.constant(b.clone()); t.add_bias(x, b) }) }),
        ("tensor.cross_entropy", c(&m), Box::new(|t, x| t.cross_entropy(x, &[0, 2, 1]))),
        ("tensor.pairwise_distance", c(&m), Box::new(|t, x| t.pairwise_distance(x, 1e-12))),
    ];
    ops.into_iter()
        .enumerate()
        .map(|(i, (name, x0, f))| {
            let e = grad(|t, x| { let y = f(t, x)?; project(t, y, 100 + i as u64) }, &x0)?;
            Ok((name, e))
        })
        .collect()
}

fn cam_check() -> Result<f64> {
    let mut r = seeds::rng(20);
    let a = uniform(&mut r, &[2, 3, 2, 2], -1.0, 1.0);
    let av = a.clone();
    let input = grad(|t, x| { let g = t.constant(Tensor::scalar(0.7)); let (o, _) = abd_core::attention::cam_batch_on_tape(t, x, g)?; project(t, o, 21) }, &a)?;
    let gamma = grad(
        move |t, g| {
            let x = t.constant(av.index_axis0(0)?);
            let o = cam_on_tape(t, x, g)?;
            project(t, o.out, 22)
        },
        &Tensor::scalar(0.7),
    )?;
    Ok(input.max(gamma))
}

fn pam_check() -> Result<f64> {
    let mut r = seeds::rng(30);
    let a = uniform(&mut r, &[2, 3, 2, 2], -1.0, 1.0);
    let mut heads = [HeadParams::init(3, &mut r), HeadParams::init(3, &mut r), HeadParams::init(3, &mut r)];
    for h in heads.iter_mut() {
        h.bn_beta = uniform(&mut r, &[3], 0.5, 1.0);
        h.bn_gamma = uniform(&mut r, &[3], 0.2, 0.4);
    }
    // probe 0: input, 1: gamma, 2..5: head weights
    let run = |probe: usize, x0: &Tensor| {
        grad(
            |t, x| {
                let input = if probe == 0 { x } else { t.constant(a.clone()) };
                let gamma = if probe == 1 { x } else { t.constant(Tensor::scalar(0.8)) };
                let mut vars = Vec::new();
                for (k, h) in heads.iter().enumerate() {
                    let weight = if probe == 2 + k { x } else { t.constant(h.weight.clone()) };
                    vars.push(ConvBnVars { weight, bn_gamma: t.constant(h.bn_gamma.clone()), bn_beta: t.constant(h.bn_beta.clone()) });
                }
                let hv = PamHeadVars::Projection {
                    heads: [vars[0], vars[1], vars[2]],
                    running: [&heads[0].running, &heads[1].running, &heads[2].running],
                };
                let o = pam_on_tape(t, input, gamma, &hv, Mode::Train)?;
                project(t, o.out, 31)
            },
            x0,
        )
    };
    let mut e = run(0, &a)?.max(run(1, &Tensor::scalar(0.8))?);
    for (k, h) in heads.iter().enumerate() {
        e = e.max(run(2 + k, &h.weight)?);
    }
    Ok(e)
}

fn svdo_check() -> Result<f64> {
    let mut r = seeds::rng(40);
    let cfg = SvdoConfig::default();
    let mut e = 0.0f64;
    for shape in [[4, 6], [6, 3]] {
        let f = uniform(&mut r, &shape, -1.0, 1.0);
        let q0 = seeds::unit_column(shape[0], 41);
        e = e.max(grad(|t, x| Ok(svdo_on_tape(t, x, &cfg, &q0)?.penalty), &f)?);
    }
    Ok(e)
}

fn tiny_config() -> Config {
    let mut c = Config::default();
    c.backbone.widths = [3, 4, 4, 6];
    c.backbone.branch_width = 6;
    c.backbone.input = Shape3 { c: 3, h: 16, w: 8 };
    c.embedding.k_a = 3;
    c.embedding.k_g = 3;
    c.loss.beta_of = 1e-2;
    c.loss.beta_ow = 1e-2;
    c
}

/// Full objective on a 2-identity × 2-instance micro-batch, one parameter probed.
fn network_check() -> Result<f64> {
    let cfg = tiny_config();
    let mut model = Model::init(&cfg, 2, 3)?;
    for g in ["cam_early.gamma", "cam.gamma", "pam.gamma"] {
        model.store.set(g, Tensor::scalar(0.5))?;
    }
    let images = uniform(&mut seeds::rng(4), &[4, 3, 16, 8], -1.0, 1.0);
    let labels = [0, 0, 1, 1];
    let of_starts: Vec<Tensor> = model.of_site_channels().iter().enumerate().map(|(i, &c)| seeds::unit_column(c, i as u64)).collect();
    let ow_starts: Vec<Tensor> = model.ow_view_rows()?.iter().enumerate().map(|(i, &r)| seeds::unit_column(r, 10 + i as u64)).collect();
    let loss = |t: &mut Tape, x: Var, name: &str| -> abd_core::Result<Var> {
        let mut binding = model.store.bind(t, |_| false);
        binding.replace(name, x)?;
        let opts = ForwardOptions {
            mode: Mode::Train,
            variant: Variant::FULL,
            dropout_seed: 5,
            of: Some(OfRequest { cfg: cfg.svdo, reduction: cfg.of_reduction, starts: &of_starts }),
        };
        let img = t.constant(images.clone());
        let out = model.forward_on_tape(t, &binding, img, &opts)?;
        let xent = t.cross_entropy(out.logits, &labels)?;
        let triplet = losses::batch_hard_triplet_on_tape(t, out.embeddings, &labels, cfg.loss.margin_alpha)?;
        let parts: Vec<Var> = out.of_terms.iter().map(|o| o.penalty).collect();
        let of = t.add_n(&parts)?;
        let (ow, _) = ow_on_tape(t, &Model::ow_weight_vars(&binding)?, &cfg.svdo, cfg.ow_reduction, &ow_starts)?;
        losses::total_loss_on_tape(t, xent, Some(triplet), Some(of), Some(ow), &cfg.loss)
    };
    let mut e = 0.0f64;
    for name in ["block1.conv.weight", "block5a.conv.weight", "pam.query.conv.weight", "global.reduce.weight", "classifier.weight", "cam.gamma", "pam.gamma"] {
        let x0 = model.store.get(name)?.clone();
        let coords: Vec<usize> = (0..x0.numel()).step_by((x0.numel() / 4).max(1)).collect();
        let rep = finite_diff_check_at(|t, x| loss(t, x, name), &x0, 1e-5, &coords)?;
        e = e.max(worst(&rep.analytic, &rep.numeric));
    }
    Ok(e)
}

/// `H·D` with `D` diagonal `√λ` and `H` a Householder reflection, so `FFᵀ = H diag(λ) H`.
fn with_spectrum(lambdas: &[f64], cols: usize, r: &mut ChaCha8Rng) -> Tensor {
    let n = lambdas.len();
    let v = seeds::normal_tensor(r, &[n], 1.0);
    let v = v.scale(1.0 / v.frobenius_norm());
    let h = Tensor::from_fn(&[n, n], |i| f64::from(u8::from(i / n == i % n)) - 2.0 * v.data()[i / n] * v.data()[i % n]);
    let d = Tensor::from_fn(&[n, cols], |i| if i / cols == i % cols { lambdas[i / cols].sqrt() } else { 0.0 });
    h.matmul(&d).expect("conformable")
}

fn eigen_check() -> Result<f64> {
    let mut r = seeds::rng(50);
    let mut e = 0.0f64;
    for trial in 0..20u64 {
        let n = r.random_range(2..=12);
        let lambdas: Vec<f64> = (0..n).map(|i| if i == 0 { 8.0 } else if i == n - 1 { 0.5 } else { r.random_range(1.0..5.0) }).collect();
        let f = with_spectrum(&lambdas, n + r.random_range(0..8), &mut r);
        let v = svdo_penalty(&f, &SvdoConfig::new(0.5, 50, trial)?)?;
        let (l_max, l_min) = exact_extreme_eigs(&gram(&f)?)?;
        e = e.max((v.lambda_max - l_max).abs() / l_max).max((v.lambda_min - l_min).abs() / l_min);
    }
    Ok(e)
}

fn triplet_oracle() -> Result<f64> {
    let mut r = seeds::rng(60);
    let mut e = 0.0f64;
    for _ in 0..20 {
        let (p, k, d) = (r.random_range(2..=4), r.random_range(2..=4), r.random_range(1..=5));
        let labels: Vec<usize> = (0..p * k).map(|i| i / k).collect();
        let emb = uniform(&mut r, &[p * k, d], -1.0, 1.0);
        let dist = |i: usize, j: usize| emb.row(i).iter().zip(emb.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().max(1e-12).sqrt();
        let n = p * k;
        let mut want = 0.0;
        for a in 0..n {
            let mut hardest = 0.0f64;
            for pos in (0..n).filter(|&j| j != a && labels[j] == labels[a]) {
                for neg in (0..n).filter(|&j| labels[j] != labels[a]) {
                    hardest = hardest.max((dist(a, pos) - dist(a, neg) + 1.2).max(0.0));
                }
            }
            want += hardest;
        }
        want /= n as f64;
        e = e.max((batch_hard_triplet(&Batch::new(emb, labels)?, 1.2)? - want).abs());
    }
    Ok(e)
}

fn xent_oracle() -> Result<f64> {
    let mut r = seeds::rng(70);
    let mut e = 0.0f64;
    for _ in 0..20 {
        let (b, c) = (r.random_range(1..=6), r.random_range(2..=8));
        let z = uniform(&mut r, &[b, c], -20.0, 20.0);
        let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..c)).collect();
        let want = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let row = z.row(i);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - row[y]
            })
            .sum::<f64>()
            / b as f64;
        e = e.max((cross_entropy(&z, &labels)? - want).abs() / want.abs().max(1.0));
    }
    Ok(e)
}

fn ap_oracle() -> f64 {
    let cases: [(&[bool], f64); 3] = [(&[false, true], 0.5), (&[true, false, true], 5.0 / 6.0), (&[true, true, false], 1.0)];
    cases.iter().map(|(m, want)| (average_precision(m) - want).abs()).fold(0.0, f64::max)
}

fn attention_invariants() -> Result<(f64, f64)> {
    let mut r = seeds::rng(80);
    let (mut identity, mut rows) = (0.0f64, 0.0f64);
    for _ in 0..10 {
        let a = uniform(&mut r, &[4, 3, 2], -3.0, 3.0);
        let mut t = Tape::new();
        let av = t.constant(a.clone());
        let g = t.constant(Tensor::scalar(0.0));
        let o = cam_on_tape(&mut t, av, g)?;
        identity = identity.max(t.value(o.out).max_abs_diff(&a)?);
        rows = rows.max(channel_affinity(&a)?.max_row_sum_error());
    }
    Ok((identity, rows))
}

/// Runs every check; tolerances are multiplied by `tolerance_scale`.
pub fn run_checks(tolerance_scale: f64) -> Result<Vec<CheckRow>> {
    let row = |name: &str, e: f64, tol: f64| CheckRow { name: name.into(), max_rel_error: e, tolerance: tol * tolerance_scale };
    let mut rows: Vec<CheckRow> = tensor_op_checks()?.into_iter().map(|(n, e)| row(n, e, TENSOR_OP_TOL)).collect();
    rows.push(row("grad.cam", cam_check()?, ATTENTION_TOL));
    rows.push(row("grad.pam", pam_check()?, ATTENTION_TOL));
    rows.push(row("grad.svdo_2_iterations", svdo_check()?, SVDO_TOL));
    rows.push(row("grad.network_micro_batch", network_check()?, NETWORK_TOL));
    rows.push(row("oracle.power_iteration_vs_jacobi", eigen_check()?, EIGEN_TOL));
    rows.push(row("oracle.batch_hard_triplet", triplet_oracle()?, 0.0));
    rows.push(row("oracle.cross_entropy", xent_oracle()?, XENT_TOL));
    rows.push(row("oracle.average_precision", ap_oracle(), 0.0));
    let (identity, row_sums) = attention_invariants()?;
    rows.push(row("invariant.cam_zero_gamma_identity", identity, 1e-12));
    rows.push(row("invariant.affinity_rows_sum_to_one", row_sums, ROW_SUM_TOL));
    Ok(rows)
}

pub fn cmd_check(out: &Path, tolerance_scale: f64) -> Result<Vec<CheckRow>> {
    let rows = run_checks(tolerance_scale)?;
    let mut w = csv_writer(out, CHECK_FILE)?;
    w.write_record(["check", "max_rel_error", "tolerance", "status"])?;
    for r in &rows {
        w.write_record([r.name.clone(), num(r.max_rel_error), num(r.tolerance), (if r.passed() { "pass" } else { "fail" }).into()])?;
    }
    w.flush()?;
    for r in rows.iter().filter(|r| !r.passed()) {
        log::error!("{} failed: {:e} > {:e}", r.name, r.max_rel_error, r.tolerance);
    }
    Ok(rows)
}
