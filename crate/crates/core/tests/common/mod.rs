#![allow(dead_code)]

use abd_core::gradcheck::{finite_diff_check, finite_diff_check_at, GradCheckReport};
use abd_core::seeds;
use abd_core::{Result, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    seeds::rng(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values with magnitude in `[0.1, 1)` and random sign, away from relu and max kinks.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values spaced at least `gap` apart, shuffled.
pub fn distinct(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * gap).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// `Σ out ⊙ w` with a fixed random `w`, so that every output coordinate matters.
pub fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let w = uniform(&mut rng(seed), &shape, 0.5, 1.5);
    let wv = tape.constant(w);
    let prod = tape.mul(out, wv)?;
    Ok(tape.sum(prod))
}

pub fn check<F>(f: F, x: &Tensor, h: f64) -> GradCheckReport
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_diff_check(f, x, h).expect("gradient check runs")
}

pub fn check_at<F>(f: F, x: &Tensor, h: f64, coords: &[usize]) -> GradCheckReport
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_diff_check_at(f, x, h, coords).expect("gradient check runs")
}

/// `n` orthonormal columns of length `m` (`m >= n`) by Gram-Schmidt on Gaussian draws, as `m×n`.
pub fn orthonormal_columns(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Tensor {
    assert!(m >= n);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = seeds::normal_tensor(rng, &[m], 1.0).into_data();
        for c in &cols {
            let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            cols.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    Tensor::from_fn(&[m, n], |i| cols[i % n][i / n])
}

/// `U·diag(√λ)·Vᵀ` (`rows×cols`, `rows <= cols`), whose Gram matrix has eigenvalues `lambdas`.
pub fn with_gram_spectrum(rng: &mut ChaCha8Rng, lambdas: &[f64], cols: usize) -> Tensor {
    let rows = lambdas.len();
    let u = orthonormal_columns(rng, rows, rows);
    let v = orthonormal_columns(rng, cols, rows);
    let us = Tensor::from_fn(&[rows, rows], |i| u.data()[i] * lambdas[i % rows].sqrt());
    us.matmul(&v.transpose().unwrap()).unwrap()
}

/// Eigenvalues of the 2×2 or 3×3 symmetric `x` from its characteristic polynomial, descending.
pub fn char_poly_eigs(x: &Tensor) -> Vec<f64> {
    let n = x.shape()[0];
    let a = |i: usize, j: usize| x.at2(i, j);
    let mut e = if n == 2 {
        let (tr, det) = (a(0, 0) + a(1, 1), a(0, 0) * a(1, 1) - a(0, 1) * a(1, 0));
        let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
        vec![tr / 2.0 + disc, tr / 2.0 - disc]
    } else {
        assert_eq!(n, 3);
        // trigonometric solution of the symmetric cubic
        let q = (a(0, 0) + a(1, 1) + a(2, 2)) / 3.0;
        let p1 = a(0, 1).powi(2) + a(0, 2).powi(2) + a(1, 2).powi(2);
        let p2 = (a(0, 0) - q).powi(2) + (a(1, 1) - q).powi(2) + (a(2, 2) - q).powi(2) + 2.0 * p1;
        let p = (p2 / 6.0).sqrt();
        let b = |i: usize, j: usize| (a(i, j) - if i == j { q } else { 0.0 }) / p;
        let det_b = b(0, 0) * (b(1, 1) * b(2, 2) - b(1, 2) * b(2, 1)) - b(0, 1) * (b(1, 0) * b(2, 2) - b(1, 2) * b(2, 0))
            + b(0, 2) * (b(1, 0) * b(2, 1) - b(1, 1) * b(2, 0));
        let phi = (det_b / 2.0).clamp(-1.0, 1.0).acos() / 3.0;
        let e1 = q + 2.0 * p * phi.cos();
        let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
        vec![e1, 3.0 * q - e1 - e3, e3]
    };
    e.sort_by(|x, y| y.total_cmp(x));
    e
}
