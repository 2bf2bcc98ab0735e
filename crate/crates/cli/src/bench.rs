//! `bench-power-iteration`: unrolled power iteration against the Jacobi solver.

use std::path::Path;
use std::time::Instant;

use abd_core::orthogonality::{exact_extreme_eigs, gram, svdo_penalty, SvdoConfig};
use abd_core::seeds;

use crate::error::Result;
use crate::{csv_writer, num};

pub const BENCH_FILE: &str = "bench_power_iteration.csv";
pub const SIZES: [usize; 4] = [8, 16, 32, 64];
pub const ITERATIONS: [usize; 4] = [2, 5, 20, 50];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub iterations: usize,
    pub power_seconds: f64,
    pub jacobi_seconds: f64,
    pub lambda_max_rel_error: f64,
    pub lambda_min_rel_error: f64,
}

/// Times both estimators on an `n×2n` Gaussian matrix per size.
pub fn cmd_bench(seed: u64, out: &Path) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for n in SIZES {
        let f = seeds::normal_tensor(&mut seeds::rng(seeds::derive_indexed(seed, "bench", n as u64)), &[n, 2 * n], 1.0);
        let t = Instant::now();
        let (l_max, l_min) = exact_extreme_eigs(&gram(&f)?)?;
        let jacobi_seconds = t.elapsed().as_secs_f64();
        for iterations in ITERATIONS {
            let cfg = SvdoConfig::new(1.0, iterations, seed)?;
            let t = Instant::now();
            let v = svdo_penalty(&f, &cfg)?;
            let power_seconds = t.elapsed().as_secs_f64();
            rows.push(BenchRow {
                n,
                iterations,
                power_seconds,
                jacobi_seconds,
                lambda_max_rel_error: (v.lambda_max - l_max).abs() / l_max,
                lambda_min_rel_error: (v.lambda_min - l_min).abs() / l_min,
            });
        }
    }
    let mut w = csv_writer(out, BENCH_FILE)?;
    w.write_record(["n", "iterations", "power_seconds", "jacobi_seconds", "lambda_max_rel_error", "lambda_min_rel_error"])?;
    for r in &rows {
        w.write_record([
            r.n.to_string(),
            r.iterations.to_string(),
            num(r.power_seconds),
            num(r.jacobi_seconds),
            num(r.lambda_max_rel_error),
            num(r.lambda_min_rel_error),
        ])?;
    }
    w.flush()?;
    Ok(rows)
}
