//! Spectral value difference orthogonality (SVDO).
//!
//! The penalty `β·(λ₁ − λ₂)²` on the largest and smallest eigenvalues of the
//! Gram matrix `F·Fᵀ`, with both eigenvalues approximated by a short, unrolled
//! power iteration so the whole estimate is differentiable on the tape:
//!
//! ```text
//! p ← X q,  q ← X p,  λ(X) ← ‖q‖ / ‖p‖
//! ```
//!
//! Between rounds `q` is divided by its (detached) norm; the ratio is
//! homogeneous of degree zero in the start vector, so this changes neither the
//! estimate nor its gradient but keeps long runs finite.
//!
//! `X = F·Fᵀ` gives `λ₁`. The shifted matrix `F·Fᵀ − λ₁·I` is negative
//! semidefinite, so its dominant-magnitude eigenvalue is `λ_min − λ₁`, and the
//! iteration returns `λ₁ − λ_min`; hence `λ₂ = λ₁ − estimate`.
//!
//! A cyclic Jacobi eigensolver provides exact extreme eigenvalues for checking
//! the approximation and for the condition-number diagnostic.

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::seeds;
use crate::tensor::Tensor;

/// `‖p‖` below this marks the iterated matrix as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Largest matrix accepted by [`symmetric_eigenvalues`].
pub const JACOBI_MAX_SIZE: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvdoConfig {
    pub beta: f64,
    /// Rounds of `p ← Xq, q ← Xp`.
    pub iterations: usize,
    /// Seed of the initial `q`.
    pub seed: u64,
}

impl Default for SvdoConfig {
    fn default() -> Self {
        SvdoConfig { beta: 1.0, iterations: 2, seed: 0 }
    }
}

impl SvdoConfig {
    pub fn new(beta: f64, iterations: usize, seed: u64) -> Result<Self> {
        let cfg = SvdoConfig { beta, iterations, seed };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Contract(format!("SVDO beta must be finite and >= 0, got {}", self.beta)));
        }
        if self.iterations == 0 {
            return Err(Error::Contract("power iteration needs at least one round".into()));
        }
        Ok(())
    }
}

/// How per-sample or per-layer penalties are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

impl Reduction {
    pub fn parse(s: &str) -> Option<Reduction> {
        match s {
            "mean" => Some(Reduction::Mean),
            "sum" => Some(Reduction::Sum),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Reduction::Mean => "mean",
            Reduction::Sum => "sum",
        }
    }
}

/// Vectors of one power-iteration run.
#[derive(Debug, Clone)]
pub struct PowerIterState {
    pub p: Tensor,
    pub q: Tensor,
    pub lambda: f64,
}

impl PowerIterState {
    /// Unit-norm random start of length `n`.
    pub fn seeded(n: usize, seed: u64) -> Self {
        let q = seeds::unit_column(n, seed);
        PowerIterState { p: Tensor::zeros(&[n, 1]), q, lambda: 0.0 }
    }

    pub fn from_q(q: Tensor) -> Result<Self> {
        let n = q.numel();
        if q.frobenius_norm() <= 0.0 {
            return Err(Error::Contract("initial q must be nonzero".into()));
        }
        Ok(PowerIterState { p: Tensor::zeros(&[n, 1]), q: q.reshape(&[n, 1])?, lambda: 0.0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerIterOutcome {
    pub lambda: f64,
    /// Set when `‖p‖` collapsed; `lambda` is then 0.
    pub degenerate: bool,
}

/// Symmetric operator the iteration is applied to.
#[derive(Debug, Clone, Copy)]
enum SymOp {
    /// An explicit `n×n` matrix.
    Matrix(Var),
    /// `F·Fᵀ` applied as `F·(Fᵀ·v)` without forming the Gram matrix.
    GramOf { f: Var, ft: Var },
}

impl SymOp {
    fn apply(&self, tape: &mut Tape, v: Var, shift: Option<Var>) -> Result<Var> {
        let xv = match *self {
            SymOp::Matrix(x) => tape.matmul(x, v)?,
            SymOp::GramOf { f, ft } => {
                let t = tape.matmul(ft, v)?;
                tape.matmul(f, t)?
            }
        };
        match shift {
            Some(lambda) => {
                let sv = tape.mul_scalar(v, lambda)?;
                tape.sub(xv, sv)
            }
            None => Ok(xv),
        }
    }
}

/// Result of an unrolled power iteration recorded on a tape.
#[derive(Debug, Clone)]
pub struct TapeEstimate {
    pub lambda: Var,
    pub degenerate: bool,
    pub p: Tensor,
    pub q: Tensor,
}

fn estimate_on_tape(tape: &mut Tape, op: SymOp, shift: Option<Var>, q0: &Tensor, iterations: usize) -> Result<TapeEstimate> {
    let mut q = tape.constant(q0.clone());
    let mut p = q;
    for round in 0..iterations {
        // ‖q‖/‖p‖ is invariant to scaling the iterate, so a detached rescale
        // keeps values and gradients while preventing overflow over many rounds
        let q_norm = tape.value(q).frobenius_norm();
        if round > 0 && q_norm >= DEGENERATE_NORM {
            q = tape.scale(q, 1.0 / q_norm);
        }
        p = op.apply(tape, q, shift)?;
        let p_norm = tape.value(p).frobenius_norm();
        if p_norm < DEGENERATE_NORM {
            let zero = tape.constant(Tensor::scalar(0.0));
            return Ok(TapeEstimate { lambda: zero, degenerate: true, p: tape.value(p).clone(), q: tape.value(q).clone() });
        }
        q = op.apply(tape, p, shift)?;
    }
    let q_norm = tape.norm(q);
    let p_norm = tape.norm(p);
    let lambda = tape.div(q_norm, p_norm)?;
    Ok(TapeEstimate { lambda, degenerate: false, p: tape.value(p).clone(), q: tape.value(q).clone() })
}

/// Dominant-magnitude eigenvalue estimate of the symmetric matrix node `x`.
pub fn power_iter_on_tape(tape: &mut Tape, x: Var, q0: &Tensor, iterations: usize) -> Result<TapeEstimate> {
    let s = tape.value(x).shape2()?;
    if s.rows != s.cols || q0.numel() != s.rows {
        return dim_err("power_iter", format!("matrix {}x{}, start vector of {}", s.rows, s.cols, q0.numel()));
    }
    estimate_on_tape(tape, SymOp::Matrix(x), None, &q0.reshape(&[s.rows, 1])?, iterations)
}

/// Runs `cfg.iterations` rounds on `x` from `state.q` and returns `‖q‖/‖p‖`.
pub fn power_iter_lambda(x: &Tensor, cfg: &SvdoConfig, state: &mut PowerIterState) -> Result<PowerIterOutcome> {
    cfg.validate()?;
    check_symmetric(x, 1e-9)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let est = power_iter_on_tape(&mut tape, xv, &state.q, cfg.iterations)?;
    let lambda = tape.value(est.lambda).item()?;
    state.p = est.p;
    state.q = est.q;
    state.lambda = lambda;
    Ok(PowerIterOutcome { lambda, degenerate: est.degenerate })
}

/// `F·Fᵀ`.
pub fn gram(f: &Tensor) -> Result<Tensor> {
    f.matmul(&f.transpose()?)
}

/// SVDO penalty recorded on a tape.
#[derive(Debug, Clone)]
pub struct SvdoTerm {
    pub penalty: Var,
    pub lambda_max: f64,
    pub lambda_min: f64,
    pub degenerate: bool,
    /// Final `q` of the unshifted pass, for warm starts.
    pub q_final: Tensor,
}

/// Records `β·(λ₁ − λ₂)²` of `f·fᵀ` for the matrix node `f` (rows × cols).
///
/// The Gram matrix is formed explicitly when `rows <= cols`; otherwise it is
/// applied as `F·(Fᵀ·v)`, which yields the same iterates without the
/// `rows×rows` product.
pub fn svdo_on_tape(tape: &mut Tape, f: Var, cfg: &SvdoConfig, q0: &Tensor) -> Result<SvdoTerm> {
    let s = tape.value(f).shape2()?;
    if q0.numel() != s.rows {
        return dim_err("svdo", format!("start vector of {} for {} rows", q0.numel(), s.rows));
    }
    let q0 = q0.reshape(&[s.rows, 1])?;
    let ft = tape.transpose(f)?;
    let op = if s.rows <= s.cols { SymOp::Matrix(tape.matmul(f, ft)?) } else { SymOp::GramOf { f, ft } };

    let first = estimate_on_tape(tape, op, None, &q0, cfg.iterations)?;
    let q_final = first.q.clone();
    if first.degenerate {
        let zero = tape.constant(Tensor::scalar(0.0));
        return Ok(SvdoTerm { penalty: zero, lambda_max: 0.0, lambda_min: 0.0, degenerate: true, q_final });
    }
    let lambda1 = first.lambda;
    let shifted = estimate_on_tape(tape, op, Some(lambda1), &q0, cfg.iterations)?;
    let l1 = tape.value(lambda1).item()?;
    if shifted.degenerate {
        let zero = tape.constant(Tensor::scalar(0.0));
        return Ok(SvdoTerm { penalty: zero, lambda_max: l1, lambda_min: l1, degenerate: true, q_final });
    }
    let lambda2 = tape.sub(lambda1, shifted.lambda)?;
    let gap = tape.sub(lambda1, lambda2)?;
    let sq = tape.square(gap);
    let penalty = tape.scale(sq, cfg.beta);
    let l2 = tape.value(lambda2).item()?;
    Ok(SvdoTerm { penalty, lambda_max: l1, lambda_min: l2, degenerate: false, q_final })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvdoValue {
    pub penalty: f64,
    pub lambda_max: f64,
    pub lambda_min: f64,
    pub degenerate: bool,
}

/// `β·(λ₁ − λ₂)²` of `F·Fᵀ` with `q` seeded from `cfg.seed`.
pub fn svdo_penalty(f: &Tensor, cfg: &SvdoConfig) -> Result<SvdoValue> {
    cfg.validate()?;
    let s = f.shape2()?;
    let mut tape = Tape::new();
    let fv = tape.constant(f.clone());
    let term = svdo_on_tape(&mut tape, fv, cfg, &seeds::unit_column(s.rows, cfg.seed))?;
    Ok(SvdoValue {
        penalty: tape.value(term.penalty).item()?,
        lambda_max: term.lambda_max,
        lambda_min: term.lambda_min,
        degenerate: term.degenerate,
    })
}

fn reduce_on_tape(tape: &mut Tape, terms: &[Var], reduction: Reduction) -> Result<Var> {
    let total = tape.add_n(terms)?;
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => tape.scale(total, 1.0 / terms.len() as f64),
    })
}

/// Feature penalty for `x: [B, C, H, W]`: each sample is viewed as `C×(H·W)`.
/// All samples share the start vector `q0` (length `C`).
pub fn of_on_tape(tape: &mut Tape, x: Var, cfg: &SvdoConfig, reduction: Reduction, q0: &Tensor) -> Result<(Var, Tensor)> {
    let s = tape.shape(x).to_vec();
    let &[b, c, h, w] = s.as_slice() else {
        return dim_err("of_penalty", format!("expected [B, C, H, W], got {s:?}"));
    };
    let mut terms = Vec::with_capacity(b);
    let mut q_last = q0.clone();
    for i in 0..b {
        let sample = tape.index(x, i)?;
        let f = tape.reshape(sample, &[c, h * w])?;
        let term = svdo_on_tape(tape, f, cfg, q0)?;
        q_last = term.q_final;
        terms.push(term.penalty);
    }
    Ok((reduce_on_tape(tape, &terms, reduction)?, q_last))
}

/// O.F. penalty of one `C×H×W` map or a `B×C×H×W` batch (per-sample penalties averaged).
pub fn of_penalty(feature_map: &Tensor, cfg: &SvdoConfig) -> Result<f64> {
    cfg.validate()?;
    let batch = match feature_map.rank() {
        3 => {
            let mut shape = vec![1];
            shape.extend_from_slice(feature_map.shape());
            feature_map.reshape(&shape)?
        }
        4 => feature_map.clone(),
        _ => return dim_err("of_penalty", format!("expected rank 3 or 4, got {:?}", feature_map.shape())),
    };
    let mut tape = Tape::new();
    let x = tape.constant(batch);
    let c = tape.shape(x)[1];
    let (p, _) = of_on_tape(&mut tape, x, cfg, Reduction::Mean, &seeds::unit_column(c, cfg.seed))?;
    tape.value(p).item()
}

/// Matrix view `C*×M` (`C* = S·H·C`) of a convolution weight.
///
/// Weights are stored `[M, C, kh, kw]`; row `(c·kh + ky)·kw + kx` of the view
/// holds tap `(c, ky, kx)` of every output filter.
#[derive(Debug, Clone)]
pub struct WeightMatrixView {
    /// `(S, H, C, M)`: filter width, filter height, input channels, output channels.
    pub source_shape: [usize; 4],
    pub matrix: Tensor,
}

impl WeightMatrixView {
    pub fn from_conv_weight(w: &Tensor) -> Result<Self> {
        let &[m, c, kh, kw] = w.shape() else {
            return dim_err("WeightMatrixView", format!("expected [M, C, kh, kw], got {:?}", w.shape()));
        };
        let matrix = w.reshape(&[m, c * kh * kw])?.transpose()?;
        Ok(WeightMatrixView { source_shape: [kw, kh, c, m], matrix })
    }

    pub fn rows(&self) -> usize {
        self.matrix.shape()[0]
    }
}

/// Records the `C*×M` view of a conv weight node.
pub fn weight_view_on_tape(tape: &mut Tape, w: Var) -> Result<Var> {
    let s = tape.shape(w).to_vec();
    let &[m, c, kh, kw] = s.as_slice() else {
        return dim_err("weight_view", format!("expected [M, C, kh, kw], got {s:?}"));
    };
    let flat = tape.reshape(w, &[m, c * kh * kw])?;
    tape.transpose(flat)
}

/// O.W. penalty over registered conv weights (each `[M, C, kh, kw]`), one start vector per layer.
pub fn ow_on_tape(tape: &mut Tape, weights: &[Var], cfg: &SvdoConfig, reduction: Reduction, q0s: &[Tensor]) -> Result<(Var, Vec<Tensor>)> {
    if weights.len() != q0s.len() || weights.is_empty() {
        return Err(Error::Contract(format!("{} weights with {} start vectors", weights.len(), q0s.len())));
    }
    let mut terms = Vec::with_capacity(weights.len());
    let mut finals = Vec::with_capacity(weights.len());
    for (&w, q0) in weights.iter().zip(q0s) {
        let view = weight_view_on_tape(tape, w)?;
        let term = svdo_on_tape(tape, view, cfg, q0)?;
        terms.push(term.penalty);
        finals.push(term.q_final);
    }
    Ok((reduce_on_tape(tape, &terms, reduction)?, finals))
}

/// Sum of [`svdo_penalty`] over the given weight views.
pub fn ow_penalty(weights: &[WeightMatrixView], cfg: &SvdoConfig) -> Result<f64> {
    let mut total = 0.0;
    for w in weights {
        total += svdo_penalty(&w.matrix, cfg)?.penalty;
    }
    Ok(total)
}

fn check_symmetric(x: &Tensor, tol: f64) -> Result<usize> {
    let s = x.shape2()?;
    if s.rows != s.cols {
        return dim_err("symmetric matrix", format!("{}x{} is not square", s.rows, s.cols));
    }
    for i in 0..s.rows {
        for j in i + 1..s.rows {
            let (a, b) = (x.at2(i, j), x.at2(j, i));
            if (a - b).abs() > tol * a.abs().max(b.abs()).max(1.0) {
                return Err(Error::Contract(format!("matrix not symmetric at ({i}, {j}): {a} vs {b}")));
            }
        }
    }
    Ok(s.rows)
}

/// All eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
pub fn symmetric_eigenvalues(x: &Tensor) -> Result<Vec<f64>> {
    let n = check_symmetric(x, 1e-9)?;
    if n > JACOBI_MAX_SIZE {
        return Err(Error::Contract(format!("Jacobi solver limited to {JACOBI_MAX_SIZE}x{JACOBI_MAX_SIZE}, got {n}")));
    }
    let mut a = x.data().to_vec();
    let scale = x.frobenius_norm();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| a[i * n + j].powi(2)).sum();
        if off.sqrt() <= 1e-15 * scale || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    eig.sort_by(|x, y| y.total_cmp(x));
    Ok(eig)
}

/// `(λ_max, λ_min)` of a symmetric matrix.
pub fn exact_extreme_eigs(x: &Tensor) -> Result<(f64, f64)> {
    let eig = symmetric_eigenvalues(x)?;
    Ok((eig[0], eig[eig.len() - 1]))
}

/// `σ_max / σ_min` of `f`, or `f64::INFINITY` when `f` is numerically rank deficient.
///
/// Singular values come from the smaller of the two Gram matrices, so a full-rank
/// rectangular matrix has a finite condition number.
pub fn condition_number(f: &Tensor) -> Result<f64> {
    let s = f.shape2()?;
    if f.frobenius_norm() == 0.0 {
        return Err(Error::Contract("condition number of the zero matrix".into()));
    }
    let g = if s.rows <= s.cols { gram(f)? } else { f.transpose()?.matmul(f)? };
    let (l_max, l_min) = exact_extreme_eigs(&g)?;
    let n = s.rows.min(s.cols) as f64;
    let s_max = l_max.max(0.0).sqrt();
    let s_min = l_min.max(0.0).sqrt();
    if s_min < 1e-12 || l_min <= n * f64::EPSILON * l_max {
        return Ok(f64::INFINITY);
    }
    Ok(s_max / s_min)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn gram_cases() {
        assert_eq!(gram(&Tensor::eye(2)).unwrap(), Tensor::eye(2));
        assert_eq!(gram(&m(&[&[1.0, 1.0], &[1.0, -1.0]])).unwrap(), Tensor::eye(2).scale(2.0));
    }

    #[test]
    fn power_iteration_cases() {
        let cfg = SvdoConfig::new(1.0, 30, 4).unwrap();
        let mut st = PowerIterState::seeded(2, 4);
        let out = power_iter_lambda(&m(&[&[5.0, 0.0], &[0.0, 1.0]]), &cfg, &mut st).unwrap();
        assert!((out.lambda - 5.0).abs() / 5.0 < 0.01);
        assert_eq!(st.lambda, out.lambda);

        let one = SvdoConfig::new(1.0, 1, 9).unwrap();
        let mut st = PowerIterState::seeded(3, 9);
        let out = power_iter_lambda(&Tensor::eye(3).scale(2.5), &one, &mut st).unwrap();
        assert!((out.lambda - 2.5).abs() < 1e-14);

        let mut st = PowerIterState::seeded(3, 9);
        let out = power_iter_lambda(&Tensor::zeros(&[3, 3]), &one, &mut st).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.lambda, 0.0);
    }

    #[test]
    fn asymmetric_input_rejected() {
        let mut st = PowerIterState::seeded(2, 0);
        let x = m(&[&[1.0, 2.0], &[0.0, 1.0]]);
        assert!(power_iter_lambda(&x, &SvdoConfig::default(), &mut st).is_err());
        assert!(exact_extreme_eigs(&x).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SvdoConfig::new(-1.0, 2, 0).is_err());
        assert!(SvdoConfig::new(1.0, 0, 0).is_err());
        assert!(PowerIterState::from_q(Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn isotropic_rows_have_zero_penalty() {
        let f = Tensor::eye(3).scale(3f64.sqrt());
        let v = svdo_penalty(&f, &SvdoConfig::default()).unwrap();
        assert!(v.penalty.abs() < 1e-9);
        assert_eq!(svdo_penalty(&Tensor::zeros(&[2, 3]), &SvdoConfig::default()).unwrap().penalty, 0.0);
    }

    #[test]
    fn diagonal_penalty_converges_to_nine() {
        let cfg = SvdoConfig::new(1.0, 60, 1).unwrap();
        let v = svdo_penalty(&m(&[&[2.0, 0.0], &[0.0, 1.0]]), &cfg).unwrap();
        assert!((v.penalty - 9.0).abs() < 1e-9, "{v:?}");
        assert!((v.lambda_max - 4.0).abs() < 1e-12);
        assert!((v.lambda_min - 1.0).abs() < 1e-9);
    }

    #[test]
    fn jacobi_closed_forms() {
        assert_eq!(exact_extreme_eigs(&m(&[&[3.0, 0.0, 0.0], &[0.0, -1.0, 0.0], &[0.0, 0.0, 7.0]])).unwrap(), (7.0, -1.0));
        let (hi, lo) = exact_extreme_eigs(&m(&[&[2.0, 1.0], &[1.0, 2.0]])).unwrap();
        assert!((hi - 3.0).abs() < 1e-14 && (lo - 1.0).abs() < 1e-14);
        assert!(symmetric_eigenvalues(&Tensor::zeros(&[257, 257])).is_err());
    }

    #[test]
    fn condition_number_cases() {
        assert!((condition_number(&Tensor::eye(3).scale(2.0)).unwrap() - 1.0).abs() < 1e-12);
        assert!((condition_number(&m(&[&[2.0, 0.0], &[0.0, 1.0]])).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(condition_number(&m(&[&[1.0, 2.0], &[2.0, 4.0]])).unwrap(), f64::INFINITY);
        assert_eq!(condition_number(&m(&[&[1.0, 0.0], &[0.0, 0.0]])).unwrap(), f64::INFINITY);
        assert!(condition_number(&Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn weight_view_layout() {
        // M=2 filters over C=1 input channel with 1x2 kernels.
        let w = Tensor::new(vec![2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let v = WeightMatrixView::from_conv_weight(&w).unwrap();
        assert_eq!(v.source_shape, [2, 1, 1, 2]);
        assert_eq!(v.matrix, m(&[&[1.0, 3.0], &[2.0, 4.0]]));
    }

    #[test]
    fn ow_sums_layers() {
        let cfg = SvdoConfig::new(1.0, 40, 2).unwrap();
        let a = WeightMatrixView::from_conv_weight(&Tensor::new(vec![2, 2, 1, 1], vec![2.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let b = WeightMatrixView::from_conv_weight(&Tensor::new(vec![2, 2, 1, 1], vec![3.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let single = ow_penalty(std::slice::from_ref(&a), &cfg).unwrap();
        assert!((single - svdo_penalty(&a.matrix, &cfg).unwrap().penalty).abs() < 1e-15);
        let both = ow_penalty(&[a.clone(), b.clone()], &cfg).unwrap();
        assert!((both - (9.0 + 64.0)).abs() < 1e-6, "{both}");
        let iso = WeightMatrixView::from_conv_weight(&Tensor::new(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        assert!(ow_penalty(&[iso.clone(), iso], &cfg).unwrap().abs() < 1e-9);
    }

    #[test]
    fn of_penalty_batches_average() {
        let cfg = SvdoConfig::new(1.0, 40, 5).unwrap();
        let a = Tensor::new(vec![2, 1, 2], vec![2.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2, 1, 2], vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let pa = of_penalty(&a, &cfg).unwrap();
        let pb = of_penalty(&b, &cfg).unwrap();
        assert!((pa - svdo_penalty(&a.flatten_spatial().unwrap(), &cfg).unwrap().penalty).abs() < 1e-15);
        let both = of_penalty(&Tensor::stack(&[a, b]).unwrap(), &cfg).unwrap();
        assert!((both - 0.5 * (pa + pb)).abs() < 1e-12);
        let iso = Tensor::new(vec![2, 1, 2], vec![1.5, 0.0, 0.0, 1.5]).unwrap();
        assert!(of_penalty(&iso, &cfg).unwrap().abs() < 1e-9);
    }
}
