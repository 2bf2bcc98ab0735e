//! Central finite-difference check of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor on the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat coordinate where `max_rel_error` was observed.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the tape gradient of the scalar `f(x)` with central differences on every coordinate.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    finite_diff_check_at(f, x, h, &coords)
}

/// As [`finite_diff_check`], restricted to the listed flat coordinates.
pub fn finite_diff_check_at<F>(f: F, x: &Tensor, h: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&mut tape, xv)?;
    let base = tape.value(loss).item()?;
    if !base.is_finite() {
        return Err(Error::NonFinite("finite-difference base value".into()));
    }
    let grads = tape.backward(loss)?;
    let full = grads.get(xv).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.param(Tensor::new(x.shape().to_vec(), data)?);
        let out = f(&mut t, v)?;
        let val = t.value(out).item()?;
        if !val.is_finite() {
            return Err(Error::NonFinite("finite-difference probe".into()));
        }
        Ok(val)
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, worst_index: 0, analytic: vec![], numeric: vec![] };
    for &i in coords {
        let mut plus = x.data().to_vec();
        plus[i] += h;
        let mut minus = x.data().to_vec();
        minus[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let analytic = full[i];
        let err = relative_error(analytic, numeric);
        if report.analytic.is_empty() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
        }
        report.analytic.push(analytic);
        report.numeric.push(numeric);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_self() {
        let x = Tensor::vector(&[1.0, 2.0]).unwrap();
        let r = finite_diff_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(r.analytic, vec![2.0, 4.0]);
        assert!(r.max_rel_error < 1e-8, "{}", r.max_rel_error);
    }

    #[test]
    fn non_finite_probe_fails() {
        let x = Tensor::scalar(1.0);
        let r = finite_diff_check(
            |t, v| {
                let c = t.constant(Tensor::scalar(1.0 + 1e-5));
                let d = t.sub(c, v)?;
                // the +h probe lands on d ~ 0
                let one = t.constant(Tensor::scalar(1.0));
                t.div(one, d)
            },
            &x,
            1e-5,
        );
        assert!(r.is_err());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
    }
}
