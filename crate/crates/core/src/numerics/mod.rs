//! Dense `f64` linear algebra, stable nonlinearities, the seeded generator
//! and the central-difference gradient oracle.

mod matrix;
mod rng;

pub use matrix::{argmax, dot, norm, Matrix};
pub use rng::{splitmix64, Rng};

use crate::error::{Error, Result};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Row-wise softmax with max-subtraction.
///
/// Shifting a row by a constant leaves the result bitwise unchanged as long
/// as the shift itself is exact (the max is subtracted before `exp`).
pub fn softmax_rows(logits: &Matrix) -> Result<Matrix> {
    logits.check_finite("softmax_rows")?;
    if logits.cols() == 0 {
        return Err(Error::InvalidArgument("softmax over zero classes".into()));
    }
    let mut out = logits.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `log Σ exp(row)` computed around the row max.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Logistic function, evaluated on whichever branch keeps `exp` bounded.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise logistic function.
pub fn sigmoid(x: &Matrix) -> Result<Matrix> {
    x.check_finite("sigmoid")?;
    Ok(x.map(sigmoid_scalar))
}

/// Central differences `(f(x + h eᵢ) − f(x − h eᵢ)) / 2h` for every coordinate.
///
/// Fails with the offending coordinate if either evaluation is non-finite.
pub fn finite_diff_grad<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step {h} must be > 0")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        for v in [fp, fm] {
            if !v.is_finite() {
                return Err(Error::NonFiniteObjective { coordinate: i, value: v });
            }
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

/// Worst-case violation of `|a − b| ≤ max(abs_tol, rel_tol·max(|a|,|b|))`,
/// reported as `|a − b| / allowed` (≤ 1 means within tolerance) together with
/// the largest relative error `|a − b| / max(|a|, |b|, abs_tol)`.
pub fn compare_gradients(analytic: &[f64], numeric: &[f64], abs_tol: f64, rel_tol: f64) -> GradientAgreement {
    assert_eq!(analytic.len(), numeric.len());
    let mut out = GradientAgreement::default();
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let diff = (a - n).abs();
        let scale = a.abs().max(n.abs());
        let allowed = abs_tol.max(rel_tol * scale);
        let ratio = if diff.is_nan() { f64::INFINITY } else { diff / allowed };
        if ratio > out.worst_ratio {
            out.worst_ratio = ratio;
            out.worst_index = i;
        }
        out.max_abs_err = out.max_abs_err.max(diff);
        out.max_rel_err = out.max_rel_err.max(diff / scale.max(abs_tol));
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GradientAgreement {
    pub worst_ratio: f64,
    pub worst_index: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
}

impl GradientAgreement {
    pub fn passes(&self) -> bool {
        self.worst_ratio <= 1.0
    }

    pub fn merge(self, other: GradientAgreement) -> GradientAgreement {
        let (worst_ratio, worst_index) = if other.worst_ratio > self.worst_ratio {
            (other.worst_ratio, other.worst_index)
        } else {
            (self.worst_ratio, self.worst_index)
        };
        GradientAgreement {
            worst_ratio,
            worst_index,
            max_abs_err: self.max_abs_err.max(other.max_abs_err),
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_worked_example() {
        let z = Matrix::from_rows(&[[2.0, 3.0, 4.0]]).unwrap();
        let p = softmax_rows(&z).unwrap();
        // exp(k) / (e² + e³ + e⁴), evaluated independently.
        let expected = [0.09003057317038046, 0.24472847105479764, 0.6652409557748219];
        for (a, b) in p.row(0).iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        let rounded: Vec<f64> = p.row(0).iter().map(|v| (v * 100.0).round() / 100.0).collect();
        assert_eq!(rounded, [0.09, 0.24, 0.67]);
    }

    #[test]
    fn softmax_shift_invariance_is_bitwise() {
        let a = softmax_rows(&Matrix::from_rows(&[[2.0, 3.0, 4.0]]).unwrap()).unwrap();
        let b = softmax_rows(&Matrix::from_rows(&[[-2.0, -1.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn softmax_uniform_and_errors() {
        let p = softmax_rows(&Matrix::zeros(1, 3)).unwrap();
        for &v in p.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-16);
        }
        assert!(softmax_rows(&Matrix::from_raw(1, 2, vec![0.0, f64::INFINITY])).is_err());
        assert!(softmax_rows(&Matrix::zeros(2, 0)).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one_for_large_logits() {
        let z = Matrix::from_rows(&[[700.0, -700.0, 0.0], [1e3, 1e3, 1e3]]).unwrap();
        let p = softmax_rows(&z).unwrap();
        for i in 0..2 {
            let s: f64 = p.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(p.row(i).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        let hi = sigmoid_scalar(40.0);
        assert!(1.0 - hi < 1e-17 && hi <= 1.0);
        // 1 / (1 + e^{-1}) evaluated independently.
        assert!((sigmoid_scalar(1.0) - 0.7310585786300049).abs() < 1e-6);
        for &x in &[700.0, -700.0, 1e308, -1e308] {
            let s = sigmoid_scalar(x);
            assert!(s.is_finite() && (0.0..=1.0).contains(&s));
        }
        for i in -200..=200 {
            let x = i as f64 * 0.173;
            assert!((sigmoid_scalar(x) + sigmoid_scalar(-x) - 1.0).abs() < 1e-15);
        }
        assert!(sigmoid(&Matrix::from_raw(1, 1, vec![f64::NAN])).is_err());
    }

    #[test]
    fn finite_differences_on_simple_functions() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 3.0], FD_STEP).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn finite_differences_report_offending_coordinate() {
        let err = finite_diff_grad(|x| if x[1] > 1.0 { f64::NAN } else { x[0] }, &[0.0, 1.0], 1e-3).unwrap_err();
        assert!(matches!(err, Error::NonFiniteObjective { coordinate: 1, .. }));
        assert!(finite_diff_grad(|x| x[0], &[0.0], 0.0).is_err());
    }
}
