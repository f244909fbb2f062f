//! Stable activations and a central-difference gradient checker.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Softmax of a logit vector, computed with the max-shift so that logits of
/// magnitude up to ~1e300 neither overflow nor produce NaN.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if let Some(v) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidLogits(format!("non-finite logit {v}")));
    }
    Ok(softmax_unchecked(logits))
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    if logits.is_empty() {
        return Vec::new();
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Log-softmax; exact for large negative entries where `softmax().ln()` would
/// return `-inf`.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&v| v - lse).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(sigmoid(x))` without cancellation.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_coordinate: usize,
    pub passed: bool,
}

/// Compares `analytic_grad` against central differences of `f` at `point`.
///
/// The per-coordinate error is `|a - n| / max(1, |a| + |n|)`; the report
/// carries the largest one and passes iff it is at most `tolerance`.
pub fn grad_check<F>(
    f: F,
    analytic_grad: &[f64],
    point: &[f64],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> f64,
{
    if analytic_grad.len() != point.len() {
        return Err(Error::ShapeMismatch(format!(
            "gradient has {} entries, point has {}",
            analytic_grad.len(),
            point.len()
        )));
    }
    if !(step > 0.0) {
        return Err(Error::config("step", "must be positive"));
    }
    let mut x = point.to_vec();
    let mut worst = (0.0_f64, 0_usize);
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let up = f(&x);
        x[i] = orig - step;
        let down = f(&x);
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFiniteEvaluation { coordinate: i });
        }
        let numeric = (up - down) / (2.0 * step);
        let a = analytic_grad[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1.0);
        if err > worst.0 {
            worst = (err, i);
        }
    }
    Ok(GradCheckReport {
        max_relative_error: worst.0,
        worst_coordinate: worst.1,
        passed: worst.0 <= tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        for c in [-7.0, 0.0, 3.5, 900.0] {
            for p in softmax(&[c, c, c]).unwrap() {
                assert!((p - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-15 && p[1] >= 0.0 && p[1] < 1e-300);
        assert!(softmax(&[0.0, f64::NAN]).is_err());
        assert!(softmax(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(0.0), 0.5);
        for x in [0.3, 2.0, 17.0, 40.0] {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
        }
        let tiny = sigmoid(-1000.0);
        assert!((0.0..1e-300).contains(&tiny));
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!((log_sigmoid(-1000.0) + 1000.0).abs() < 1e-9);
        assert!((log_sigmoid(2.0) - sigmoid(2.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn grad_check_square() {
        let f = |x: &[f64]| x[0] * x[0];
        let ok = grad_check(f, &[6.0], &[3.0], 1e-5, 1e-6).unwrap();
        assert!(ok.passed);
        let bad = grad_check(f, &[5.0], &[3.0], 1e-5, 1e-6).unwrap();
        assert!(!bad.passed);
        assert!((bad.max_relative_error - 1.0 / 11.0).abs() < 1e-8);
        assert_eq!(bad.worst_coordinate, 0);
    }

    #[test]
    fn grad_check_reports_non_finite_coordinate() {
        let f = |x: &[f64]| if x[1] > 1.0 { f64::NAN } else { x[0] + x[1] };
        let err = grad_check(f, &[1.0, 1.0], &[0.0, 1.0], 1e-3, 1e-6).unwrap_err();
        assert!(matches!(err, Error::NonFiniteEvaluation { coordinate: 1 }));
    }
}
