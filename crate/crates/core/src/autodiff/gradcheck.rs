//! Central finite-difference gradient checks.

use super::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic - numeric| / max(1, |numeric|)
    pub max_error: f64,
    pub worst_index: Option<usize>,
    /// first coordinate where either gradient was NaN or infinite
    pub non_finite: Option<usize>,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.non_finite.is_none() && self.max_error <= self.tol
    }
}

/// Compares an analytic gradient against central differences of `value`.
pub fn check_gradient(
    mut value: impl FnMut(&[f64]) -> Result<f64>,
    analytic: &[f64],
    point: &[f64],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    assert!(h > 0.0, "finite-difference step must be positive");
    assert_eq!(analytic.len(), point.len());
    let mut x = point.to_vec();
    let mut report = GradCheckReport {
        max_error: 0.0,
        worst_index: None,
        non_finite: None,
        checked: 0,
        tol,
    };
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = value(&x)?;
        x[i] = orig - h;
        let minus = value(&x)?;
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        report.checked += 1;
        if !numeric.is_finite() || !analytic[i].is_finite() {
            report.non_finite.get_or_insert(i);
            continue;
        }
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        if err > report.max_error || report.worst_index.is_none() {
            report.max_error = err;
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}

/// Gradient check of a scalar function built on a fresh graph.
///
/// `f` receives the graph and a parameter leaf holding the evaluation
/// point, and must return a single-element node.
pub fn gradient_check(
    f: impl Fn(&mut Graph, Var) -> Result<Var>,
    point: &Tensor,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let out = f(&mut g, x)?;
    let analytic = g.backward(out)?.get(x);
    let shape = point.shape().to_vec();
    check_gradient(
        |p| {
            let mut g = Graph::new();
            let x = g.param(Tensor::new(shape.clone(), p.to_vec())?);
            let out = f(&mut g, x)?;
            Ok(g.value(out).data()[0])
        },
        analytic.data(),
        point.data(),
        h,
        tol,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_sum_has_zero_error() {
        let p = Tensor::new(vec![4], vec![0.3, -1.0, 2.0, 5.0]).unwrap();
        let r = gradient_check(|g, x| g.sum(x), &p, 1e-5, 1e-9).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn wrong_backward_is_caught() {
        // f(x) = sum x^2, but claim the gradient is x
        let point = [0.5, -1.5, 2.0];
        let wrong: Vec<f64> = point.to_vec();
        let r = check_gradient(
            |p| Ok(p.iter().map(|v| v * v).sum()),
            &wrong,
            &point,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!r.passed());
        assert!((r.max_error - 0.5).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn non_finite_is_reported_with_index() {
        let point = [1.0, 2.0];
        let analytic = [2.0, f64::NAN];
        let r = check_gradient(|p| Ok(p[0] * p[0] + p[1]), &analytic, &point, 1e-5, 1e-4).unwrap();
        assert_eq!(r.non_finite, Some(1));
        assert!(!r.passed());
    }
}
