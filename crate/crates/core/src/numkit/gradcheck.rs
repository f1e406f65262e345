use alloc::vec::Vec;

use crate::error::ensure;
use crate::{Error, Result};

/// Outcome of a central-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// `max_i |a_i − n_i| / (|a_i| + |n_i| + 1e-8)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares the analytic gradient returned by `f` at `params` against central
/// differences with step `eps`, element by element.
///
/// `f` maps a flat parameter vector to `(value, gradient)`; only the value is
/// used at the perturbed points.
pub fn grad_check<F>(mut f: F, params: &[f64], eps: f64) -> Result<GradCheck>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    ensure(eps > 0.0, || "grad_check eps must be positive".into())?;
    let (value, analytic) = f(params)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("objective at base point".into()));
    }
    ensure(analytic.len() == params.len(), || {
        alloc::format!("gradient has {} entries for {} params", analytic.len(), params.len())
    })?;
    let mut probe = params.to_vec();
    let mut report = GradCheck { max_rel_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0 };
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let (plus, _) = f(&probe)?;
        probe[i] = orig - eps;
        let (minus, _) = f(&probe)?;
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(alloc::format!("objective perturbed at index {i}")));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i];
        let rel = libm::fabs(a - numeric) / (libm::fabs(a) + libm::fabs(numeric) + 1e-8);
        if rel > report.max_rel_error {
            report = GradCheck { max_rel_error: rel, worst_index: i, analytic: a, numeric };
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn quadratic_is_exact() {
        let f = |x: &[f64]| Ok((x.iter().map(|v| v * v).sum(), x.iter().map(|v| 2.0 * v).collect()));
        let r = grad_check(f, &[1.0, 2.0], 1e-4).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let f = |x: &[f64]| Ok((x[0] * x[0], vec![x[0]]));
        let r = grad_check(f, &[1.5], 1e-4).unwrap();
        assert!(r.max_rel_error > 0.3);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let f = |x: &[f64]| Ok((libm::log(x[0]), vec![1.0 / x[0]]));
        assert!(grad_check(f, &[1e-5], 1e-3).is_err());
    }
}
