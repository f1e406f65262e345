use alloc::vec::Vec;

use crate::error::ensure;
use crate::{Error, Result};

/// A point on the probability simplex: non-negative entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(values: Vec<f64>) -> Result<Self> {
        ensure(!values.is_empty(), || "probability vector must be nonempty".into())?;
        ensure(values.iter().all(|v| v.is_finite() && *v >= 0.0), || {
            "probability entries must be finite and non-negative".into()
        })?;
        let s: f64 = values.iter().sum();
        ensure(libm::fabs(s - 1.0) <= Self::SUM_TOLERANCE, || {
            alloc::format!("probability entries sum to {s}, not 1")
        })?;
        Ok(Self(values))
    }

    /// Wraps values produced by this module's own normalizers.
    pub(crate) fn from_normalized(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl core::ops::Index<usize> for ProbVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

fn check_input(z: &[f64], what: &str) -> Result<()> {
    ensure(!z.is_empty(), || alloc::format!("{what} of an empty vector"))?;
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(alloc::format!("{what} input")));
    }
    Ok(())
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = z.iter().map(|&v| libm::exp(v - m)).sum();
    m + libm::log(s)
}

/// Max-shifted softmax, overwriting `z`. No-op on an empty slice.
pub fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = libm::exp(*v - m);
        s += *v;
    }
    for v in z.iter_mut() {
        *v /= s;
    }
}

pub fn softmax(z: &[f64]) -> Result<ProbVector> {
    check_input(z, "softmax")?;
    let mut out = z.to_vec();
    softmax_in_place(&mut out);
    Ok(ProbVector::from_normalized(out))
}

/// Vector-Jacobian product of softmax: given `p = softmax(z)` and `dL/dp`,
/// returns `dL/dz`.
pub fn softmax_backward(p: &[f64], grad_p: &[f64]) -> Vec<f64> {
    let inner: f64 = p.iter().zip(grad_p).map(|(a, b)| a * b).sum();
    p.iter().zip(grad_p).map(|(&pi, &gi)| pi * (gi - inner)).collect()
}

/// Threshold `τ` and support size of the simplex projection of `z`.
///
/// Sort descending, take the largest `k` with `1 + k·z₍ₖ₎ > Σ_{j≤k} z₍ⱼ₎`,
/// then `τ = (Σ_{j≤k} z₍ⱼ₎ − 1) / k`.
pub fn sparsemax_threshold(z: &[f64]) -> (f64, usize) {
    let mut sorted = z.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut support = 0;
    let mut support_sum = 0.0;
    for (idx, &v) in sorted.iter().enumerate() {
        cumsum += v;
        let k = (idx + 1) as f64;
        if 1.0 + k * v > cumsum {
            support = idx + 1;
            support_sum = cumsum;
        }
    }
    ((support_sum - 1.0) / support as f64, support)
}

/// Euclidean projection onto the simplex, overwriting `z`.
pub fn sparsemax_in_place(z: &mut [f64]) {
    let (tau, support) = sparsemax_threshold(z);
    for v in z.iter_mut() {
        let d = *v - tau;
        *v = if d > 0.0 {
            if support == 1 { 1.0 } else { d }
        } else {
            0.0
        };
    }
}

pub fn sparsemax(z: &[f64]) -> Result<ProbVector> {
    check_input(z, "sparsemax")?;
    let mut out = z.to_vec();
    sparsemax_in_place(&mut out);
    Ok(ProbVector::from_normalized(out))
}

/// Vector-Jacobian product of sparsemax at output `p`: on the support the
/// gradient is centred by its support mean, off the support it is zero.
pub fn sparsemax_backward(p: &[f64], grad_p: &[f64]) -> Vec<f64> {
    let mut n = 0usize;
    let mut s = 0.0;
    for (&pi, &gi) in p.iter().zip(grad_p) {
        if pi > 0.0 {
            n += 1;
            s += gi;
        }
    }
    let mean = if n > 0 { s / n as f64 } else { 0.0 };
    p.iter()
        .zip(grad_p)
        .map(|(&pi, &gi)| if pi > 0.0 { gi - mean } else { 0.0 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| libm::fabs(x - y) <= tol)
    }

    #[test]
    fn softmax_examples() {
        assert!(close(softmax(&[0.0, 0.0]).unwrap().as_slice(), &[0.5, 0.5], 1e-15));
        let p = softmax(&[libm::log(2.0), 0.0]).unwrap();
        assert!(close(p.as_slice(), &[2.0 / 3.0, 1.0 / 3.0], 1e-15));
    }

    #[test]
    fn empty_inputs_are_contract_errors() {
        assert!(matches!(softmax(&[]), Err(Error::Contract(_))));
        assert!(matches!(sparsemax(&[]), Err(Error::Contract(_))));
        assert!(matches!(softmax(&[f64::NAN]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn sparsemax_examples() {
        assert!(close(sparsemax(&[0.5, 0.5]).unwrap().as_slice(), &[0.5, 0.5], 1e-15));
        assert_eq!(sparsemax(&[2.0, 0.0]).unwrap().as_slice(), &[1.0, 0.0]);
        assert_eq!(sparsemax_threshold(&[2.0, 0.0]).0, 1.0);
        // oracle value in tests/numkit_oracles.rs
        assert!(close(sparsemax(&[1.1, 1.0, -5.0]).unwrap().as_slice(), &[0.55, 0.45, 0.0], 1e-12));
    }

    #[test]
    fn sparsemax_singleton_is_one() {
        assert_eq!(sparsemax(&[-3.7]).unwrap().as_slice(), &[1.0]);
    }

    #[test]
    fn sparsemax_backward_centres_on_support() {
        let p = vec![0.6, 0.4, 0.0];
        let g = sparsemax_backward(&p, &[1.0, 3.0, 7.0]);
        assert_eq!(g, vec![-1.0, 1.0, 0.0]);
    }

    #[test]
    fn prob_vector_validates() {
        assert!(ProbVector::new(vec![0.25, 0.75]).is_ok());
        assert!(ProbVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbVector::new(vec![-0.1, 1.1]).is_err());
    }
}
