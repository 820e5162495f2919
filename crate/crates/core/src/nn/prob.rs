//! Softmax, entropy and cross-entropy over class distributions.
//!
//! All logarithms are natural, so `cross_entropy(p, q) = H(p) + KL(p ‖ q)`
//! holds exactly up to rounding.

use crate::error::{Error, Result};
use crate::graph::softmax_in_place;
use crate::tensor::Tensor;

/// Tolerance on `Σ p = 1` accepted by the distribution functions.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// Probability floor used by [`cross_entropy`] when `q` has a zero where
/// `p` has mass.
pub const PROB_FLOOR: f64 = 1e-12;

/// Rank-1 class scores with at least two finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Tensor);

impl LogitVector {
    pub fn new(scores: Tensor) -> Result<Self> {
        if scores.dims().len() != 1 || scores.len() < 2 {
            return Err(Error::Distribution(format!(
                "logits need rank 1 and length >= 2, got shape {}",
                scores.shape()
            )));
        }
        if !scores.all_finite() {
            return Err(Error::Distribution("logits must be finite".into()));
        }
        Ok(LogitVector(scores))
    }

    pub fn from_slice(scores: &[f64]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Distribution("empty logit vector".into()));
        }
        Self::new(Tensor::vector(scores)?)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn values(&self) -> &[f64] {
        self.0.values()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// `q_i = exp(z_i - max z) / Σ_j exp(z_j - max z)`.
pub fn stable_softmax(z: &LogitVector) -> Vec<f64> {
    let mut out = z.values().to_vec();
    softmax_in_place(&mut out);
    out
}

fn check_simplex(name: &str, p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Distribution(format!("{name} is empty")));
    }
    if let Some((i, v)) = p.iter().enumerate().find(|(_, v)| v.is_nan() || **v < 0.0) {
        return Err(Error::Distribution(format!(
            "{name}[{i}] = {v} is negative or NaN"
        )));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Distribution(format!("{name} sums to {sum}, not 1")));
    }
    Ok(())
}

/// `-Σ p ln p` with `0 ln 0 = 0`.
pub fn shannon_entropy(p: &[f64]) -> Result<f64> {
    check_simplex("p", p)?;
    Ok(p.iter()
        .map(|&v| if v > 0.0 { -v * v.ln() } else { 0.0 })
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEntropy {
    pub value: f64,
    /// True when some `q_i` was raised to [`PROB_FLOOR`] because `p_i > 0`.
    pub clamped: bool,
}

/// `-Σ p_i ln q_i`.
pub fn cross_entropy(p: &[f64], q: &[f64]) -> Result<CrossEntropy> {
    check_pair(p, q)?;
    let mut clamped = false;
    let mut value = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        let q_eff = if qi < PROB_FLOOR {
            clamped = true;
            PROB_FLOOR
        } else {
            qi
        };
        value -= pi * q_eff.ln();
    }
    Ok(CrossEntropy { value, clamped })
}

/// `Σ p_i ln(p_i / q_i)`; terms with `p_i = 0` contribute zero.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            total += pi * (pi / qi.max(PROB_FLOOR)).ln();
        }
    }
    Ok(total)
}

fn check_pair(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::Distribution(format!(
            "length mismatch: p has {}, q has {}",
            p.len(),
            q.len()
        )));
    }
    check_simplex("p", p)?;
    check_simplex("q", q)
}

/// Index of the largest entry, ties to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn one_hot(class: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[class] = 1.0;
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn softmax_symmetric() {
        let z = LogitVector::from_slice(&[1.7, 1.7, 1.7]).unwrap();
        for q in stable_softmax(&z) {
            assert_abs_diff_eq!(q, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn softmax_huge_logits() {
        let z = LogitVector::from_slice(&[1e4, 0.0]).unwrap();
        let q = stable_softmax(&z);
        assert!(q.iter().all(|v| v.is_finite()));
        assert_abs_diff_eq!(q.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        assert!(q[0] > 1.0 - 1e-12);
    }

    #[test]
    fn softmax_rejects_short_vectors() {
        assert!(LogitVector::from_slice(&[]).is_err());
        assert!(LogitVector::from_slice(&[1.0]).is_err());
        assert!(LogitVector::from_slice(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(shannon_entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(
            shannon_entropy(&[0.25; 4]).unwrap(),
            4f64.ln(),
            epsilon = 1e-12
        );
        // -(0.8808 ln 0.8808 + 0.1192 ln 0.1192) = 0.36528...
        assert_abs_diff_eq!(
            shannon_entropy(&[0.8808, 0.1192]).unwrap(),
            0.3653,
            epsilon = 1e-4
        );
        assert!(shannon_entropy(&[1.2, -0.2]).is_err());
        assert!(shannon_entropy(&[0.5, 0.4]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let p = one_hot(2, 4);
        assert_eq!(cross_entropy(&p, &one_hot(2, 4)).unwrap().value, 0.0);
        let ce = cross_entropy(&p, &[0.25; 4]).unwrap();
        assert_abs_diff_eq!(ce.value, 4f64.ln(), epsilon = 1e-12);
        assert!(!ce.clamped);
    }

    #[test]
    fn cross_entropy_flags_zero_mass() {
        let ce = cross_entropy(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!(ce.clamped);
        assert_abs_diff_eq!(ce.value, -0.5 * PROB_FLOOR.ln(), epsilon = 1e-9);
    }

    #[test]
    fn argmax_ties_low() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
    }
}
