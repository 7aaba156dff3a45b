//! Elementwise operations, softmax, and the cross-entropy loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::DenseMatrix;

/// Epsilon added inside logs so a confidently wrong prediction cannot
/// produce an infinite loss.
pub const LOG_EPS: f64 = 1e-12;

/// A probability vector: entries in [0,1] summing to 1 within 1e-9.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::dimension("empty probability vector"));
        }
        let sum: f64 = values.iter().sum();
        if !values.iter().all(|v| (0.0..=1.0 + 1e-12).contains(v)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "not a probability vector (sum {sum:.12})"
            )));
        }
        Ok(ProbVector(values))
    }

    /// One-hot distribution with mass on `index`.
    pub fn one_hot(len: usize, index: usize) -> Result<Self> {
        if index >= len {
            return Err(Error::index(format!("one_hot index {index} >= {len}")));
        }
        let mut v = vec![0.0; len];
        v[index] = 1.0;
        Ok(ProbVector(v))
    }

    pub fn uniform(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::dimension("empty probability vector"));
        }
        Ok(ProbVector(vec![1.0 / len as f64; len]))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        // Ties break to the lowest index.
        let mut best = 0;
        for (i, v) in self.0.iter().enumerate().skip(1) {
            if *v > self.0[best] {
                best = i;
            }
        }
        best
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }
}

/// Numerically stable softmax (max subtraction), invariant under adding a
/// constant to all logits.
pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    if logits.is_empty() {
        return Err(Error::dimension("softmax of empty vector"));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::config("softmax input not finite"));
    }
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    debug_assert!(out.iter().all(|v| v.is_finite()));
    Ok(ProbVector(out))
}

/// −log(q[target] + ε), clamped into [0, ∞) so a certain prediction costs
/// exactly zero.
pub fn cross_entropy(q: &ProbVector, target: usize) -> Result<f64> {
    if target >= q.len() {
        return Err(Error::index(format!(
            "cross_entropy target {target} >= {}",
            q.len()
        )));
    }
    Ok(-(q.values()[target] + LOG_EPS).min(1.0).ln())
}

/// Gradient of cross_entropy(softmax(z), target) w.r.t. the logits z.
pub fn softmax_cross_entropy_grad(q: &ProbVector, target: usize) -> Vec<f64> {
    let mut g = q.values().to_vec();
    g[target] -= 1.0;
    g
}

/// Backward through a softmax given the output q and upstream dL/dq.
/// dL/dz_i = q_i (g_i − Σ_j g_j q_j)
pub fn softmax_backward(q: &ProbVector, upstream: &[f64]) -> Vec<f64> {
    debug_assert_eq!(q.len(), upstream.len());
    let dot: f64 = q.values().iter().zip(upstream).map(|(a, b)| a * b).sum();
    q.values()
        .iter()
        .zip(upstream)
        .map(|(qi, gi)| qi * (gi - dot))
        .collect()
}

/// W x + b
pub fn affine(x: &[f64], w: &DenseMatrix, b: &[f64]) -> Result<Vec<f64>> {
    if w.cols() != x.len() {
        return Err(Error::dimension(format!(
            "affine: W has {} cols, x has {}",
            w.cols(),
            x.len()
        )));
    }
    if w.rows() != b.len() {
        return Err(Error::dimension(format!(
            "affine: W has {} rows, b has {}",
            w.rows(),
            b.len()
        )));
    }
    let mut y = b.to_vec();
    w.matvec_add(x, &mut y);
    debug_assert!(y.iter().all(|v| v.is_finite()));
    Ok(y)
}

/// Elementwise max(0, x).
pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

/// Upstream gradient masked by the rectifier (zero where pre-activation ≤ 0).
pub fn relu_backward(pre: &[f64], upstream: &[f64]) -> Vec<f64> {
    pre.iter()
        .zip(upstream)
        .map(|(p, g)| if *p > 0.0 { *g } else { 0.0 })
        .collect()
}

/// −Σ p ln p with 0·ln 0 = 0, in nats. Accepts any flattened distribution.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter()
        .filter(|v| **v > 0.0)
        .map(|v| -v * v.ln())
        .sum()
}

/// 1 / (1 + e^{−x})
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn softmax_uniform_case() {
        let q = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in q.values() {
            assert_close(*v, 1.0 / 3.0, 1e-15);
        }
    }

    #[test]
    fn softmax_analytic_case() {
        let q = softmax(&[2.0_f64.ln(), 0.0]).unwrap();
        assert_close(q.values()[0], 2.0 / 3.0, 1e-15);
        assert_close(q.values()[1], 1.0 / 3.0, 1e-15);
    }

    #[test]
    fn softmax_large_magnitude_is_stable() {
        let q = softmax(&[1000.0, 0.0]).unwrap();
        assert_close(q.values()[0], 1.0, 1e-12);
        assert_close(q.values()[1], 0.0, 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let logits = [0.3, -1.2, 2.5, 0.0, 7.7];
        let base = softmax(&logits).unwrap();
        for c in [-100.0, -1.0, 0.5, 100.0] {
            let shifted: Vec<f64> = logits.iter().map(|z| z + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in base.values().iter().zip(q.values()) {
                assert_close(*a, *b, 1e-12);
            }
        }
    }

    #[test]
    fn softmax_empty_is_error() {
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let certain = ProbVector::new(vec![1.0, 0.0]).unwrap();
        assert_close(cross_entropy(&certain, 0).unwrap(), 0.0, 1e-12);

        let uniform = ProbVector::uniform(4).unwrap();
        assert_close(cross_entropy(&uniform, 2).unwrap(), 4.0_f64.ln(), 1e-9);

        let q = ProbVector::new(vec![0.25, 0.75]).unwrap();
        assert_close(cross_entropy(&q, 1).unwrap(), -(0.75_f64.ln()), 1e-9);

        assert!(cross_entropy(&q, 2).is_err());
    }

    #[test]
    fn affine_cases() {
        let w = DenseMatrix::identity(3);
        assert_eq!(
            affine(&[1.0, 2.0, 3.0], &w, &[0.0; 3]).unwrap(),
            vec![1.0, 2.0, 3.0]
        );

        let zero = DenseMatrix::zeros(2, 3);
        assert_eq!(
            affine(&[9.0, 9.0, 9.0], &zero, &[5.0, 7.0]).unwrap(),
            vec![5.0, 7.0]
        );

        let w = DenseMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, -1.0]]).unwrap();
        assert_eq!(affine(&[3.0, 4.0], &w, &[0.0, 0.0]).unwrap(), vec![7.0, -1.0]);

        assert!(affine(&[1.0], &w, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn relu_cases() {
        assert_eq!(relu(&[-1.0, 0.0, 2.0]), vec![0.0, 0.0, 2.0]);
        assert_eq!(relu(&[-3.0, -0.1]), vec![0.0, 0.0]);
        assert_eq!(relu(&[0.5, 4.0]), vec![0.5, 4.0]);
    }

    #[test]
    fn entropy_cases() {
        assert_close(entropy(&[0.25; 4]), 4.0_f64.ln(), 1e-12);
        assert_close(entropy(&[0.0, 1.0, 0.0]), 0.0, 1e-12);
        assert_close(entropy(&[0.5, 0.25, 0.25]), 1.5 * 2.0_f64.ln(), 1e-12);
    }

    #[test]
    fn argmax_ties_break_low() {
        let q = ProbVector::new(vec![0.4, 0.4, 0.2]).unwrap();
        assert_eq!(q.argmax(), 0);
    }
}
