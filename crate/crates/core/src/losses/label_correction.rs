//! Label correction: sharpened clean-view targets and the soft cross-entropy.

use crate::error::Result;

use super::{check_distribution, log_sum_exp};

/// Sharpens `p` to `p^(1/eps) / sum_j p_j^(1/eps)`.
pub fn lc_soft_target(probs_clean: &[f64], sharpen: f64) -> Result<Vec<f64>> {
    check_distribution(probs_clean)?;
    if !(sharpen > 0.0) {
        return Err(crate::Error::BadConfig("sharpen must be positive".into()));
    }
    let logs: Vec<f64> = probs_clean
        .iter()
        .map(|&p| if p > 0.0 { p.ln() / sharpen } else { f64::NEG_INFINITY })
        .collect();
    let lse = log_sum_exp(&logs);
    Ok(logs.iter().map(|l| (l - lse).exp()).collect())
}

#[derive(Clone, Debug)]
pub struct LcOutput {
    pub loss: f64,
    /// Gradient with respect to the logits that produced `probs_augmented`
    /// through a softmax: `p - target`.
    pub grad_logits: Vec<f64>,
}

pub fn lc_loss(probs_augmented: &[f64], soft_target: &[f64]) -> Result<LcOutput> {
    check_distribution(probs_augmented)?;
    check_distribution(soft_target)?;
    if probs_augmented.len() != soft_target.len() {
        return Err(crate::Error::DimMismatch {
            expected: soft_target.len(),
            got: probs_augmented.len(),
        });
    }
    let loss = probs_augmented
        .iter()
        .zip(soft_target)
        .filter(|(_, &t)| t > 0.0)
        .map(|(&p, &t)| -t * p.max(f64::MIN_POSITIVE).ln())
        .sum();
    let grad_logits = probs_augmented
        .iter()
        .zip(soft_target)
        .map(|(p, t)| p - t)
        .collect();
    Ok(LcOutput { loss, grad_logits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    #[test]
    fn sharpen_fixed_points() {
        assert_eq!(lc_soft_target(&[0.0, 1.0, 0.0], 0.1).unwrap(), vec![0.0, 1.0, 0.0]);
        let u = lc_soft_target(&[0.25; 4], 0.1).unwrap();
        assert!(u.iter().all(|v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn sharpen_two_class() {
        let out = lc_soft_target(&[0.6, 0.4], 0.1).unwrap();
        // Scalar oracle: 0.6^10 / (0.6^10 + 0.4^10).
        let (a, b) = (0.6f64.powi(10), 0.4f64.powi(10));
        assert!((out[0] - a / (a + b)).abs() < 1e-12);
        assert!((out[0] - 0.982_954_072_545_070_2).abs() < 1e-12);
        assert!((out[1] - 0.017_045_927_454_929_85).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_distributions() {
        assert!(matches!(lc_soft_target(&[0.5, 0.6], 0.1), Err(Error::NotADistribution { .. })));
        assert!(matches!(lc_loss(&[0.5, 0.5], &[0.9, 0.2]), Err(Error::NotADistribution { .. })));
    }

    #[test]
    fn lc_loss_examples() {
        assert_eq!(lc_loss(&[0.0, 1.0], &[0.0, 1.0]).unwrap().loss, 0.0);
        let out = lc_loss(&[0.5, 0.25, 0.25], &[1.0, 0.0, 0.0]).unwrap();
        assert!((out.loss - 2f64.ln()).abs() < 1e-12);
        assert_eq!(out.grad_logits, vec![-0.5, 0.25, 0.25]);
    }
}
