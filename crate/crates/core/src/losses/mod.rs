//! Training objectives as pure functions returning values and gradients.

mod aam;
mod dino;
mod label_correction;
mod nt_xent;

pub use aam::{aam_softmax_loss, cosine_logits, AamConfig, AamOutput};
pub use dino::{
    dino_center_update, dino_loss, ema_momentum_schedule, ema_update, DinoConfig, DinoOutput,
    DinoRegularizer, NoRegularizer,
};
pub use label_correction::{lc_loss, lc_soft_target, LcOutput};
pub use nt_xent::{nt_xent_loss, NtXentConfig, NtXentOutput};

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}

/// Backpropagates a gradient on `v / |v|` to a gradient on `v`.
pub(crate) fn normalize_backward(unit: &[f64], norm: f64, grad_unit: &[f64]) -> Vec<f64> {
    let proj: f64 = unit.iter().zip(grad_unit).map(|(u, g)| u * g).sum();
    unit.iter()
        .zip(grad_unit)
        .map(|(u, g)| (g - proj * u) / norm)
        .collect()
}

pub(crate) fn check_distribution(p: &[f64]) -> crate::Result<()> {
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || p.iter().any(|&v| !(v >= 0.0)) {
        return Err(crate::Error::NotADistribution { sum });
    }
    Ok(())
}
