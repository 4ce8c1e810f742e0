//! Additive angular margin softmax.

use crate::embedding::{dot, norm, Matrix};
use crate::error::{Error, Result};

use super::{log_sum_exp, normalize_backward, softmax};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AamConfig {
    /// Additive angle on the target class, in radians.
    pub margin: f64,
    pub scale: f64,
    pub num_classes: usize,
}

impl AamConfig {
    pub fn new(num_classes: usize) -> Self {
        Self {
            margin: 0.2,
            scale: 30.0,
            num_classes,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AamOutput {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    pub per_sample: Vec<f64>,
    /// Gradient of the mean loss.
    pub grad_embeddings: Matrix,
    pub grad_weights: Matrix,
    /// Margin-free posteriors `softmax(s * cos)`, B x C.
    pub probs: Matrix,
}

struct Normalized {
    units: Vec<Vec<f64>>,
    norms: Vec<f64>,
}

fn normalize_rows(m: &Matrix) -> Result<Normalized> {
    let mut units = Vec::with_capacity(m.rows());
    let mut norms = Vec::with_capacity(m.rows());
    for r in m.iter_rows() {
        let n = norm(r);
        if !(n >= 1e-12) {
            return Err(Error::ZeroNorm { norm: n });
        }
        units.push(r.iter().map(|v| v / n).collect());
        norms.push(n);
    }
    Ok(Normalized { units, norms })
}

/// Target-class logit `cos(theta + m)` and its derivative in `cos(theta)`.
///
/// Past `theta + m > pi` the penalty is linearised as `cos(theta) - m sin(m)`
/// so the logit stays monotone in the angle.
fn margin_cos(c: f64, margin: f64) -> (f64, f64) {
    if margin == 0.0 {
        return (c, 1.0);
    }
    let threshold = (std::f64::consts::PI - margin).cos();
    if c > threshold {
        let sin = (1.0 - c * c).max(0.0).sqrt().max(1e-12);
        let (cm, sm) = (margin.cos(), margin.sin());
        (c * cm - sin * sm, cm + sm * c / sin)
    } else {
        (c - margin.sin() * margin, 1.0)
    }
}

/// Scaled cosine logits `s * cos(e_j, w_c)` without any margin.
pub fn cosine_logits(embeddings: &Matrix, weights: &Matrix, scale: f64) -> Result<Matrix> {
    if embeddings.cols() != weights.cols() {
        return Err(Error::DimMismatch {
            expected: weights.cols(),
            got: embeddings.cols(),
        });
    }
    let e = normalize_rows(embeddings)?;
    let w = normalize_rows(weights)?;
    let mut out = Matrix::zeros(embeddings.rows(), weights.rows());
    for (j, ej) in e.units.iter().enumerate() {
        for (c, wc) in w.units.iter().enumerate() {
            out.row_mut(j)[c] = scale * dot(ej, wc);
        }
    }
    Ok(out)
}

pub fn aam_softmax_loss(
    embeddings: &Matrix,
    weights: &Matrix,
    labels: &[usize],
    cfg: &AamConfig,
) -> Result<AamOutput> {
    let (b, c) = (embeddings.rows(), weights.rows());
    if c != cfg.num_classes {
        return Err(Error::ShapeMismatch(format!(
            "{c} weight rows for {} classes",
            cfg.num_classes
        )));
    }
    if embeddings.cols() != weights.cols() {
        return Err(Error::DimMismatch {
            expected: weights.cols(),
            got: embeddings.cols(),
        });
    }
    if labels.len() != b {
        return Err(Error::LengthMismatch {
            left: labels.len(),
            right: b,
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            num_classes: c,
        });
    }
    if !(cfg.scale > 0.0 && cfg.margin >= 0.0) {
        return Err(Error::BadConfig("AAM needs scale > 0 and margin >= 0".into()));
    }
    let e = normalize_rows(embeddings)?;
    let w = normalize_rows(weights)?;
    let d = embeddings.cols();
    let inv_b = 1.0 / b.max(1) as f64;

    let mut per_sample = Vec::with_capacity(b);
    let mut probs = Matrix::zeros(b, c);
    let mut grad_e_units = vec![vec![0.0; d]; b];
    let mut grad_w_units = vec![vec![0.0; d]; c];
    let mut cosines = vec![0.0; c];
    let mut logits = vec![0.0; c];
    for j in 0..b {
        let y = labels[j];
        for (k, wk) in w.units.iter().enumerate() {
            cosines[k] = dot(&e.units[j], wk);
            logits[k] = cfg.scale * cosines[k];
        }
        probs.row_mut(j).copy_from_slice(&softmax(&logits));
        let (phi, dphi) = margin_cos(cosines[y], cfg.margin);
        logits[y] = cfg.scale * phi;
        let lse = log_sum_exp(&logits);
        per_sample.push(lse - logits[y]);
        for k in 0..c {
            let q = (logits[k] - lse).exp();
            let dlogit = inv_b * (q - if k == y { 1.0 } else { 0.0 });
            let dcos = dlogit * cfg.scale * if k == y { dphi } else { 1.0 };
            for t in 0..d {
                grad_e_units[j][t] += dcos * w.units[k][t];
                grad_w_units[k][t] += dcos * e.units[j][t];
            }
        }
    }

    let mut grad_embeddings = Matrix::zeros(b, d);
    for j in 0..b {
        let g = normalize_backward(&e.units[j], e.norms[j], &grad_e_units[j]);
        grad_embeddings.row_mut(j).copy_from_slice(&g);
    }
    let mut grad_weights = Matrix::zeros(c, d);
    for k in 0..c {
        let g = normalize_backward(&w.units[k], w.norms[k], &grad_w_units[k]);
        grad_weights.row_mut(k).copy_from_slice(&g);
    }
    let loss = per_sample.iter().sum::<f64>() * inv_b;
    Ok(AamOutput {
        loss,
        per_sample,
        grad_embeddings,
        grad_weights,
        probs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_class_has_zero_loss() {
        let e = Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        let w = Matrix::from_rows(&[vec![0.3, 0.3]]).unwrap();
        let out = aam_softmax_loss(&e, &w, &[0, 0], &AamConfig::new(1)).unwrap();
        assert!(out.loss.abs() < 1e-12);
        assert!(out.grad_embeddings.as_slice().iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn label_range_checked() {
        let e = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let w = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(
            aam_softmax_loss(&e, &w, &[2], &AamConfig::new(2)),
            Err(Error::LabelOutOfRange { label: 2, .. })
        ));
        let z = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(matches!(
            aam_softmax_loss(&z, &w, &[0], &AamConfig::new(2)),
            Err(Error::ZeroNorm { .. })
        ));
    }

    #[test]
    fn margin_branches_are_continuous_in_value_near_zero_margin() {
        let (v, d) = margin_cos(0.3, 0.0);
        assert_eq!((v, d), (0.3, 1.0));
        let (v, _) = margin_cos(-0.999, 0.2);
        assert!((v - (-0.999 - 0.2f64.sin() * 0.2)).abs() < 1e-15);
        let (v, _) = margin_cos(0.5, 0.2);
        assert!((v - (0.5f64.acos() + 0.2).cos()).abs() < 1e-12);
    }
}
