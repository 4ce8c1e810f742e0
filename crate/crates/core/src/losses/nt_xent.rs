use crate::embedding::{dot, norm, Matrix};
use crate::error::{Error, Result};

use super::{log_sum_exp, normalize_backward};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NtXentConfig {
    pub temperature: f64,
}

impl Default for NtXentConfig {
    fn default() -> Self {
        Self { temperature: 0.1 }
    }
}

#[derive(Clone, Debug)]
pub struct NtXentOutput {
    pub loss: f64,
    pub grad: Matrix,
}

fn check_pairing(pairing: &[usize], n: usize) -> Result<()> {
    if pairing.len() != n || n % 2 != 0 || n == 0 {
        return Err(Error::BadPairing(pairing.len().min(n)));
    }
    for (i, &j) in pairing.iter().enumerate() {
        if j >= n || j == i || pairing[j] != i {
            return Err(Error::BadPairing(i));
        }
    }
    Ok(())
}

/// Normalized-temperature cross-entropy over `2N` embeddings.
///
/// `pairing[i]` is the positive partner of row `i`; every other row is a
/// negative. Rows need not be unit-norm, cosines are taken internally.
pub fn nt_xent_loss(z: &Matrix, pairing: &[usize], cfg: &NtXentConfig) -> Result<NtXentOutput> {
    let n = z.rows();
    check_pairing(pairing, n)?;
    if !(cfg.temperature > 0.0) {
        return Err(Error::BadConfig("temperature must be positive".into()));
    }
    let norms: Vec<f64> = z.iter_rows().map(norm).collect();
    if let Some(&bad) = norms.iter().find(|&&v| !(v >= 1e-12)) {
        return Err(Error::ZeroNorm { norm: bad });
    }
    let units: Vec<Vec<f64>> = z
        .iter_rows()
        .zip(&norms)
        .map(|(r, nr)| r.iter().map(|v| v / nr).collect())
        .collect();
    let inv_t = 1.0 / cfg.temperature;
    let scale = 1.0 / n as f64;

    let mut loss = 0.0;
    let mut grad_units = vec![vec![0.0; z.cols()]; n];
    let mut logits = vec![0.0; n];
    for i in 0..n {
        for (a, l) in logits.iter_mut().enumerate() {
            *l = if a == i {
                f64::NEG_INFINITY
            } else {
                dot(&units[i], &units[a]) * inv_t
            };
        }
        let lse = log_sum_exp(&logits);
        loss += lse - logits[pairing[i]];
        for a in 0..n {
            if a == i {
                continue;
            }
            let p = (logits[a] - lse).exp();
            let target = if a == pairing[i] { 1.0 } else { 0.0 };
            let dc = scale * inv_t * (p - target);
            for k in 0..z.cols() {
                grad_units[i][k] += dc * units[a][k];
                grad_units[a][k] += dc * units[i][k];
            }
        }
    }
    let mut grad = Matrix::zeros(n, z.cols());
    for i in 0..n {
        let g = normalize_backward(&units[i], norms[i], &grad_units[i]);
        grad.row_mut(i).copy_from_slice(&g);
    }
    Ok(NtXentOutput {
        loss: loss * scale,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_single_pair_is_zero() {
        let z = Matrix::from_rows(&[vec![0.3, -1.0], vec![0.3, -1.0]]).unwrap();
        for t in [0.05, 0.5, 2.0] {
            let out = nt_xent_loss(&z, &[1, 0], &NtXentConfig { temperature: t }).unwrap();
            assert!(out.loss.abs() < 1e-12);
        }
    }

    #[test]
    fn two_orthogonal_pairs() {
        let z = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ])
        .unwrap();
        let out = nt_xent_loss(&z, &[1, 0, 3, 2], &NtXentConfig { temperature: 0.5 }).unwrap();
        // Hand evaluation: -log(e^2 / (e^2 + 2)).
        let e2 = 2f64.exp();
        let expected = -(e2 / (e2 + 2.0)).ln();
        assert!((out.loss - expected).abs() < 1e-12);
        assert!((out.loss - 0.239_544_766_221_884_5).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_pairings() {
        let z = Matrix::from_rows(&[vec![1.0], vec![1.0], vec![1.0], vec![1.0]]).unwrap();
        let cfg = NtXentConfig::default();
        assert!(matches!(nt_xent_loss(&z, &[0, 1, 3, 2], &cfg), Err(Error::BadPairing(0))));
        assert!(matches!(nt_xent_loss(&z, &[1, 2, 3, 0], &cfg), Err(Error::BadPairing(_))));
        assert!(matches!(nt_xent_loss(&z, &[1, 0], &cfg), Err(Error::BadPairing(_))));
        let zero = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert!(matches!(nt_xent_loss(&zero, &[1, 0], &cfg), Err(Error::ZeroNorm { .. })));
    }
}
