//! Two-component 1-D Gaussian mixture fitted by EM.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::log_sum_exp;
use crate::rng;

pub const VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GmmFitConfig {
    pub max_iters: usize,
    /// Converged once the log-likelihood gain drops below this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for GmmFitConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            tol: 1e-10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gmm1D {
    pub weights: [f64; 2],
    /// Ascending after a fit.
    pub means: [f64; 2],
    pub variances: [f64; 2],
    pub log_likelihood: f64,
    pub em_iterations: usize,
    /// Log-likelihood at each E-step.
    #[serde(skip)]
    pub ll_history: Vec<f64>,
}

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mean) * (x - mean) / var)
}

impl Gmm1D {
    pub fn std_devs(&self) -> [f64; 2] {
        [self.variances[0].sqrt(), self.variances[1].sqrt()]
    }

    /// Weighted density `w_k N(x; mu_k, var_k)` of one component.
    pub fn component_density(&self, k: usize, x: f64) -> f64 {
        self.weights[k] * log_normal(x, self.means[k], self.variances[k]).exp()
    }

    /// Ashman's D: `sqrt(2) |mu_1 - mu_0| / sqrt(var_0 + var_1)`.
    /// Values above 2 indicate a clean two-mode split.
    pub fn separation(&self) -> f64 {
        std::f64::consts::SQRT_2 * (self.means[1] - self.means[0]).abs()
            / (self.variances[0] + self.variances[1]).sqrt()
    }

    fn sorted(mut self) -> Self {
        if self.means[0] > self.means[1] {
            self.weights.swap(0, 1);
            self.means.swap(0, 1);
            self.variances.swap(0, 1);
        }
        self
    }
}

/// Linear-interpolated percentile of sorted data, `q` in `[0, 1]`.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Fits two components starting from the 25th/75th percentiles, the pooled
/// variance and equal weights.
pub fn gmm_fit_em(losses: &[f64], cfg: &GmmFitConfig) -> Result<Gmm1D> {
    let n = losses.len();
    if n < 4 {
        return Err(Error::TooFewSamples { needed: 4, have: n });
    }
    if let Some(i) = losses.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("loss {i}")));
    }
    let mut sorted = losses.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted[0] == sorted[n - 1] {
        return Err(Error::DegenerateData(sorted[0]));
    }
    let nf = n as f64;
    let mean = losses.iter().sum::<f64>() / nf;
    let var = (losses.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / nf).max(VARIANCE_FLOOR);
    let (mut m0, mut m1) = (percentile(&sorted, 0.25), percentile(&sorted, 0.75));
    if m0 == m1 {
        // Heavy ties at the quartiles: seed the means from two distinct samples.
        let mut r = rng::stream(cfg.seed, &[0x676d_6d]);
        loop {
            let (a, b) = (losses[r.random_range(0..n)], losses[r.random_range(0..n)]);
            if a != b {
                (m0, m1) = (a.min(b), a.max(b));
                break;
            }
        }
    }

    let mut g = Gmm1D {
        weights: [0.5, 0.5],
        means: [m0, m1],
        variances: [var, var],
        log_likelihood: f64::NEG_INFINITY,
        em_iterations: 0,
        ll_history: Vec::new(),
    };
    let mut resp = vec![[0.0; 2]; n];
    for _ in 0..cfg.max_iters {
        // E-step.
        let mut ll = 0.0;
        for (x, r) in losses.iter().zip(resp.iter_mut()) {
            let lp = [
                g.weights[0].ln() + log_normal(*x, g.means[0], g.variances[0]),
                g.weights[1].ln() + log_normal(*x, g.means[1], g.variances[1]),
            ];
            let lse = log_sum_exp(&lp);
            ll += lse;
            *r = [(lp[0] - lse).exp(), (lp[1] - lse).exp()];
        }
        if let Some(&prev) = g.ll_history.last() {
            assert!(
                ll >= prev - 1e-10 * prev.abs().max(1.0),
                "EM log-likelihood decreased: {prev} -> {ll}"
            );
        }
        g.ll_history.push(ll);
        let gain = ll - g.log_likelihood;
        g.log_likelihood = ll;
        if gain.abs() < cfg.tol {
            break;
        }

        // M-step.
        let mut next = g.clone();
        for k in 0..2 {
            let nk: f64 = resp.iter().map(|r| r[k]).sum();
            if nk < 1e-12 {
                // Component has no support left; keep the current fit.
                return Ok(g.sorted());
            }
            let mu = resp.iter().zip(losses).map(|(r, x)| r[k] * x).sum::<f64>() / nk;
            let v = resp
                .iter()
                .zip(losses)
                .map(|(r, x)| r[k] * (x - mu) * (x - mu))
                .sum::<f64>()
                / nk;
            next.weights[k] = nk / nf;
            next.means[k] = mu;
            next.variances[k] = v.max(VARIANCE_FLOOR);
        }
        let total = next.weights[0] + next.weights[1];
        next.weights = [next.weights[0] / total, next.weights[1] / total];
        next.em_iterations += 1;
        g = next;
    }
    Ok(g.sorted())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub tau1: f64,
    /// True when no crossing lay between the means and the
    /// precision-weighted midpoint was used instead.
    pub fallback: bool,
}

/// Crossing point of the two weighted densities between the means.
pub fn intersection_threshold(g: &Gmm1D) -> Result<Threshold> {
    let (mu0, mu1) = (g.means[0].min(g.means[1]), g.means[0].max(g.means[1]));
    if mu0 == mu1 {
        return Err(Error::DegenerateComponents(mu0));
    }
    let (lo, hi) = if g.means[0] <= g.means[1] { (0, 1) } else { (1, 0) };
    let (w0, v0) = (g.weights[lo], g.variances[lo]);
    let (w1, v1) = (g.weights[hi], g.variances[hi]);
    let (s0, s1) = (v0.sqrt(), v1.sqrt());

    // log(w0 N0) - log(w1 N1) = a x^2 + b x + c
    let a = 1.0 / (2.0 * v1) - 1.0 / (2.0 * v0);
    let b = mu0 / v0 - mu1 / v1;
    let c = mu1 * mu1 / (2.0 * v1) - mu0 * mu0 / (2.0 * v0) + (w0 / w1).ln() - (s0 / s1).ln();

    let mut roots = Vec::with_capacity(2);
    let scale = a.abs().max(b.abs()).max(c.abs()).max(f64::MIN_POSITIVE);
    if a.abs() <= 1e-14 * scale {
        if b != 0.0 {
            roots.push(-c / b);
        }
    } else {
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            let q = -0.5 * (b + b.signum() * disc.sqrt());
            if q != 0.0 {
                roots.push(q / a);
                roots.push(c / q);
            } else {
                roots.push(-b / (2.0 * a));
            }
        }
    }
    let midpoint = (mu0 * s1 + mu1 * s0) / (s0 + s1);
    let inside = roots
        .into_iter()
        .filter(|r| r.is_finite() && *r > mu0 && *r < mu1)
        .min_by(|x, y| (x - midpoint).abs().total_cmp(&(y - midpoint).abs()));
    Ok(match inside {
        Some(tau1) => Threshold {
            tau1,
            fallback: false,
        },
        None => Threshold {
            tau1: midpoint,
            fallback: true,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gmm(weights: [f64; 2], means: [f64; 2], variances: [f64; 2]) -> Gmm1D {
        Gmm1D {
            weights,
            means,
            variances,
            log_likelihood: 0.0,
            em_iterations: 0,
            ll_history: Vec::new(),
        }
    }

    #[test]
    fn symmetric_threshold_is_midpoint() {
        let t = intersection_threshold(&gmm([0.5, 0.5], [0.0, 4.0], [1.0, 1.0])).unwrap();
        assert!(!t.fallback);
        assert!((t.tau1 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_threshold_matches_closed_form() {
        let g = gmm([0.9, 0.1], [0.0, 4.0], [1.0, 1.0]);
        let t = intersection_threshold(&g).unwrap();
        // 0.9 e^{-x^2/2} = 0.1 e^{-(x-4)^2/2}  =>  x = 2 + ln(9)/4.
        assert!((t.tau1 - (2.0 + 9f64.ln() / 4.0)).abs() < 1e-12);
        let residual = g.component_density(0, t.tau1) - g.component_density(1, t.tau1);
        assert!(residual.abs() < 1e-8);
    }

    #[test]
    fn unequal_variances_root_between_means() {
        let g = gmm([0.7, 0.3], [1.0, 6.0], [0.5, 4.0]);
        let t = intersection_threshold(&g).unwrap();
        assert!(!t.fallback);
        assert!(t.tau1 > 1.0 && t.tau1 < 6.0);
        let residual = g.component_density(0, t.tau1) - g.component_density(1, t.tau1);
        assert!(residual.abs() < 1e-8);
    }

    #[test]
    fn dominated_component_falls_back() {
        // The broad heavy component dominates all of (0, 1).
        let g = gmm([0.01, 0.99], [0.0, 1.0], [1.0, 25.0]);
        let t = intersection_threshold(&g).unwrap();
        assert!(t.fallback);
        let expected = (0.0 * 5.0 + 1.0 * 1.0) / (1.0 + 5.0);
        assert!((t.tau1 - expected).abs() < 1e-12);
    }

    #[test]
    fn equal_means_error() {
        let g = gmm([0.5, 0.5], [1.0, 1.0], [1.0, 2.0]);
        assert!(matches!(intersection_threshold(&g), Err(Error::DegenerateComponents(_))));
    }

    #[test]
    fn fit_errors() {
        assert!(matches!(gmm_fit_em(&[1.0, 2.0, 3.0], &GmmFitConfig::default()), Err(Error::TooFewSamples { .. })));
        assert!(matches!(gmm_fit_em(&[2.0; 10], &GmmFitConfig::default()), Err(Error::DegenerateData(_))));
        assert!(gmm_fit_em(&[1.0, f64::NAN, 2.0, 3.0], &GmmFitConfig::default()).is_err());
    }

    #[test]
    fn tied_quartiles_still_fit() {
        let mut xs = vec![1.0; 20];
        xs.extend([5.0, 5.2, 4.9]);
        let g = gmm_fit_em(&xs, &GmmFitConfig::default()).unwrap();
        assert!(g.means[0] < g.means[1]);
        assert!((g.means[0] - 1.0).abs() < 0.1);
    }
}
