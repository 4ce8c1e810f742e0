//! Equal error rate and detection cost over scored trials.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One score per trial with its target flag.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoredTrials {
    pub is_target: Vec<bool>,
    pub scores: Vec<f64>,
}

impl ScoredTrials {
    pub fn new(is_target: Vec<bool>, scores: Vec<f64>) -> Result<Self> {
        if is_target.len() != scores.len() {
            return Err(Error::LengthMismatch {
                left: is_target.len(),
                right: scores.len(),
            });
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("score {i}")));
        }
        Ok(Self { is_target, scores })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Sorted unique scores: the candidate thresholds of the sweep.
    pub fn thresholds(&self) -> Vec<f64> {
        let mut t = self.scores.clone();
        t.sort_by(f64::total_cmp);
        t.dedup();
        t
    }
}

/// Operating point: accept when `score >= threshold`.
#[derive(Clone, Copy, Debug, PartialEq)]
struct RocPoint {
    threshold: f64,
    p_miss: f64,
    p_fa: f64,
}

/// ROC points for every unique threshold, ascending, plus the reject-all
/// point at `+inf`.
fn sweep(scored: &ScoredTrials) -> Result<Vec<RocPoint>> {
    let n_target = scored.is_target.iter().filter(|&&t| t).count();
    let n_non = scored.len() - n_target;
    if n_target == 0 || n_non == 0 {
        return Err(Error::OneClassOnly);
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored.scores[a].total_cmp(&scored.scores[b]));

    let (nt, nn) = (n_target as f64, n_non as f64);
    let mut points = Vec::new();
    let (mut missed, mut rejected_non) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scored.scores[order[i]];
        points.push(RocPoint {
            threshold: t,
            p_miss: missed as f64 / nt,
            p_fa: (n_non - rejected_non) as f64 / nn,
        });
        while i < order.len() && scored.scores[order[i]] == t {
            if scored.is_target[order[i]] {
                missed += 1;
            } else {
                rejected_non += 1;
            }
            i += 1;
        }
    }
    points.push(RocPoint {
        threshold: f64::INFINITY,
        p_miss: 1.0,
        p_fa: 0.0,
    });
    Ok(points)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EerResult {
    pub eer: f64,
    pub threshold: f64,
}

/// Linear interpolation of the miss/false-alarm crossing between the two
/// adjacent ROC points that bracket it.
pub fn eer(scored: &ScoredTrials) -> Result<EerResult> {
    let points = sweep(scored)?;
    let i = points
        .iter()
        .position(|p| p.p_miss >= p.p_fa)
        .expect("reject-all point always satisfies p_miss >= p_fa");
    let (a, b) = (points[i - 1], points[i]);
    let (da, db) = (a.p_miss - a.p_fa, b.p_miss - b.p_fa);
    let alpha = if db == da { 0.0 } else { -da / (db - da) };
    let rate = a.p_miss + alpha * (b.p_miss - a.p_miss);
    let threshold = if b.threshold.is_finite() {
        a.threshold + alpha * (b.threshold - a.threshold)
    } else {
        a.threshold
    };
    Ok(EerResult {
        eer: rate,
        threshold,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
    pub normalized: bool,
}

impl Default for DcfParams {
    fn default() -> Self {
        Self {
            p_target: 0.01,
            c_miss: 1.0,
            c_fa: 1.0,
            normalized: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DcfResult {
    pub min_dcf: f64,
    /// Accept when `score >= threshold`; `+inf` means reject everything.
    pub threshold: f64,
}

pub fn min_dcf(scored: &ScoredTrials, params: &DcfParams) -> Result<DcfResult> {
    if !(params.p_target > 0.0 && params.p_target < 1.0 && params.c_miss > 0.0 && params.c_fa > 0.0) {
        return Err(Error::BadConfig(format!("invalid DCF parameters {params:?}")));
    }
    let points = sweep(scored)?;
    let miss_w = params.c_miss * params.p_target;
    let fa_w = params.c_fa * (1.0 - params.p_target);
    let norm = if params.normalized { miss_w.min(fa_w) } else { 1.0 };
    let mut best = DcfResult {
        min_dcf: f64::INFINITY,
        threshold: f64::INFINITY,
    };
    for p in &points {
        let dcf = (miss_w * p.p_miss + fa_w * p.p_fa) / norm;
        if dcf < best.min_dcf {
            best = DcfResult {
                min_dcf: dcf,
                threshold: p.threshold,
            };
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scored(targets: &[f64], nons: &[f64]) -> ScoredTrials {
        let mut flags = vec![true; targets.len()];
        flags.extend(vec![false; nons.len()]);
        let scores = targets.iter().chain(nons).copied().collect();
        ScoredTrials::new(flags, scores).unwrap()
    }

    #[test]
    fn perfect_separation() {
        let s = scored(&[0.9, 0.8], &[0.1, 0.2]);
        assert_eq!(eer(&s).unwrap().eer, 0.0);
        assert_eq!(min_dcf(&s, &DcfParams::default()).unwrap().min_dcf, 0.0);
    }

    #[test]
    fn identical_distributions_are_chance() {
        let s = scored(&[0.1, 0.5, 0.7], &[0.7, 0.1, 0.5]);
        assert!((eer(&s).unwrap().eer - 0.5).abs() < 1e-12);
    }

    #[test]
    fn interpolated_crossing() {
        // Thresholds 0.1..0.4; crossing lies between two ROC points.
        let s = scored(&[0.2, 0.4], &[0.1, 0.3]);
        // Points (p_miss, p_fa): t=.1 (0,1), t=.2 (0,.5), t=.3 (.5,.5) -> EER .5?
        // No: at t=.3 the target 0.2 is missed and the 0.3 non is accepted.
        let r = eer(&s).unwrap();
        assert!((r.eer - 0.5).abs() < 1e-12);
        let s = scored(&[0.3, 0.4, 0.5], &[0.1, 0.2, 0.35]);
        let r = eer(&s).unwrap();
        assert!((r.eer - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn normalized_dcf_is_bounded() {
        let s = scored(&[0.1, 0.2], &[0.9, 0.8]);
        let r = min_dcf(&s, &DcfParams::default()).unwrap();
        assert!(r.min_dcf <= 1.0 + 1e-12);
        let raw = min_dcf(
            &s,
            &DcfParams {
                normalized: false,
                ..DcfParams::default()
            },
        )
        .unwrap();
        assert!((raw.min_dcf - 0.01).abs() < 1e-12);
    }

    #[test]
    fn one_class_errors() {
        let s = scored(&[0.1, 0.2], &[]);
        assert!(matches!(eer(&s), Err(Error::OneClassOnly)));
        assert!(matches!(min_dcf(&s, &DcfParams::default()), Err(Error::OneClassOnly)));
    }
}
