//! Dynamic loss gate: a two-component mixture over per-sample losses, a
//! threshold at the density crossing, and per-sample gating.

mod gate;
mod gmm;

pub use gate::{gate_samples, GateCounts, GateDecision, GateStatus};
pub use gmm::{gmm_fit_em, intersection_threshold, Gmm1D, GmmFitConfig, Threshold, VARIANCE_FLOOR};

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Outcome of fitting the gate to one epoch of losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateFit {
    pub gmm: Option<Gmm1D>,
    pub threshold: Option<Threshold>,
    /// Why gating is off for the epoch, if it is.
    pub skipped: Option<String>,
}

impl GateFit {
    pub fn tau1(&self) -> Option<f64> {
        self.threshold.map(|t| t.tau1)
    }
}

/// Fits the mixture and threshold, or reports why the epoch runs ungated.
///
/// Gating is skipped when the fit is degenerate or when the two components
/// are not separated by at least `min_separation` (Ashman's D).
pub fn fit_gate(losses: &[f64], cfg: &GmmFitConfig, min_separation: f64) -> GateFit {
    let skip = |gmm: Option<Gmm1D>, threshold: Option<Threshold>, why: String| GateFit {
        gmm,
        threshold,
        skipped: Some(why),
    };
    let gmm = match gmm_fit_em(losses, cfg) {
        Ok(g) => g,
        Err(e @ (Error::DegenerateData(_) | Error::TooFewSamples { .. })) => {
            return skip(None, None, e.to_string())
        }
        Err(e) => return skip(None, None, format!("mixture fit failed: {e}")),
    };
    let sep = gmm.separation();
    if !(sep >= min_separation) {
        return skip(
            Some(gmm),
            None,
            format!("unimodal loss distribution (separation {sep:.3} < {min_separation})"),
        );
    }
    match intersection_threshold(&gmm) {
        Ok(t) => {
            if t.fallback {
                log::warn!("no density crossing between the means; gating at the midpoint {}", t.tau1);
            }
            GateFit {
                gmm: Some(gmm),
                threshold: Some(t),
                skipped: None,
            }
        }
        Err(e) => skip(Some(gmm), None, e.to_string()),
    }
}
