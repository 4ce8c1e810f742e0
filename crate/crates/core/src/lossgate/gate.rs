use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GateStatus {
    Reliable,
    UnreliableCorrectable,
    UnreliableDiscarded,
}

impl GateStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            GateStatus::Reliable => "reliable",
            GateStatus::UnreliableCorrectable => "correctable",
            GateStatus::UnreliableDiscarded => "discarded",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateCounts {
    pub reliable: usize,
    pub correctable: usize,
    pub discarded: usize,
}

impl GateCounts {
    pub fn total(&self) -> usize {
        self.reliable + self.correctable + self.discarded
    }

    pub fn gated(&self) -> usize {
        self.correctable + self.discarded
    }
}

/// Per-sample gate statuses for one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub statuses: Vec<GateStatus>,
    pub tau1: f64,
    pub tau2: f64,
}

impl GateDecision {
    /// Every sample reliable; equivalent to no gating.
    pub fn all_reliable(n: usize) -> Self {
        Self {
            statuses: vec![GateStatus::Reliable; n],
            tau1: f64::INFINITY,
            tau2: 0.5,
        }
    }

    pub fn counts(&self) -> GateCounts {
        let mut c = GateCounts::default();
        for s in &self.statuses {
            match s {
                GateStatus::Reliable => c.reliable += 1,
                GateStatus::UnreliableCorrectable => c.correctable += 1,
                GateStatus::UnreliableDiscarded => c.discarded += 1,
            }
        }
        c
    }

    /// Indices with loss above `tau1`.
    pub fn gated_indices(&self) -> Vec<usize> {
        self.statuses
            .iter()
            .enumerate()
            .filter(|(_, s)| **s != GateStatus::Reliable)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Reliable iff `loss <= tau1`; otherwise correctable iff some class
/// probability exceeds `tau2`.
pub fn gate_samples(losses: &[f64], probs: &[Vec<f64>], tau1: f64, tau2: f64) -> Result<GateDecision> {
    if losses.len() != probs.len() {
        return Err(Error::Misaligned(format!(
            "{} losses vs {} probability rows",
            losses.len(),
            probs.len()
        )));
    }
    let statuses = losses
        .iter()
        .zip(probs)
        .map(|(&loss, p)| {
            if loss <= tau1 {
                GateStatus::Reliable
            } else if p.iter().any(|&v| v > tau2) {
                GateStatus::UnreliableCorrectable
            } else {
                GateStatus::UnreliableDiscarded
            }
        })
        .collect();
    Ok(GateDecision {
        statuses,
        tau1,
        tau2,
    })
}
