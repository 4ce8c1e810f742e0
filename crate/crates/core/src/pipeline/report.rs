//! Run records: per-stage metrics, the JSON-lines event log and the drift
//! table.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{eer, min_dcf, DcfParams, ScoredTrials};
use crate::lossgate::{GateCounts, GateFit};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationMetrics {
    pub eer: f64,
    pub eer_threshold: f64,
    pub min_dcf: f64,
    pub min_dcf_raw: f64,
    /// `None` when the minimum is reached by rejecting every trial.
    pub dcf_threshold: Option<f64>,
}

impl VerificationMetrics {
    pub fn from_scores(scored: &ScoredTrials, dcf: &DcfParams) -> Result<Self> {
        let e = eer(scored)?;
        let norm = min_dcf(scored, &DcfParams { normalized: true, ..*dcf })?;
        let raw = min_dcf(scored, &DcfParams { normalized: false, ..*dcf })?;
        Ok(Self {
            eer: e.eer,
            eer_threshold: e.threshold,
            min_dcf: norm.min_dcf,
            min_dcf_raw: raw.min_dcf,
            dcf_threshold: norm.threshold.is_finite().then_some(norm.threshold),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelQuality {
    pub ari: f64,
    pub nmi: f64,
    pub nmi_degenerate: bool,
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Gate fitted for this epoch from the previous epoch's losses.
    pub gate: Option<GateFit>,
    pub counts: GateCounts,
    pub label_correction: bool,
    /// Per-layer distance from the anchor after the epoch.
    pub drift: Vec<f64>,
}

/// One entry of the metric history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub iteration: usize,
    pub verification: Option<VerificationMetrics>,
    pub labels: Option<LabelQuality>,
    pub epochs: Vec<EpochSummary>,
    pub drift: Vec<f64>,
    pub checkpoint_digest: Option<String>,
}

impl StageRecord {
    pub fn new(stage: &str, iteration: usize) -> Self {
        Self {
            stage: stage.to_string(),
            iteration,
            verification: None,
            labels: None,
            epochs: Vec::new(),
            drift: Vec::new(),
            checkpoint_digest: None,
        }
    }
}

/// Append-only JSON-lines log.
#[derive(Clone, Debug)]
pub struct EventLog {
    path: Option<PathBuf>,
}

impl EventLog {
    pub fn to_file(path: &Path) -> Self {
        Self {
            path: Some(path.to_path_buf()),
        }
    }

    pub fn disabled() -> Self {
        Self { path: None }
    }

    pub fn emit(&self, event: &str, body: serde_json::Value) -> Result<()> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        let line = serde_json::json!({ "event": event, "data": body });
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DriftRow {
    pub mode: String,
    pub iteration: usize,
    pub epoch: usize,
    pub layer: usize,
    pub distance: f64,
}

pub fn drift_rows(mode: &str, iteration: usize, per_epoch: &[Vec<f64>]) -> Vec<DriftRow> {
    per_epoch
        .iter()
        .enumerate()
        .flat_map(|(epoch, d)| {
            d.iter().enumerate().map(move |(layer, &distance)| DriftRow {
                mode: mode.to_string(),
                iteration,
                epoch,
                layer: layer + 1,
                distance,
            })
        })
        .collect()
}

/// Tab-separated with a header: `mode iteration epoch layer distance`.
pub fn format_drift_tsv(rows: &[DriftRow]) -> String {
    let mut out = String::from("mode\titeration\tepoch\tlayer\tdistance\n");
    for r in rows {
        out.push_str(&format!("{}\t{}\t{}\t{}\t{:.9e}\n", r.mode, r.iteration, r.epoch, r.layer, r.distance));
    }
    out
}
