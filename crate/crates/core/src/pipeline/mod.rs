//! End-to-end orchestration: self-distillation, clustering into pseudo
//! labels, gated fine-tuning, refinement rounds and large-margin
//! fine-tuning, plus the contrastive comparison run.

mod config;
mod report;
mod run;
mod stages;

pub use config::{
    with_overrides, ContrastiveConfig, EncoderConfig, EvalConfig, GateConfig, PositiveSampling, RunConfig, RunMode,
};
pub use report::{
    drift_rows, format_drift_tsv, DriftRow, EpochSummary, EventLog, LabelQuality, StageRecord, VerificationMetrics,
};
pub use run::{prepare, run_full, run_prepared, ConfigEcho, PipelineState, PreparedRun, RunOutcome, RunSummary};
pub use stages::{
    embed_features, evaluate, frame_embeddings, gate_for_epoch, label_quality, run_gated_epochs,
    run_ssl_contrastive_e2e, run_step1_initial_model, run_step2_pseudo_label, run_step3_finetune, ContrastiveOutcome,
    FineTuneOutcome, GateInput,
};
