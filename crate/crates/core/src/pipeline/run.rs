//! The end-to-end run: stage ordering, artifacts, resume and the summary.
//!
//! Every stage writes its products and then `state.json`, both atomically.
//! Values carried from one stage to the next are rounded to the `f32`
//! storage precision first, so a resumed run continues from exactly the
//! numbers an uninterrupted run would have used.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingMatrix, PseudoLabelMap};
use crate::error::{Error, Result};
use crate::io;
use crate::simulator::{generate_dataset, generate_eval, generate_world, Augmentation, EvalSet, GeneratedDataset, SpeakerWorld};
use crate::trainer::{
    checkpoint_digest, layer_weight_distance, lmft_switch, load_checkpoint, save_checkpoint, AnchorSnapshot, Checkpoint,
    FineTuneState, LayeredEncoder, ParamBlocks, SpeakerNet,
};

use super::config::{RunConfig, RunMode};
use super::report::{drift_rows, format_drift_tsv, DriftRow, EventLog, LabelQuality, StageRecord, VerificationMetrics};
use super::stages::{
    embed_features, evaluate, label_quality, run_gated_epochs, run_ssl_contrastive_e2e, run_step1_initial_model,
    run_step2_pseudo_label, run_step3_finetune, GateInput,
};

const PRETRAIN_STREAM: u64 = 0x7072_6574;
const LMFT_STREAM: u64 = 0x6c6d_6674;

/// World, data and the stand-in pre-trained encoder for one config.
#[derive(Clone, Debug)]
pub struct PreparedRun {
    pub world: SpeakerWorld,
    pub train: GeneratedDataset,
    pub eval: EvalSet,
    pub pretrained: LayeredEncoder,
    pub aug: Augmentation,
}

/// Everything derived from the config seed before any training.
pub fn prepare(cfg: &RunConfig) -> Result<PreparedRun> {
    let world = generate_world(&cfg.world)?;
    let train = generate_dataset(&world)?;
    let eval = generate_eval(&world)?;
    let enc = &cfg.encoder;
    let pretrained = LayeredEncoder::pretrained(
        cfg.world.feature_dim,
        enc.hidden_dim,
        enc.num_layers,
        enc.init_noise,
        crate::rng::derive_seed(cfg.seed, &[PRETRAIN_STREAM]),
    )?;
    let aug = Augmentation::from_world(&world);
    Ok(PreparedRun {
        world,
        train,
        eval,
        pretrained,
        aug,
    })
}

/// Persisted progress of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    /// Iteration of the current label map; 0 is the map from the
    /// self-distilled model.
    pub iteration: usize,
    pub label_file: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub stages_done: Vec<String>,
    pub metric_history: Vec<StageRecord>,
    /// Digest of the config text the run was started with.
    pub config_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub raw: String,
    pub entries: BTreeMap<String, String>,
}

/// Final report. Contains nothing time- or host-dependent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: String,
    pub seed: u64,
    pub config: ConfigEcho,
    pub num_train_utterances: usize,
    pub num_trials: usize,
    /// Seconds of audio per scoring window at the configured frame rate.
    pub scoring_window_seconds: f64,
    pub initial_labels: Option<LabelQuality>,
    pub final_labels: Option<LabelQuality>,
    pub final_verification: VerificationMetrics,
    pub final_drift: Vec<f64>,
    pub final_checkpoint_digest: String,
    pub history: Vec<StageRecord>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub state: PipelineState,
    pub summary: RunSummary,
    pub net: SpeakerNet,
    /// Last label map used for training, if any.
    pub labels: Option<PseudoLabelMap>,
}

fn config_digest(cfg: &RunConfig) -> String {
    use sha2::{Digest, Sha256};
    // Entries rather than raw text so comments and spacing do not matter.
    let canonical: String = cfg.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    format!("{:x}", Sha256::digest(canonical.as_bytes()))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    io::atomic_write(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = io::read_bytes(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn save_gate_input(input: &GateInput, ids: &[crate::embedding::UtteranceId], path: &Path) -> Result<()> {
    let width = 1 + input.probs.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(ids.len() * width);
    for (loss, p) in input.losses.iter().zip(&input.probs) {
        data.push(*loss as f32);
        data.extend(p.iter().map(|&v| v as f32));
    }
    io::save_embeddings(&EmbeddingMatrix::new(ids.to_vec(), width, data)?, path)
}

fn load_gate_input(path: &Path, ids: &[crate::embedding::UtteranceId]) -> Result<GateInput> {
    let m = io::load_embeddings(path)?;
    if m.ids() != ids {
        return Err(Error::Misaligned(format!("{} does not follow the feature order", path.display())));
    }
    let mut losses = Vec::with_capacity(m.len());
    let mut probs = Vec::with_capacity(m.len());
    for i in 0..m.len() {
        let row = m.row_f64(i);
        losses.push(row[0]);
        probs.push(row[1..].to_vec());
    }
    Ok(GateInput { losses, probs })
}

struct Run<'a> {
    cfg: &'a RunConfig,
    dir: &'a Path,
    log: EventLog,
    state: PipelineState,
}

impl Run<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn done(&self, stage: &str) -> bool {
        self.state.stages_done.iter().any(|s| s == stage)
    }

    fn finish_stage(&mut self, stage: &str, record: StageRecord) -> Result<()> {
        if let Some(last) = self.state.metric_history.last() {
            assert!(record.iteration >= last.iteration, "metric history must be monotone in iteration");
        }
        self.log.emit("stage", serde_json::to_value(&record)?)?;
        self.state.metric_history.push(record);
        self.state.stages_done.push(stage.to_string());
        write_json(&self.state, &self.path("state.json"))
    }

    fn record(&self, stage: &str) -> Option<&StageRecord> {
        self.state.metric_history.iter().find(|r| r.stage == stage)
    }
}

fn stage_checkpoint(net: &SpeakerNet, class_weights: Option<&crate::embedding::Matrix>) -> Checkpoint {
    Checkpoint {
        net: net.clone(),
        class_weights: class_weights.cloned(),
    }
}

fn quantize_state(state: &mut FineTuneState) {
    state.net.quantize();
    state.class_weights.quantize();
}

/// Runs (or resumes) the configured pipeline, writing artifacts to `out_dir`.
pub fn run_full(cfg: &RunConfig, out_dir: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    run_prepared(cfg, &prepare(cfg)?, out_dir)
}

/// [`run_full`] on data that was already generated from `cfg`.
pub fn run_prepared(cfg: &RunConfig, prepared: &PreparedRun, out_dir: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let digest = config_digest(cfg);
    let state_path = out_dir.join("state.json");
    let state = if state_path.exists() {
        let s: PipelineState = read_json(&state_path)?;
        if s.config_digest != digest {
            return Err(Error::BadConfig(format!(
                "{} holds a run with a different config",
                out_dir.display()
            )));
        }
        log::info!("resuming after {} stages", s.stages_done.len());
        s
    } else {
        PipelineState {
            iteration: 0,
            label_file: None,
            checkpoint: None,
            stages_done: Vec::new(),
            metric_history: Vec::new(),
            config_digest: digest,
        }
    };
    let mut run = Run {
        cfg,
        dir: out_dir,
        log: EventLog::to_file(&out_dir.join("events.jsonl")),
        state,
    };
    run.log.emit(
        "start",
        serde_json::json!({
            "seed": cfg.seed,
            "mode": cfg.mode,
            "resumed_stages": run.state.stages_done.len(),
        }),
    )?;
    let outcome = match cfg.mode {
        RunMode::PseudoLabel => run_pseudo_label(&mut run, prepared)?,
        RunMode::SslContrastiveE2e => run_contrastive(&mut run, prepared)?,
    };
    write_json(&outcome.summary, &out_dir.join("summary.json"))?;
    run.log.emit(
        "finish",
        serde_json::json!({ "final_checkpoint_digest": outcome.summary.final_checkpoint_digest }),
    )?;
    Ok(outcome)
}

fn run_pseudo_label(run: &mut Run<'_>, p: &PreparedRun) -> Result<RunOutcome> {
    let cfg = run.cfg;
    let features = &p.train.features;
    let truth = &p.train.truth;
    let norm = cfg.eval.nmi_normalizer;
    let anchor = AnchorSnapshot::new(&p.pretrained);

    // Step 1.
    let step1_path = run.path("step1.ckpt");
    let mut net = if run.done("step1") {
        load_checkpoint(&step1_path)?.net
    } else {
        let (teacher, losses) = run_step1_initial_model(features, cfg, &p.pretrained, &p.aug)?;
        let ckpt = stage_checkpoint(&teacher, None);
        save_checkpoint(&ckpt, &step1_path)?;
        let mut rec = StageRecord::new("step1", 0);
        rec.verification = Some(evaluate(&teacher, &p.eval, &cfg.eval)?);
        rec.drift = layer_weight_distance(&teacher.encoder, &anchor)?;
        rec.checkpoint_digest = Some(checkpoint_digest(&ckpt));
        run.log.emit("distill_losses", serde_json::json!(losses))?;
        run.state.checkpoint = Some(step1_path.clone());
        run.finish_stage("step1", rec)?;
        teacher
    };

    let mut labels: Option<PseudoLabelMap> = None;
    let mut class_weights = None;
    let mut last_gate: Option<GateInput> = None;
    let mut drift_table: Vec<DriftRow> = Vec::new();
    let rounds = cfg.num_refinement_iterations;

    for i in 0..rounds.max(1) {
        // Step 2 on the current model.
        let key = format!("labels_{i}");
        let label_path = run.path(&format!("{key}.tsv"));
        let map = if run.done(&key) {
            io::load_labels(&label_path, i)?
        } else {
            let emb = embed_features(&net, features)?;
            io::save_embeddings(&emb, &run.path(&format!("embeddings_{i}.emb")))?;
            let map = run_step2_pseudo_label(&emb, cfg, i)?;
            io::save_labels(&map, &label_path)?;
            let mut rec = StageRecord::new(&key, i);
            rec.labels = Some(label_quality(&map, truth, norm)?);
            run.state.iteration = i;
            run.state.label_file = Some(label_path.clone());
            run.finish_stage(&key, rec)?;
            map
        };
        if rounds == 0 {
            labels = Some(map);
            break;
        }

        // Step 3 from the pre-trained encoder on these labels.
        let key = format!("finetune_{}", i + 1);
        let ckpt_path = run.path(&format!("{key}.ckpt"));
        let gate_path = run.path(&format!("{key}.gate"));
        if run.done(&key) {
            let ckpt = load_checkpoint(&ckpt_path)?;
            net = ckpt.net;
            class_weights = ckpt.class_weights;
            last_gate = Some(load_gate_input(&gate_path, features.ids())?);
        } else {
            let mut out = run_step3_finetune(features, &map, cfg, &p.pretrained, &p.aug, i)?;
            quantize_state(&mut out.state);
            let gate = out.last.quantized();
            let ckpt = stage_checkpoint(&out.state.net, Some(&out.state.class_weights));
            save_checkpoint(&ckpt, &ckpt_path)?;
            save_gate_input(&gate, features.ids(), &gate_path)?;
            let mut rec = StageRecord::new(&key, i + 1);
            rec.verification = Some(evaluate(&out.state.net, &p.eval, &cfg.eval)?);
            rec.drift = layer_weight_distance(&out.state.net.encoder, &anchor)?;
            rec.epochs = out.epochs;
            rec.checkpoint_digest = Some(checkpoint_digest(&ckpt));
            run.state.checkpoint = Some(ckpt_path.clone());
            run.finish_stage(&key, rec)?;
            net = out.state.net;
            class_weights = Some(out.state.class_weights);
            last_gate = Some(gate);
        }
        if let Some(rec) = run.record(&key) {
            let per_epoch: Vec<Vec<f64>> = rec.epochs.iter().map(|e| e.drift.clone()).collect();
            drift_table.extend(drift_rows("pseudo_label", i + 1, &per_epoch));
        }
        labels = Some(map);
    }

    // Large-margin fine-tuning continues the last model on the last labels.
    if rounds > 0 {
        let map = labels.as_ref().expect("at least one label map");
        let ckpt_path = run.path("lmft.ckpt");
        if run.done("lmft") {
            net = load_checkpoint(&ckpt_path)?.net;
        } else {
            let lmft = lmft_switch(&cfg.train);
            let weights = class_weights.take().ok_or_else(|| Error::BadConfig("no classifier to continue".into()))?;
            let seed = crate::rng::derive_seed(cfg.seed, &[LMFT_STREAM]);
            let mut state = FineTuneState::from_net(net.clone(), map.num_classes(), &lmft, seed);
            state.class_weights = weights;
            state.anchor = anchor.clone();
            let mut out = run_gated_epochs(
                state,
                features,
                map,
                &lmft,
                &cfg.gate,
                &p.aug,
                cfg.train.epochs,
                last_gate.take(),
                seed,
            )?;
            quantize_state(&mut out.state);
            let ckpt = stage_checkpoint(&out.state.net, Some(&out.state.class_weights));
            save_checkpoint(&ckpt, &ckpt_path)?;
            let mut rec = StageRecord::new("lmft", rounds);
            rec.verification = Some(evaluate(&out.state.net, &p.eval, &cfg.eval)?);
            rec.drift = layer_weight_distance(&out.state.net.encoder, &anchor)?;
            rec.epochs = out.epochs;
            rec.checkpoint_digest = Some(checkpoint_digest(&ckpt));
            run.state.checkpoint = Some(ckpt_path.clone());
            run.finish_stage("lmft", rec)?;
            net = out.state.net;
        }
        if let Some(rec) = run.record("lmft") {
            let per_epoch: Vec<Vec<f64>> = rec.epochs.iter().map(|e| e.drift.clone()).collect();
            drift_table.extend(drift_rows("pseudo_label_lmft", rounds, &per_epoch));
        }
    }

    // Final evaluation, and the labels the final model would produce.
    let final_iteration = rounds;
    let final_labels = {
        let emb = embed_features(&net, features)?;
        let map = run_step2_pseudo_label(&emb, cfg, rounds.max(1))?;
        label_quality(&map, truth, norm)?
    };
    let verification = evaluate(&net, &p.eval, &cfg.eval)?;
    let drift = layer_weight_distance(&net.encoder, &anchor)?;
    let digest = checkpoint_digest(&stage_checkpoint(&net, None));
    if !run.done("final") {
        let mut rec = StageRecord::new("final", final_iteration);
        rec.verification = Some(verification.clone());
        rec.labels = Some(final_labels.clone());
        rec.drift = drift.clone();
        rec.checkpoint_digest = Some(digest.clone());
        run.finish_stage("final", rec)?;
    }
    io::atomic_write(&run.path("drift.tsv"), format_drift_tsv(&drift_table).as_bytes())?;

    let summary = RunSummary {
        mode: "pseudo_label".into(),
        seed: cfg.seed,
        config: ConfigEcho {
            raw: cfg.raw.clone(),
            entries: cfg.entries.clone(),
        },
        num_train_utterances: features.len(),
        num_trials: p.eval.trials.len(),
        scoring_window_seconds: cfg.eval.window_frames as f64 / cfg.frames_per_second,
        initial_labels: run.record("labels_0").and_then(|r| r.labels.clone()),
        final_labels: Some(final_labels),
        final_verification: verification,
        final_drift: drift,
        final_checkpoint_digest: digest,
        history: run.state.metric_history.clone(),
    };
    Ok(RunOutcome {
        state: run.state.clone(),
        summary,
        net,
        labels,
    })
}

fn run_contrastive(run: &mut Run<'_>, p: &PreparedRun) -> Result<RunOutcome> {
    let cfg = run.cfg;
    let ckpt_path = run.path("contrastive.ckpt");
    let net = if run.done("contrastive") {
        load_checkpoint(&ckpt_path)?.net
    } else {
        // Ground truth is handed over only for the supervised positive mode.
        let truth = match cfg.contrastive.positives {
            super::config::PositiveSampling::SameUtterance => None,
            super::config::PositiveSampling::TruthDifferentUtterance => Some(&p.train.truth),
        };
        let out = run_ssl_contrastive_e2e(
            &p.train.features,
            truth,
            cfg,
            &p.pretrained,
            &p.aug,
            &p.eval,
            cfg.contrastive.positives,
        )?;
        let ckpt = stage_checkpoint(&out.net, None);
        save_checkpoint(&ckpt, &ckpt_path)?;
        let mut rec = StageRecord::new("contrastive", 0);
        rec.verification = Some(out.verification.clone());
        rec.drift = out.drift.last().cloned().unwrap_or_default();
        rec.checkpoint_digest = Some(checkpoint_digest(&ckpt));
        run.log.emit("contrastive_losses", serde_json::json!(out.losses))?;
        let rows = drift_rows("ssl_contrastive", 0, &out.drift);
        io::atomic_write(&run.path("drift.tsv"), format_drift_tsv(&rows).as_bytes())?;
        run.state.checkpoint = Some(ckpt_path.clone());
        run.finish_stage("contrastive", rec)?;
        out.net
    };
    let rec = run.record("contrastive").cloned().expect("stage recorded");
    let summary = RunSummary {
        mode: "ssl_contrastive_e2e".into(),
        seed: cfg.seed,
        config: ConfigEcho {
            raw: cfg.raw.clone(),
            entries: cfg.entries.clone(),
        },
        num_train_utterances: p.train.features.len(),
        num_trials: p.eval.trials.len(),
        scoring_window_seconds: cfg.eval.window_frames as f64 / cfg.frames_per_second,
        initial_labels: None,
        final_labels: None,
        final_verification: rec.verification.clone().expect("contrastive stage is evaluated"),
        final_drift: rec.drift.clone(),
        final_checkpoint_digest: rec.checkpoint_digest.clone().unwrap_or_default(),
        history: run.state.metric_history.clone(),
    };
    Ok(RunOutcome {
        state: run.state.clone(),
        summary,
        net,
        labels: None,
    })
}
