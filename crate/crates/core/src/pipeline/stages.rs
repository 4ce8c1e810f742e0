//! The individual pipeline steps.
//!
//! Training and clustering entry points take a [`FeatureSet`], which carries
//! no speaker identity. Ground truth enters only through the reporting
//! helpers and the explicitly supervised contrastive diagnostic.

use rayon::prelude::*;

use crate::embedding::{EmbeddingMatrix, PseudoLabelMap};
use crate::error::{Error, Result};
use crate::eval::{ari, extract_frame_embeddings, nmi, score_trials, FrameEmbeddings, NmiNormalizer};
use crate::features::FeatureSet;
use crate::lossgate::{fit_gate, gate_samples, GateCounts, GateDecision, GmmFitConfig, GateStatus};
use crate::losses::NoRegularizer;
use crate::rng;
use crate::simulator::{Augmentation, EvalSet, GroundTruth};
use crate::trainer::{
    contrastive_epoch, distill_epoch, embed_all, layer_weight_distance, train_epoch, ContrastiveState,
    DistillState, FineTuneState, LayeredEncoder, ParamBlocks, Positives, SpeakerNet, TrainConfig,
};

use super::config::{EvalConfig, GateConfig, PositiveSampling, RunConfig};
use super::report::{EpochSummary, LabelQuality, VerificationMetrics};

const STEP1_STREAM: u64 = 0x7374_6570_31;
const STEP3_STREAM: u64 = 0x7374_6570_33;
const SSL_STREAM: u64 = 0x7373_6c;

/// Embeds every utterance from its full sequence.
pub fn embed_features(net: &SpeakerNet, features: &FeatureSet) -> Result<EmbeddingMatrix> {
    EmbeddingMatrix::from_f64_rows(features.ids().to_vec(), &embed_all(net, features)?)
}

/// Window embeddings for every evaluation utterance.
pub fn frame_embeddings(net: &SpeakerNet, features: &FeatureSet, cfg: &EvalConfig) -> Result<FrameEmbeddings> {
    let mats: Vec<_> = features
        .sequences()
        .par_iter()
        .map(|s| extract_frame_embeddings(s, cfg.num_windows, cfg.window_frames, |w| net.embed(w)))
        .collect::<Result<_>>()?;
    Ok(features.ids().iter().cloned().zip(mats).collect())
}

pub fn evaluate(net: &SpeakerNet, eval: &EvalSet, cfg: &EvalConfig) -> Result<VerificationMetrics> {
    let frames = frame_embeddings(net, &eval.dataset.features, cfg)?;
    let scored = score_trials(&eval.trials, &frames)?;
    VerificationMetrics::from_scores(&scored, &cfg.dcf)
}

/// Agreement of a label map with ground truth. Reporting only.
pub fn label_quality(labels: &PseudoLabelMap, truth: &GroundTruth, normalizer: NmiNormalizer) -> Result<LabelQuality> {
    let predicted = labels.labels_for(&truth.ids)?;
    let n = nmi(&predicted, &truth.speakers, normalizer)?;
    Ok(LabelQuality {
        ari: ari(&predicted, &truth.speakers)?,
        nmi: n.value,
        nmi_degenerate: n.degenerate,
        num_classes: labels.num_classes(),
    })
}

/// Step 1: self-distillation from the pre-trained encoder. Returns the EMA
/// teacher, rounded to storage precision, and the mean loss per epoch.
pub fn run_step1_initial_model(
    features: &FeatureSet,
    cfg: &RunConfig,
    pretrained: &LayeredEncoder,
    aug: &Augmentation,
) -> Result<(SpeakerNet, Vec<f64>)> {
    let seed = rng::derive_seed(cfg.seed, &[STEP1_STREAM]);
    let mut state = DistillState::new(pretrained, cfg.encoder.embed_dim, &cfg.distill, seed)?;
    let mut losses = Vec::with_capacity(cfg.distill.train.epochs);
    for epoch in 0..cfg.distill.train.epochs {
        let loss = distill_epoch(&mut state, features, &cfg.distill, aug, &NoRegularizer, epoch, seed)?;
        log::info!("distillation epoch {epoch}: loss {loss:.4}");
        losses.push(loss);
    }
    let mut teacher = state.teacher;
    teacher.quantize();
    Ok((teacher, losses))
}

/// Step 2: k-means then agglomerative merging of the embeddings.
pub fn run_step2_pseudo_label(embeddings: &EmbeddingMatrix, cfg: &RunConfig, iteration: usize) -> Result<PseudoLabelMap> {
    let params = cfg.cluster_params(iteration);
    if params.k > embeddings.len() {
        log::warn!("cluster.k = {} exceeds {} utterances; clipping", params.k, embeddings.len());
    }
    Ok(crate::clustering::cluster_embeddings(embeddings, &params, iteration)?.labels)
}

/// Losses and posteriors of the latest epoch, the input to the next gate.
#[derive(Clone, Debug, PartialEq)]
pub struct GateInput {
    pub losses: Vec<f64>,
    pub probs: Vec<Vec<f64>>,
}

impl GateInput {
    /// Rounds through `f32`, the precision it is stored at between stages.
    pub fn quantized(mut self) -> Self {
        self.losses.iter_mut().for_each(|v| *v = *v as f32 as f64);
        for p in &mut self.probs {
            p.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        self
    }
}

/// Gate for `epoch` from the previous epoch, or `None` while warming up,
/// when disabled, or when the fit says the losses are not bimodal.
pub fn gate_for_epoch(
    gate: &GateConfig,
    epoch: usize,
    previous: Option<&GateInput>,
    seed: u64,
) -> Result<(Option<GateDecision>, Option<crate::lossgate::GateFit>, bool)> {
    let Some(prev) = previous else {
        return Ok((None, None, false));
    };
    if !gate.enabled || epoch < gate.warmup_epochs {
        return Ok((None, None, false));
    }
    let fit = fit_gate(
        &prev.losses,
        &GmmFitConfig {
            max_iters: gate.gmm_max_iters,
            tol: gate.gmm_tol,
            seed: rng::derive_seed(seed, &[0x676d_6d, epoch as u64]),
        },
        gate.min_separation,
    );
    let Some(tau1) = fit.tau1() else {
        log::info!("epoch {epoch}: gate off ({})", fit.skipped.as_deref().unwrap_or("no threshold"));
        return Ok((None, Some(fit), false));
    };
    let lc = epoch >= gate.warmup_epochs + gate.lc_delay;
    let mut decision = gate_samples(&prev.losses, &prev.probs, tau1, gate.tau2)?;
    if !lc {
        for s in &mut decision.statuses {
            if *s == GateStatus::UnreliableCorrectable {
                *s = GateStatus::UnreliableDiscarded;
            }
        }
    }
    Ok((Some(decision), Some(fit), lc))
}

/// Everything a run of gated epochs produces.
#[derive(Clone, Debug)]
pub struct FineTuneOutcome {
    pub state: FineTuneState,
    pub epochs: Vec<EpochSummary>,
    /// Gate applied in each epoch.
    pub decisions: Vec<Option<GateDecision>>,
    pub last: GateInput,
}

/// Runs epochs `first_epoch..first_epoch + cfg.epochs` with the gate
/// schedule, starting from `state`.
pub fn run_gated_epochs(
    mut state: FineTuneState,
    features: &FeatureSet,
    labels: &PseudoLabelMap,
    cfg: &TrainConfig,
    gate: &GateConfig,
    aug: &Augmentation,
    first_epoch: usize,
    mut previous: Option<GateInput>,
    seed: u64,
) -> Result<FineTuneOutcome> {
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut decisions = Vec::with_capacity(cfg.epochs);
    for epoch in first_epoch..first_epoch + cfg.epochs {
        let (decision, fit, lc) = gate_for_epoch(gate, epoch, previous.as_ref(), seed)?;
        let report = train_epoch(&mut state, features, labels, cfg, decision.as_ref(), Some(aug), epoch, seed)?;
        let drift = layer_weight_distance(&state.net.encoder, &state.anchor)?;
        let counts = decision.as_ref().map_or(
            GateCounts {
                reliable: features.len(),
                correctable: 0,
                discarded: 0,
            },
            |d| d.counts(),
        );
        log::info!(
            "epoch {epoch}: loss {:.4}, reliable {}, correctable {}, discarded {}",
            report.record.mean(),
            counts.reliable,
            counts.correctable,
            counts.discarded
        );
        epochs.push(EpochSummary {
            epoch,
            mean_loss: report.record.mean(),
            gate: fit,
            counts,
            label_correction: lc,
            drift,
        });
        decisions.push(decision);
        previous = Some(GateInput {
            losses: report.record.losses,
            probs: report.probs,
        });
    }
    Ok(FineTuneOutcome {
        state,
        epochs,
        decisions,
        last: previous.ok_or_else(|| Error::BadConfig("fine-tuning needs at least one epoch".into()))?,
    })
}

/// Step 3: fine-tuning from the pre-trained encoder (the anchor) with a
/// fresh head and classifier on `labels`.
pub fn run_step3_finetune(
    features: &FeatureSet,
    labels: &PseudoLabelMap,
    cfg: &RunConfig,
    pretrained: &LayeredEncoder,
    aug: &Augmentation,
    iteration: usize,
) -> Result<FineTuneOutcome> {
    let seed = rng::derive_seed(cfg.seed, &[STEP3_STREAM, iteration as u64]);
    let state = FineTuneState::new(pretrained, cfg.encoder.embed_dim, labels.num_classes(), &cfg.train, seed)?;
    run_gated_epochs(state, features, labels, &cfg.train, &cfg.gate, aug, 0, None, seed)
}

#[derive(Clone, Debug)]
pub struct ContrastiveOutcome {
    pub net: SpeakerNet,
    pub verification: VerificationMetrics,
    pub losses: Vec<f64>,
    /// Per-layer distance from the pre-trained encoder after each epoch.
    pub drift: Vec<Vec<f64>>,
}

/// Contrastive fine-tuning of the pre-trained encoder with NT-Xent, using
/// the same optimisation settings as Step 3. Different-utterance positives
/// need ground truth and are a supervised diagnostic.
pub fn run_ssl_contrastive_e2e(
    features: &FeatureSet,
    truth: Option<&GroundTruth>,
    cfg: &RunConfig,
    pretrained: &LayeredEncoder,
    aug: &Augmentation,
    eval: &EvalSet,
    positives: PositiveSampling,
) -> Result<ContrastiveOutcome> {
    let speakers = match (positives, truth) {
        (PositiveSampling::SameUtterance, _) => None,
        (PositiveSampling::TruthDifferentUtterance, Some(t)) => {
            if t.ids != features.ids() {
                return Err(Error::Misaligned("ground truth does not follow the feature order".into()));
            }
            Some(t.speakers.as_slice())
        }
        (PositiveSampling::TruthDifferentUtterance, None) => {
            return Err(Error::BadConfig("different-utterance positives need ground truth".into()))
        }
    };
    let source = speakers.map_or(Positives::SameUtterance, Positives::SameSpeaker);
    let seed = rng::derive_seed(cfg.seed, &[SSL_STREAM]);
    let mut state = ContrastiveState::new(pretrained, cfg.encoder.embed_dim, &cfg.train, seed)?;
    let mut losses = Vec::new();
    let mut drift = Vec::new();
    for epoch in 0..cfg.train.epochs {
        let loss = contrastive_epoch(&mut state, features, source, &cfg.train, &cfg.contrastive.loss, Some(aug), epoch, seed)?;
        log::info!("contrastive epoch {epoch}: loss {loss:.4}");
        losses.push(loss);
        drift.push(layer_weight_distance(&state.net.encoder, &state.anchor)?);
    }
    state.net.quantize();
    let verification = evaluate(&state.net, eval, &cfg.eval)?;
    Ok(ContrastiveOutcome {
        net: state.net,
        verification,
        losses,
        drift,
    })
}
