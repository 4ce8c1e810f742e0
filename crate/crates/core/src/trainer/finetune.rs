//! Supervised fine-tuning on pseudo-labels with loss gating and label
//! correction.

use rand::Rng as _;
use rand::seq::SliceRandom;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::embedding::{dot, norm, Matrix, PseudoLabelMap};
use crate::error::{Error, Result};
use crate::eval::window;
use crate::features::FeatureSet;
use crate::losses::{aam_softmax_loss, lc_loss, lc_soft_target, normalize_backward, AamConfig};
use crate::lossgate::{GateCounts, GateDecision, GateStatus};
use crate::rng;
use crate::simulator::Augmentation;

use super::network::{AttentivePoolingHead, LayeredEncoder, NetGrad, SpeakerNet};
use super::optim::{apply_update, layer_rates, AnchorSnapshot, Optimizer, TrainConfig};

const SHUFFLE_STREAM: u64 = 0x7368_7566;
const SAMPLE_STREAM: u64 = 0x7361_6d70;

/// Per-sample margin losses from one epoch, in feature-set order.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub losses: Vec<f64>,
}

impl LossRecord {
    pub fn mean(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub record: LossRecord,
    /// Margin-free class posteriors per sample, used for the confidence gate.
    pub probs: Vec<Vec<f64>>,
    pub counts: GateCounts,
}

/// Network, classifier and optimizer state of one fine-tuning run.
#[derive(Clone, Debug)]
pub struct FineTuneState {
    pub net: SpeakerNet,
    pub class_weights: Matrix,
    pub anchor: AnchorSnapshot,
    pub optimizer: Optimizer,
}

impl FineTuneState {
    /// Starts from `encoder`, which also becomes the anchor, with a fresh
    /// head and fresh class weights.
    pub fn new(encoder: &LayeredEncoder, embed_dim: usize, num_classes: usize, cfg: &TrainConfig, seed: u64) -> Result<Self> {
        let head = AttentivePoolingHead::fresh(encoder.num_layers(), encoder.hidden_dim(), embed_dim, seed);
        let net = SpeakerNet::new(encoder.clone(), head)?;
        Ok(Self::from_net(net, num_classes, cfg, seed))
    }

    pub fn from_net(net: SpeakerNet, num_classes: usize, cfg: &TrainConfig, seed: u64) -> Self {
        let mut rng = rng::stream(seed, &[0x636c_6173_73]);
        let data = (0..num_classes * net.embed_dim())
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut class_weights = Matrix::from_vec(num_classes, net.embed_dim(), data).expect("shape by construction");
        // Unit rows: the cosine gradient on a row shrinks with its norm.
        for c in 0..num_classes {
            let row = class_weights.row_mut(c);
            let n = norm(row).max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
        }
        Self {
            anchor: AnchorSnapshot::new(&net.encoder),
            net,
            class_weights,
            optimizer: Optimizer::new(cfg.optimizer),
        }
    }
}

/// A random `len`-frame crop, repeat-padded if the sequence is shorter.
pub(crate) fn random_crop(seq: &Matrix, len: usize, rng: &mut rng::Rng) -> Result<Matrix> {
    let start = if seq.rows() > len {
        rng.random_range(0..=seq.rows() - len)
    } else {
        0
    };
    window(seq, start, len)
}

/// Backpropagates a gradient on `logits_c = scale * cos(e, w_c)` to the
/// embedding and the weight rows.
pub(crate) fn cosine_logits_backward(e: &[f64], weights: &Matrix, scale: f64, grad_logits: &[f64]) -> Result<(Vec<f64>, Matrix)> {
    let ne = norm(e);
    if !(ne >= 1e-12) {
        return Err(Error::ZeroNorm { norm: ne });
    }
    let eu: Vec<f64> = e.iter().map(|v| v / ne).collect();
    let mut grad_eu = vec![0.0; e.len()];
    let mut grad_w = Matrix::zeros(weights.rows(), weights.cols());
    for (c, (w, &g)) in weights.iter_rows().zip(grad_logits).enumerate() {
        if g == 0.0 {
            continue;
        }
        let nw = norm(w);
        if !(nw >= 1e-12) {
            return Err(Error::ZeroNorm { norm: nw });
        }
        let wu: Vec<f64> = w.iter().map(|v| v / nw).collect();
        grad_eu.iter_mut().zip(&wu).for_each(|(ge, x)| *ge += scale * g * x);
        let gwu: Vec<f64> = eu.iter().map(|x| scale * g * x).collect();
        grad_w.row_mut(c).copy_from_slice(&normalize_backward(&wu, nw, &gwu));
    }
    Ok((normalize_backward(&eu, ne, &grad_eu), grad_w))
}

/// `softmax(scale * cos(e, w_c))` over classes.
pub(crate) fn cosine_probs(e: &[f64], weights: &Matrix, scale: f64) -> Result<Vec<f64>> {
    let ne = norm(e);
    if !(ne >= 1e-12) {
        return Err(Error::ZeroNorm { norm: ne });
    }
    let logits: Vec<f64> = weights
        .iter_rows()
        .map(|w| scale * dot(e, w) / (ne * norm(w)))
        .collect();
    Ok(crate::losses::softmax(&logits))
}

struct SampleOutcome {
    loss: f64,
    probs: Vec<f64>,
    grad: Option<(NetGrad, Matrix)>,
}

fn sample_step(
    state: &FineTuneState,
    seq: &Matrix,
    label: usize,
    status: GateStatus,
    cfg: &TrainConfig,
    aug: Option<&Augmentation>,
    rng: &mut rng::Rng,
) -> Result<SampleOutcome> {
    let clean = random_crop(seq, cfg.crop_frames(), rng)?;
    let augmented = match aug {
        Some(a) => a.perturb(&clean, cfg.augment_noise, cfg.augment_channel_scale, rng),
        None => clean.clone(),
    };
    let (e, cache) = state.net.forward(&augmented)?;
    let aam_cfg = AamConfig {
        margin: cfg.margin,
        scale: cfg.scale,
        num_classes: state.class_weights.rows(),
    };
    let out = aam_softmax_loss(&Matrix::from_rows(&[e.clone()])?, &state.class_weights, &[label], &aam_cfg)?;
    let probs = out.probs.row(0).to_vec();
    let grad = match status {
        GateStatus::Reliable => {
            let g = state.net.backward(&cache, out.grad_embeddings.row(0))?;
            Some((g, out.grad_weights))
        }
        GateStatus::UnreliableCorrectable => {
            let clean_e = state.net.embed(&clean)?;
            let target = lc_soft_target(&cosine_probs(&clean_e, &state.class_weights, cfg.scale)?, cfg.lc_sharpen)?;
            let lc = lc_loss(&probs, &target)?;
            let scaled: Vec<f64> = lc.grad_logits.iter().map(|g| cfg.lc_weight * g).collect();
            let (ge, gw) = cosine_logits_backward(&e, &state.class_weights, cfg.scale, &scaled)?;
            Some((state.net.backward(&cache, &ge)?, gw))
        }
        GateStatus::UnreliableDiscarded => None,
    };
    Ok(SampleOutcome {
        loss: out.per_sample[0],
        probs,
        grad,
    })
}

/// One pass over the data in a seeded random order.
///
/// Every sample's margin loss is recorded before gating. With a gate,
/// reliable samples train on the margin loss, correctable samples on the
/// weighted label-correction loss against their sharpened clean-view
/// posterior, and discarded samples only see the anchor penalty. Without a
/// gate every sample is reliable. `epoch` selects the learning-rate decay and
/// the random streams.
pub fn train_epoch(
    state: &mut FineTuneState,
    features: &FeatureSet,
    labels: &PseudoLabelMap,
    cfg: &TrainConfig,
    gate: Option<&GateDecision>,
    aug: Option<&Augmentation>,
    epoch: usize,
    seed: u64,
) -> Result<EpochReport> {
    cfg.validate()?;
    let n = features.len();
    let targets = labels.labels_for(features.ids())?;
    if let Some(&bad) = targets.iter().find(|&&l| l >= state.class_weights.rows()) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            num_classes: state.class_weights.rows(),
        });
    }
    if let Some(g) = gate {
        if g.statuses.len() != n {
            return Err(Error::Misaligned(format!("{} gate statuses for {n} samples", g.statuses.len())));
        }
    }
    let status = |i: usize| gate.map_or(GateStatus::Reliable, |g| g.statuses[i]);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[SHUFFLE_STREAM, epoch as u64]));
    let rates = layer_rates(cfg, state.net.encoder.num_layers(), epoch);
    let mut losses = vec![0.0; n];
    let mut probs = vec![Vec::new(); n];

    for batch in order.chunks(cfg.batch_size) {
        let outcomes: Vec<SampleOutcome> = batch
            .par_iter()
            .map(|&i| {
                let mut rng = rng::stream(seed, &[SAMPLE_STREAM, epoch as u64, i as u64]);
                sample_step(state, features.sequence(i), targets[i], status(i), cfg, aug, &mut rng)
            })
            .collect::<Result<_>>()?;
        let inv_b = 1.0 / batch.len() as f64;
        let mut grad = NetGrad::zeros_like(&state.net);
        let mut grad_w = Matrix::zeros(state.class_weights.rows(), state.class_weights.cols());
        for (&i, o) in batch.iter().zip(outcomes) {
            losses[i] = o.loss;
            probs[i] = o.probs;
            if let Some((g, gw)) = o.grad {
                grad.add_scaled(inv_b, &g);
                grad_w
                    .as_mut_slice()
                    .iter_mut()
                    .zip(gw.as_slice())
                    .for_each(|(a, b)| *a += inv_b * b);
            }
        }
        apply_update(
            &mut state.net,
            &grad,
            Some((&mut state.class_weights, &grad_w)),
            &rates,
            &state.anchor,
            cfg.anchor_l2,
            &mut state.optimizer,
        )?;
    }
    let counts = match gate {
        Some(g) => g.counts(),
        None => GateCounts {
            reliable: n,
            correctable: 0,
            discarded: 0,
        },
    };
    Ok(EpochReport {
        record: LossRecord { losses },
        probs,
        counts,
    })
}

/// One embedding per utterance from its full frame sequence.
pub fn embed_all(net: &SpeakerNet, features: &FeatureSet) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = features
        .sequences()
        .par_iter()
        .map(|s| net.embed(s))
        .collect::<Result<_>>()?;
    Matrix::from_rows(&rows)
}
