//! Contrastive fine-tuning with NT-Xent over pairs of views.

use rand::Rng as _;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::embedding::Matrix;
use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::losses::{nt_xent_loss, NtXentConfig};
use crate::rng;
use crate::simulator::Augmentation;

use super::finetune::random_crop;
use super::network::{ForwardCache, LayeredEncoder, NetGrad, SpeakerNet, AttentivePoolingHead};
use super::optim::{apply_update, layer_rates, AnchorSnapshot, Optimizer, TrainConfig};

const SHUFFLE_STREAM: u64 = 0x6e74_7873;
const PAIR_STREAM: u64 = 0x7061_6972;

/// Where the positive partner of each anchor crop comes from.
#[derive(Clone, Copy, Debug)]
pub enum Positives<'a> {
    /// Another crop of the same utterance.
    SameUtterance,
    /// A crop of a different utterance with the same speaker label, aligned
    /// with the feature set. Supervised: only for diagnostics.
    SameSpeaker(&'a [usize]),
}

#[derive(Clone, Debug)]
pub struct ContrastiveState {
    pub net: SpeakerNet,
    pub anchor: AnchorSnapshot,
    pub optimizer: Optimizer,
}

impl ContrastiveState {
    pub fn new(encoder: &LayeredEncoder, embed_dim: usize, cfg: &TrainConfig, seed: u64) -> Result<Self> {
        let head = AttentivePoolingHead::fresh(encoder.num_layers(), encoder.hidden_dim(), embed_dim, seed);
        Ok(Self {
            net: SpeakerNet::new(encoder.clone(), head)?,
            anchor: AnchorSnapshot::new(encoder),
            optimizer: Optimizer::new(cfg.optimizer),
        })
    }
}

/// Utterance indices grouped by speaker, for partner sampling.
fn speaker_groups(speakers: &[usize]) -> Vec<Vec<usize>> {
    let num = speakers.iter().max().map_or(0, |m| m + 1);
    let mut groups = vec![Vec::new(); num];
    for (i, &s) in speakers.iter().enumerate() {
        groups[s].push(i);
    }
    groups
}

/// One epoch; rows `i` and `i + B` of each batch are positives, every other
/// row is a negative. Returns the mean batch loss.
pub fn contrastive_epoch(
    state: &mut ContrastiveState,
    features: &FeatureSet,
    positives: Positives<'_>,
    cfg: &TrainConfig,
    nt: &NtXentConfig,
    aug: Option<&Augmentation>,
    epoch: usize,
    seed: u64,
) -> Result<f64> {
    cfg.validate()?;
    let n = features.len();
    let groups = match positives {
        Positives::SameUtterance => None,
        Positives::SameSpeaker(s) => {
            if s.len() != n {
                return Err(Error::Misaligned(format!("{} speaker labels for {n} utterances", s.len())));
            }
            Some((s, speaker_groups(s)))
        }
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[SHUFFLE_STREAM, epoch as u64]));
    let rates = layer_rates(cfg, state.net.encoder.num_layers(), epoch);
    let len = cfg.crop_frames();
    let mut loss_sum = 0.0;
    let mut batches = 0usize;

    for batch in order.chunks(cfg.batch_size) {
        let b = batch.len();
        // Crop both sides of every pair, then embed all 2B views.
        let views: Vec<(Matrix, Matrix)> = batch
            .par_iter()
            .map(|&i| {
                let mut rng = rng::stream(seed, &[PAIR_STREAM, epoch as u64, i as u64]);
                let partner = match &groups {
                    None => i,
                    Some((speakers, groups)) => {
                        let same = &groups[speakers[i]];
                        if same.len() > 1 {
                            let mut j = same[rng.random_range(0..same.len() - 1)];
                            if j == i {
                                j = same[same.len() - 1];
                            }
                            j
                        } else {
                            i
                        }
                    }
                };
                let a = random_crop(features.sequence(i), len, &mut rng)?;
                let p = random_crop(features.sequence(partner), len, &mut rng)?;
                Ok(match aug {
                    Some(g) => (
                        g.perturb(&a, cfg.augment_noise, cfg.augment_channel_scale, &mut rng),
                        g.perturb(&p, cfg.augment_noise, cfg.augment_channel_scale, &mut rng),
                    ),
                    None => (a, p),
                })
            })
            .collect::<Result<_>>()?;
        let inputs: Vec<&Matrix> = views.iter().map(|v| &v.0).chain(views.iter().map(|v| &v.1)).collect();
        let forwards: Vec<(Vec<f64>, ForwardCache)> = inputs
            .par_iter()
            .map(|x| state.net.forward(x))
            .collect::<Result<_>>()?;
        let z = Matrix::from_rows(&forwards.iter().map(|f| f.0.clone()).collect::<Vec<_>>())?;
        let pairing: Vec<usize> = (0..2 * b).map(|r| (r + b) % (2 * b)).collect();
        let out = nt_xent_loss(&z, &pairing, nt)?;
        let grads: Vec<NetGrad> = forwards
            .par_iter()
            .enumerate()
            .map(|(r, (_, cache))| state.net.backward(cache, out.grad.row(r)))
            .collect::<Result<_>>()?;
        let mut grad = NetGrad::zeros_like(&state.net);
        for g in &grads {
            grad.add_scaled(1.0, g);
        }
        apply_update(&mut state.net, &grad, None, &rates, &state.anchor, cfg.anchor_l2, &mut state.optimizer)?;
        loss_sum += out.loss;
        batches += 1;
    }
    Ok(loss_sum / batches.max(1) as f64)
}
