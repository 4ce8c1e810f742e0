//! Speaker + channel + noise factor model.

use rand::Rng as _;
use rand::seq::SliceRandom;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::embedding::{dot, norm, Matrix, PseudoLabelMap, Trial, TrialList, UtteranceId};
use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::rng;

const WORLD_STREAM: u64 = 0x776f_726c_64;
const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    pub num_speakers: usize,
    pub utterances_per_speaker: usize,
    pub frames_per_utterance: usize,
    pub feature_dim: usize,
    /// Dimension of the subspace channel offsets live in.
    pub channel_rank: usize,
    /// Per-direction standard deviation of a channel offset.
    pub channel_std: f64,
    /// Size of the shared bank utterances draw their channel from.
    pub num_channels: usize,
    /// Per-coordinate standard deviation of frame noise.
    pub noise_std: f64,
    /// Minimum angle between any two speaker means, in degrees.
    pub min_angle_deg: f64,
    pub eval_speakers: usize,
    pub eval_utterances_per_speaker: usize,
    pub eval_frames_per_utterance: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_speakers: 60,
            utterances_per_speaker: 20,
            frames_per_utterance: 30,
            feature_dim: 32,
            channel_rank: 8,
            channel_std: 0.3,
            num_channels: 200,
            noise_std: 0.3,
            min_angle_deg: 45.0,
            eval_speakers: 20,
            eval_utterances_per_speaker: 10,
            eval_frames_per_utterance: 40,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::BadConfig(format!("world: {msg}")));
        if self.num_speakers < 2 {
            return bad("need at least two speakers");
        }
        if self.utterances_per_speaker == 0 || self.frames_per_utterance == 0 {
            return bad("utterance and frame counts must be positive");
        }
        if self.feature_dim == 0 || self.channel_rank > self.feature_dim {
            return bad("channel rank must not exceed the feature dimension");
        }
        if !(self.channel_std >= 0.0 && self.noise_std >= 0.0) {
            return bad("standard deviations must be non-negative");
        }
        if self.num_channels == 0 {
            return bad("need at least one channel");
        }
        if !(0.0..180.0).contains(&self.min_angle_deg) {
            return bad("minimum angle must be in [0, 180)");
        }
        if self.eval_speakers == 1 || (self.eval_speakers > 1 && self.eval_utterances_per_speaker < 2) {
            return bad("evaluation needs two speakers with two utterances each, or none");
        }
        if self.eval_speakers > 0 && self.eval_frames_per_utterance == 0 {
            return bad("evaluation utterances need frames");
        }
        Ok(())
    }
}

/// Sampled latent factors of a synthetic speaker population.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerWorld {
    pub config: WorldConfig,
    /// Unit-norm means; training speakers first, then evaluation speakers.
    pub speaker_means: Matrix,
    /// Orthonormal rows spanning the channel subspace.
    pub channel_basis: Matrix,
    /// Channel offsets, one row per channel in the bank.
    pub channel_bank: Matrix,
}

impl SpeakerWorld {
    pub fn channel_variance(&self) -> f64 {
        self.config.channel_std * self.config.channel_std
    }

    pub fn within_speaker_variance(&self) -> f64 {
        self.config.noise_std * self.config.noise_std
    }
}

/// Ground-truth speaker of each utterance. Kept apart from [`FeatureSet`] so
/// code that only receives features cannot see it.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub ids: Vec<UtteranceId>,
    pub speakers: Vec<usize>,
}

impl GroundTruth {
    pub fn label_map(&self) -> Result<PseudoLabelMap> {
        PseudoLabelMap::compacted(&self.ids, &self.speakers, 0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedDataset {
    pub features: FeatureSet,
    pub truth: GroundTruth,
    pub channel_ids: Vec<usize>,
}

/// Evaluation utterances and the list of every unordered pair as trials.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    pub dataset: GeneratedDataset,
    pub trials: TrialList,
}

fn gaussian_vec(rng: &mut rng::Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Gram-Schmidt on Gaussian draws.
fn orthonormal_rows(rng: &mut rng::Rng, rows: usize, dim: usize) -> Matrix {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while basis.len() < rows {
        let mut v = gaussian_vec(rng, dim);
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = norm(&v);
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    let mut m = Matrix::zeros(rows, dim);
    for (i, b) in basis.iter().enumerate() {
        m.row_mut(i).copy_from_slice(b);
    }
    m
}

pub fn generate_world(cfg: &WorldConfig) -> Result<SpeakerWorld> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, &[WORLD_STREAM]);
    let f = cfg.feature_dim;
    let total = cfg.num_speakers + cfg.eval_speakers;
    let max_cos = cfg.min_angle_deg.to_radians().cos();

    let mut means: Vec<Vec<f64>> = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while means.len() < total {
        attempts += 1;
        if attempts > 10_000 * total {
            return Err(Error::BadConfig(format!(
                "cannot place {total} speakers {}° apart in {f} dimensions",
                cfg.min_angle_deg
            )));
        }
        let v = gaussian_vec(&mut rng, f);
        let n = norm(&v);
        if n < 1e-6 {
            continue;
        }
        let v: Vec<f64> = v.iter().map(|x| x / n).collect();
        if means.iter().all(|m| dot(m, &v) <= max_cos) {
            means.push(v);
        }
    }

    let channel_basis = orthonormal_rows(&mut rng, cfg.channel_rank, f);
    let mut channel_bank = Matrix::zeros(cfg.num_channels, f);
    for c in 0..cfg.num_channels {
        let z = gaussian_vec(&mut rng, cfg.channel_rank);
        let row = channel_bank.row_mut(c);
        for (r, zr) in z.iter().enumerate() {
            for (o, b) in row.iter_mut().zip(channel_basis.row(r)) {
                *o += cfg.channel_std * zr * b;
            }
        }
    }
    Ok(SpeakerWorld {
        config: cfg.clone(),
        speaker_means: Matrix::from_rows(&means)?,
        channel_basis,
        channel_bank,
    })
}

struct Utterance {
    speaker: usize,
    channel: usize,
    frames: Matrix,
}

/// `frame_t = speaker_mean + channel_offset + noise_t`, one derived stream
/// per utterance so generation can run in parallel.
fn generate_split(
    world: &SpeakerWorld,
    stream: u64,
    speakers: std::ops::Range<usize>,
    per_speaker: usize,
    frames: usize,
    prefix: &str,
) -> Result<GeneratedDataset> {
    let cfg = &world.config;
    let f = cfg.feature_dim;
    let slots: Vec<(usize, usize)> = speakers
        .clone()
        .flat_map(|s| (0..per_speaker).map(move |u| (s, u)))
        .collect();
    let utterances: Vec<Utterance> = slots
        .par_iter()
        .map(|&(s, u)| {
            let mut rng = rng::stream(cfg.seed, &[stream, s as u64, u as u64]);
            let channel = rng.random_range(0..cfg.num_channels);
            let mut m = Matrix::zeros(frames, f);
            for t in 0..frames {
                let row = m.row_mut(t);
                for (j, o) in row.iter_mut().enumerate() {
                    let noise: f64 = rng.sample(StandardNormal);
                    *o = world.speaker_means.row(s)[j]
                        + world.channel_bank.row(channel)[j]
                        + cfg.noise_std * noise;
                }
            }
            Utterance {
                speaker: s - speakers.start,
                channel,
                frames: m,
            }
        })
        .collect();

    // Opaque ids in shuffled order, so neither names nor ordering carry the
    // speaker.
    let mut order: Vec<usize> = (0..utterances.len()).collect();
    order.shuffle(&mut rng::stream(cfg.seed, &[stream, u64::MAX]));
    let width = utterances.len().to_string().len().max(4);
    let mut ids = Vec::with_capacity(order.len());
    let mut sequences = Vec::with_capacity(order.len());
    let mut truth = Vec::with_capacity(order.len());
    let mut channel_ids = Vec::with_capacity(order.len());
    let mut slots_taken: Vec<Option<Utterance>> = utterances.into_iter().map(Some).collect();
    for (pos, &i) in order.iter().enumerate() {
        let u = slots_taken[i].take().expect("each utterance placed once");
        ids.push(UtteranceId::new(format!("{prefix}{pos:0width$}"))?);
        truth.push(u.speaker);
        channel_ids.push(u.channel);
        sequences.push(u.frames);
    }
    Ok(GeneratedDataset {
        features: FeatureSet::new(ids.clone(), f, sequences)?,
        truth: GroundTruth {
            ids,
            speakers: truth,
        },
        channel_ids,
    })
}

/// Training utterances of the training speakers.
pub fn generate_dataset(world: &SpeakerWorld) -> Result<GeneratedDataset> {
    let cfg = &world.config;
    generate_split(
        world,
        TRAIN_STREAM,
        0..cfg.num_speakers,
        cfg.utterances_per_speaker,
        cfg.frames_per_utterance,
        "utt",
    )
}

/// Utterances of the held-out speakers and every unordered pair as a trial.
pub fn generate_eval(world: &SpeakerWorld) -> Result<EvalSet> {
    let cfg = &world.config;
    if cfg.eval_speakers == 0 {
        return Err(Error::BadConfig("world has no evaluation speakers".into()));
    }
    let start = cfg.num_speakers;
    let dataset = generate_split(
        world,
        EVAL_STREAM,
        start..start + cfg.eval_speakers,
        cfg.eval_utterances_per_speaker,
        cfg.eval_frames_per_utterance,
        "eval",
    )?;
    let ids = &dataset.truth.ids;
    let spk = &dataset.truth.speakers;
    let mut rows = Vec::with_capacity(ids.len() * (ids.len() - 1) / 2);
    for i in 0..ids.len() {
        for j in i + 1..ids.len() {
            rows.push(Trial {
                is_target: spk[i] == spk[j],
                enroll: ids[i].clone(),
                test: ids[j].clone(),
            });
        }
    }
    Ok(EvalSet {
        dataset,
        trials: TrialList::new(rows)?,
    })
}
