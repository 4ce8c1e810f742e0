//! Run configuration.
//!
//! The file format is one `section.key = value` assignment per line. Blank
//! lines and lines whose first non-blank character is `#` are ignored; a
//! `#` after a value is part of the value. Every key is optional and
//! unknown keys are errors.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::clustering::ClusterParams;
use crate::error::{Error, Result};
use crate::eval::{DcfParams, NmiNormalizer};
use crate::losses::{DinoConfig, NtXentConfig};
use crate::simulator::{ViewConfig, WorldConfig};
use crate::trainer::{DistillConfig, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    #[default]
    PseudoLabel,
    SslContrastiveE2e,
}

impl FromStr for RunMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pseudo_label" => Ok(Self::PseudoLabel),
            "ssl_contrastive_e2e" => Ok(Self::SslContrastiveE2e),
            other => Err(Error::BadConfig(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveSampling {
    #[default]
    SameUtterance,
    TruthDifferentUtterance,
}

impl FromStr for PositiveSampling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same_utterance" => Ok(Self::SameUtterance),
            "truth_different_utterance" => Ok(Self::TruthDifferentUtterance),
            other => Err(Error::BadConfig(format!("unknown positive sampling {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub embed_dim: usize,
    /// Noise on the near-identity weights of the stand-in pre-trained model.
    pub init_noise: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            num_layers: 4,
            embed_dim: 16,
            init_noise: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateConfig {
    pub enabled: bool,
    /// Epochs trained before the gate first applies.
    pub warmup_epochs: usize,
    /// Epochs after the gate starts before label correction starts.
    pub lc_delay: usize,
    pub tau2: f64,
    /// Minimum Ashman's D between the two components for gating to apply.
    pub min_separation: f64,
    pub gmm_max_iters: usize,
    pub gmm_tol: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            warmup_epochs: 2,
            lc_delay: 1,
            tau2: 0.5,
            min_separation: 1.0,
            gmm_max_iters: 500,
            gmm_tol: 1e-10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub num_windows: usize,
    pub window_frames: usize,
    pub dcf: DcfParams,
    pub nmi_normalizer: NmiNormalizer,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            num_windows: 15,
            window_frames: 12,
            dcf: DcfParams::default(),
            nmi_normalizer: NmiNormalizer::Arithmetic,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastiveConfig {
    pub loss: NtXentConfig,
    pub positives: PositiveSampling,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: RunMode,
    pub num_refinement_iterations: usize,
    /// Frames per second of the synthetic features; used only to report
    /// durations.
    pub frames_per_second: f64,
    pub world: WorldConfig,
    pub encoder: EncoderConfig,
    pub distill: DistillConfig,
    pub train: TrainConfig,
    pub gate: GateConfig,
    pub cluster: ClusterParams,
    pub eval: EvalConfig,
    pub contrastive: ContrastiveConfig,
    /// The assignments exactly as written, keyed by `section.key`.
    pub entries: BTreeMap<String, String>,
    /// The file text exactly as read.
    pub raw: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let k = 128;
        Self {
            seed: 0,
            mode: RunMode::PseudoLabel,
            num_refinement_iterations: 2,
            frames_per_second: 4.0,
            world: WorldConfig::default(),
            encoder: EncoderConfig::default(),
            distill: DistillConfig {
                train: TrainConfig {
                    epochs: 10,
                    base_lr: 0.05,
                    ..TrainConfig::default()
                },
                // Few steps at desk scale, so a faster teacher than usual.
                loss: DinoConfig {
                    ema_momentum: 0.9,
                    ..DinoConfig::new(k)
                },
                ema_momentum_end: 0.99,
                views: ViewConfig::default(),
            },
            train: TrainConfig::default(),
            gate: GateConfig::default(),
            cluster: ClusterParams {
                k: 500,
                target_k: 60,
                max_iters: 50,
                tol: 1e-6,
                seed: 0,
            },
            eval: EvalConfig::default(),
            contrastive: ContrastiveConfig {
                loss: NtXentConfig::default(),
                positives: PositiveSampling::SameUtterance,
            },
            entries: BTreeMap::new(),
            raw: String::new(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::BadConfig(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::BadConfig(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

/// Config text with each override replacing the matching assignment (the
/// first one, in place) or appended at the end.
pub fn with_overrides(text: &str, overrides: &[(&str, &str)]) -> String {
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    for (key, value) in overrides {
        let at = lines.iter().position(|l| {
            let t = l.trim();
            !t.starts_with('#') && t.split_once('=').is_some_and(|(k, _)| k.trim() == *key)
        });
        let line = format!("{key} = {value}");
        match at {
            Some(i) => lines[i] = line,
            None => lines.push(line),
        }
    }
    let mut out = lines.join("\n");
    if text.ends_with('\n') || !overrides.is_empty() {
        out.push('\n');
    }
    out
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (no, line) in text.lines().enumerate() {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or_else(|| Error::Parse {
                line: no + 1,
                msg: "expected `section.key = value`".into(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !key.contains('.') {
                return Err(Error::Parse {
                    line: no + 1,
                    msg: format!("key {key:?} has no section prefix"),
                });
            }
            if cfg.entries.contains_key(key) {
                return Err(Error::Parse {
                    line: no + 1,
                    msg: format!("{key} assigned twice"),
                });
            }
            cfg.set(key, value).map_err(|e| Error::Parse {
                line: no + 1,
                msg: e.to_string(),
            })?;
            cfg.entries.insert(key.to_string(), value.to_string());
        }
        cfg.raw = text.to_string();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Parses `text` with `key = value` replacing any assignment of the
    /// same key, or appended when the key is absent.
    pub fn parse_with(text: &str, overrides: &[(&str, &str)]) -> Result<Self> {
        Self::parse(&with_overrides(text, overrides))
    }

    /// Applies one assignment.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let w = &mut self.world;
        let d = &mut self.distill;
        let t = &mut self.train;
        let g = &mut self.gate;
        let c = &mut self.cluster;
        let e = &mut self.eval;
        match key {
            "run.seed" => {
                self.seed = parse(key, v)?;
                self.world.seed = self.seed;
            }
            "run.mode" => self.mode = parse(key, v)?,
            "run.num_refinement_iterations" => self.num_refinement_iterations = parse(key, v)?,
            "run.frames_per_second" => self.frames_per_second = parse(key, v)?,

            "world.num_speakers" => w.num_speakers = parse(key, v)?,
            "world.utterances_per_speaker" => w.utterances_per_speaker = parse(key, v)?,
            "world.frames_per_utterance" => w.frames_per_utterance = parse(key, v)?,
            "world.feature_dim" => w.feature_dim = parse(key, v)?,
            "world.channel_rank" => w.channel_rank = parse(key, v)?,
            "world.channel_std" => w.channel_std = parse(key, v)?,
            "world.num_channels" => w.num_channels = parse(key, v)?,
            "world.noise_std" => w.noise_std = parse(key, v)?,
            "world.min_angle_deg" => w.min_angle_deg = parse(key, v)?,
            "world.eval_speakers" => w.eval_speakers = parse(key, v)?,
            "world.eval_utterances_per_speaker" => w.eval_utterances_per_speaker = parse(key, v)?,
            "world.eval_frames_per_utterance" => w.eval_frames_per_utterance = parse(key, v)?,

            "encoder.hidden_dim" => self.encoder.hidden_dim = parse(key, v)?,
            "encoder.num_layers" => self.encoder.num_layers = parse(key, v)?,
            "encoder.embed_dim" => self.encoder.embed_dim = parse(key, v)?,
            "encoder.init_noise" => self.encoder.init_noise = parse(key, v)?,

            "dino.epochs" => d.train.epochs = parse(key, v)?,
            "dino.batch_size" => d.train.batch_size = parse(key, v)?,
            "dino.base_lr" => d.train.base_lr = parse(key, v)?,
            "dino.lr_decay" => d.train.lr_decay = parse(key, v)?,
            "dino.layer_decay" => d.train.layer_decay = parse(key, v)?,
            "dino.anchor_l2" => d.train.anchor_l2 = parse(key, v)?,
            "dino.optimizer" => d.train.optimizer = parse(key, v)?,
            "dino.output_dim" => {
                d.loss.output_dim = parse(key, v)?;
                d.loss.center = vec![0.0; d.loss.output_dim];
            }
            "dino.teacher_temp" => d.loss.teacher_temp = parse(key, v)?,
            "dino.student_temp" => d.loss.student_temp = parse(key, v)?,
            "dino.center_momentum" => d.loss.center_momentum = parse(key, v)?,
            "dino.ema_momentum" => d.loss.ema_momentum = parse(key, v)?,
            "dino.ema_momentum_end" => d.ema_momentum_end = parse(key, v)?,
            "dino.normalize" => d.loss.normalize = parse_bool(key, v)?,
            "dino.num_global" => {
                d.loss.num_global = parse(key, v)?;
                d.views.num_global = d.loss.num_global;
            }
            "dino.num_local" => {
                d.loss.num_local = parse(key, v)?;
                d.views.num_local = d.loss.num_local;
            }
            "dino.global_frames" => d.views.global_len = parse(key, v)?,
            "dino.local_frames" => d.views.local_len = parse(key, v)?,
            "dino.global_noise" => d.views.global_noise = parse(key, v)?,
            "dino.local_noise" => d.views.local_noise = parse(key, v)?,
            "dino.global_channel_scale" => d.views.global_channel_scale = parse(key, v)?,
            "dino.local_channel_scale" => d.views.local_channel_scale = parse(key, v)?,

            "train.base_lr" => t.base_lr = parse(key, v)?,
            "train.lr_decay" => t.lr_decay = parse(key, v)?,
            "train.layer_decay" => t.layer_decay = parse(key, v)?,
            "train.anchor_l2" => t.anchor_l2 = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.margin" => t.margin = parse(key, v)?,
            "train.scale" => t.scale = parse(key, v)?,
            "train.input_frames" => t.input_frames = parse(key, v)?,
            "train.lmft_margin" => t.lmft_margin = parse(key, v)?,
            "train.lmft_length_multiplier" => t.lmft_length_multiplier = parse(key, v)?,
            "train.lmft_epochs" => t.lmft_epochs = parse(key, v)?,
            "train.optimizer" => t.optimizer = parse(key, v)?,
            "train.augment_noise" => t.augment_noise = parse(key, v)?,
            "train.augment_channel_scale" => t.augment_channel_scale = parse(key, v)?,
            "train.lc_weight" => t.lc_weight = parse(key, v)?,
            "train.lc_sharpen" => t.lc_sharpen = parse(key, v)?,

            "gate.enabled" => g.enabled = parse_bool(key, v)?,
            "gate.warmup_epochs" => g.warmup_epochs = parse(key, v)?,
            "gate.lc_delay" => g.lc_delay = parse(key, v)?,
            "gate.tau2" => g.tau2 = parse(key, v)?,
            "gate.min_separation" => g.min_separation = parse(key, v)?,
            "gate.gmm_max_iters" => g.gmm_max_iters = parse(key, v)?,
            "gate.gmm_tol" => g.gmm_tol = parse(key, v)?,

            "cluster.k" => c.k = parse(key, v)?,
            "cluster.target_k" => c.target_k = parse(key, v)?,
            "cluster.max_iters" => c.max_iters = parse(key, v)?,
            "cluster.tol" => c.tol = parse(key, v)?,

            "eval.num_windows" => e.num_windows = parse(key, v)?,
            "eval.window_frames" => e.window_frames = parse(key, v)?,
            "eval.p_target" => e.dcf.p_target = parse(key, v)?,
            "eval.c_miss" => e.dcf.c_miss = parse(key, v)?,
            "eval.c_fa" => e.dcf.c_fa = parse(key, v)?,
            "eval.nmi_normalizer" => e.nmi_normalizer = parse(key, v)?,

            "contrastive.temperature" => self.contrastive.loss.temperature = parse(key, v)?,
            "contrastive.positives" => self.contrastive.positives = parse(key, v)?,

            _ => return Err(Error::BadConfig(format!("unknown key {key}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.distill.validate()?;
        self.train.validate()?;
        let enc = &self.encoder;
        if enc.num_layers < 2 || enc.hidden_dim == 0 || enc.embed_dim == 0 {
            return Err(Error::BadConfig("encoder needs two layers and positive dimensions".into()));
        }
        if !(self.gate.tau2 >= 0.0 && self.gate.tau2 < 1.0) {
            return Err(Error::BadConfig("gate.tau2 must be in [0, 1)".into()));
        }
        if self.cluster.k == 0 || self.cluster.target_k == 0 || self.cluster.target_k > self.cluster.k {
            return Err(Error::BadConfig("need 1 <= cluster.target_k <= cluster.k".into()));
        }
        if self.eval.num_windows == 0 || self.eval.window_frames == 0 {
            return Err(Error::BadConfig("eval windows must be positive".into()));
        }
        let dcf = &self.eval.dcf;
        if !(dcf.p_target > 0.0 && dcf.p_target < 1.0 && dcf.c_miss > 0.0 && dcf.c_fa > 0.0) {
            return Err(Error::BadConfig("eval.p_target must be in (0, 1) and costs positive".into()));
        }
        if !(self.frames_per_second > 0.0) {
            return Err(Error::BadConfig("run.frames_per_second must be positive".into()));
        }
        if self.world.eval_speakers < 2 {
            return Err(Error::BadConfig("the pipeline needs at least two evaluation speakers".into()));
        }
        Ok(())
    }

    /// Cluster settings with the run seed folded in.
    pub fn cluster_params(&self, iteration: usize) -> ClusterParams {
        ClusterParams {
            seed: crate::rng::derive_seed(self.seed, &[0x636c_7573, iteration as u64]),
            ..self.cluster
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_assignments_and_keeps_text() {
        let text = "# desk\n\nrun.seed = 7\ntrain.margin = 0.3\ngate.enabled = off\neval.nmi_normalizer = geometric\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.margin, 0.3);
        assert!(!cfg.gate.enabled);
        assert_eq!(cfg.eval.nmi_normalizer, NmiNormalizer::Geometric);
        assert_eq!(cfg.raw, text);
        assert_eq!(cfg.entries["train.margin"], "0.3");
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        assert!(matches!(RunConfig::parse("train.nope = 1"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(RunConfig::parse("run.seed = 1\nrun.seed = 2"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(RunConfig::parse("seed = 1"), Err(Error::Parse { .. })));
        assert!(matches!(RunConfig::parse("run.seed"), Err(Error::Parse { .. })));
        assert!(RunConfig::parse("run.seed = 1 # trailing").is_err());
    }

    #[test]
    fn cross_field_validation() {
        assert!(RunConfig::parse("cluster.k = 10\ncluster.target_k = 20").is_err());
        assert!(RunConfig::parse("train.layer_decay = 1.5").is_err());
    }
}
