//! Training configuration, per-layer learning rates, parameter updates and
//! the drift diagnostic.

use serde::{Deserialize, Serialize};

use crate::embedding::Matrix;
use crate::error::{Error, Result};

use super::network::{ForwardCache, LayeredEncoder, NetGrad, ParamBlocks, SpeakerNet};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(Error::BadConfig(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// Multiplier applied to every rate after each epoch.
    pub lr_decay: f64,
    /// Layer `l` of `L` trains at `base_lr * layer_decay^(L - l)`.
    pub layer_decay: f64,
    /// Weight of `||theta - theta_anchor||^2` on encoder parameters.
    pub anchor_l2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub margin: f64,
    pub scale: f64,
    /// Training crop length in frames before the length multiplier.
    pub input_frames: usize,
    pub length_multiplier: f64,
    pub lmft_margin: f64,
    pub lmft_length_multiplier: f64,
    pub lmft_epochs: usize,
    pub optimizer: OptimizerKind,
    /// Augmentation applied to training crops.
    pub augment_noise: f64,
    pub augment_channel_scale: f64,
    /// Weight of the label-correction loss relative to the margin loss.
    pub lc_weight: f64,
    pub lc_sharpen: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.3,
            lr_decay: 0.95,
            layer_decay: 0.8,
            anchor_l2: 1e-3,
            batch_size: 32,
            epochs: 5,
            margin: 0.2,
            scale: 30.0,
            input_frames: 12,
            length_multiplier: 1.0,
            lmft_margin: 0.5,
            lmft_length_multiplier: 5.0 / 3.0,
            lmft_epochs: 2,
            optimizer: OptimizerKind::Sgd,
            augment_noise: 0.1,
            augment_channel_scale: 0.5,
            lc_weight: 1.0,
            lc_sharpen: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("base_lr", self.base_lr),
            ("lr_decay", self.lr_decay),
            ("scale", self.scale),
            ("length_multiplier", self.length_multiplier),
            ("lmft_length_multiplier", self.lmft_length_multiplier),
            ("lc_sharpen", self.lc_sharpen),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::BadConfig(format!("train.{name} must be positive, got {v}")));
            }
        }
        if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
            return Err(Error::BadConfig(format!(
                "train.layer_decay must be in (0, 1], got {}",
                self.layer_decay
            )));
        }
        let non_negative = [
            ("anchor_l2", self.anchor_l2),
            ("margin", self.margin),
            ("lmft_margin", self.lmft_margin),
            ("augment_noise", self.augment_noise),
            ("augment_channel_scale", self.augment_channel_scale),
            ("lc_weight", self.lc_weight),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::BadConfig(format!("train.{name} must be non-negative, got {v}")));
            }
        }
        if self.batch_size == 0 || self.input_frames == 0 {
            return Err(Error::BadConfig("train.batch_size and train.input_frames must be positive".into()));
        }
        Ok(())
    }

    /// Crop length after the length multiplier.
    pub fn crop_frames(&self) -> usize {
        ((self.input_frames as f64 * self.length_multiplier).round() as usize).max(1)
    }
}

/// Large-margin fine-tuning settings: larger margin, longer crops, a short
/// schedule. Applying it twice changes nothing further.
pub fn lmft_switch(cfg: &TrainConfig) -> TrainConfig {
    TrainConfig {
        margin: cfg.lmft_margin,
        length_multiplier: cfg.lmft_length_multiplier,
        epochs: cfg.lmft_epochs,
        ..cfg.clone()
    }
}

/// Learning rates for one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRates {
    /// Index 0 is the layer nearest the input.
    pub encoder: Vec<f64>,
    /// Head and any classifier weights.
    pub head: f64,
}

pub fn layer_rates(cfg: &TrainConfig, num_layers: usize, epoch: usize) -> LayerRates {
    let base = cfg.base_lr * cfg.lr_decay.powi(epoch as i32);
    let encoder: Vec<f64> = (1..=num_layers)
        .map(|l| base * cfg.layer_decay.powi((num_layers - l) as i32))
        .collect();
    assert!(
        encoder.windows(2).all(|w| w[0] <= w[1]),
        "layer rates must not decrease towards the output"
    );
    LayerRates { encoder, head: base }
}

/// Encoder parameters at the start of fine-tuning.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSnapshot {
    encoder: LayeredEncoder,
}

impl AnchorSnapshot {
    pub fn new(encoder: &LayeredEncoder) -> Self {
        Self {
            encoder: encoder.clone(),
        }
    }

    pub fn encoder(&self) -> &LayeredEncoder {
        &self.encoder
    }
}

/// `||theta_l - theta_l^anchor||_2` for each encoder layer, weights and bias
/// together.
pub fn layer_weight_distance(now: &LayeredEncoder, anchor: &AnchorSnapshot) -> Result<Vec<f64>> {
    if !now.same_shape(&anchor.encoder) {
        return Err(Error::ShapeMismatch("encoder and anchor differ in shape".into()));
    }
    Ok((0..now.num_layers())
        .map(|l| {
            now.layer_flat(l)
                .iter()
                .zip(anchor.encoder.layer_flat(l))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// One step over matching parameter/gradient blocks, each with its own
    /// learning rate.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[Vec<f64>], rates: &[f64]) {
        debug_assert!(params.len() == grads.len() && grads.len() == rates.len());
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for ((p, g), &lr) in params.into_iter().zip(grads).zip(rates) {
                    p.iter_mut().zip(g).for_each(|(x, d)| *x -= lr * d);
                }
            }
            OptimizerKind::Adam => {
                if self.first.is_empty() {
                    self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
                    self.second = self.first.clone();
                }
                let t = self.step as i32;
                let (c1, c2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
                for (b, (p, g)) in params.into_iter().zip(grads).enumerate() {
                    let (m, v) = (&mut self.first[b], &mut self.second[b]);
                    for i in 0..p.len() {
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                        p[i] -= rates[b] * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

/// Applies one update of the network (and optionally one extra weight
/// matrix trained at the head rate). The anchor penalty gradient
/// `2 lambda (theta - theta_anchor)` is added to every encoder block.
pub fn apply_update(
    net: &mut SpeakerNet,
    grad: &NetGrad,
    extra: Option<(&mut Matrix, &Matrix)>,
    rates: &LayerRates,
    anchor: &AnchorSnapshot,
    anchor_l2: f64,
    opt: &mut Optimizer,
) -> Result<()> {
    if !net.encoder.same_shape(anchor.encoder()) {
        return Err(Error::ShapeMismatch("anchor does not match the encoder".into()));
    }
    if rates.encoder.len() != net.encoder.num_layers() {
        return Err(Error::ShapeMismatch("one rate per encoder layer".into()));
    }
    let block_layers = net.encoder.block_layers();
    let mut grads: Vec<Vec<f64>> = grad.blocks().iter().map(|b| b.to_vec()).collect();
    if anchor_l2 > 0.0 {
        let params = net.encoder.blocks();
        for ((g, p), a) in grads.iter_mut().zip(params).zip(anchor.encoder().blocks()) {
            for ((gi, pi), ai) in g.iter_mut().zip(p).zip(a) {
                *gi += 2.0 * anchor_l2 * (pi - ai);
            }
        }
    }
    let mut lrs: Vec<f64> = block_layers.iter().map(|&l| rates.encoder[l]).collect();
    lrs.resize(grads.len(), rates.head);
    let mut params = net.blocks_mut();
    if let Some((w, gw)) = extra {
        if w.rows() != gw.rows() || w.cols() != gw.cols() {
            return Err(Error::ShapeMismatch("extra weight gradient".into()));
        }
        grads.push(gw.as_slice().to_vec());
        lrs.push(rates.head);
        params.push(w.as_mut_slice());
    }
    opt.step(params, &grads, &lrs);
    Ok(())
}

/// Backward pass for one cached forward, then a plain SGD update at the
/// epoch's per-layer rates.
pub fn backward_step(
    net: &mut SpeakerNet,
    cache: &ForwardCache,
    grad_embedding: &[f64],
    cfg: &TrainConfig,
    anchor: &AnchorSnapshot,
    epoch: usize,
) -> Result<()> {
    let grad = net.backward(cache, grad_embedding)?;
    let rates = layer_rates(cfg, net.encoder.num_layers(), epoch);
    apply_update(net, &grad, None, &rates, anchor, cfg.anchor_l2, &mut Optimizer::new(OptimizerKind::Sgd))
}
