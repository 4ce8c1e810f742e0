//! Self-distillation training of the initial model from unlabelled views.

use rand::Rng as _;
use rand::seq::SliceRandom;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::embedding::{dot, norm, Matrix};
use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::losses::{dino_center_update, dino_loss, ema_momentum_schedule, ema_update, DinoConfig, DinoRegularizer};
use crate::rng;
use crate::simulator::{make_views, Augmentation, ViewConfig};

use super::finetune::cosine_logits_backward;
use super::network::{AttentivePoolingHead, LayeredEncoder, NetGrad, ParamBlocks, SpeakerNet};
use super::optim::{apply_update, layer_rates, AnchorSnapshot, Optimizer, TrainConfig};

const SHUFFLE_STREAM: u64 = 0x6469_6e6f;
const VIEW_STREAM: u64 = 0x7669_6577;

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    /// Optimisation settings; margin and crop fields are unused here.
    pub train: TrainConfig,
    pub loss: DinoConfig,
    /// The teacher momentum ramps from `loss.ema_momentum` to this value.
    pub ema_momentum_end: f64,
    pub views: ViewConfig,
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.loss.num_global != self.views.num_global || self.loss.num_local != self.views.num_local {
            return Err(Error::BadConfig("view counts differ between loss and view settings".into()));
        }
        if self.loss.num_global == 0 {
            return Err(Error::BadConfig("distillation needs at least one global view".into()));
        }
        if self.loss.center.len() != self.loss.output_dim || self.loss.output_dim == 0 {
            return Err(Error::BadConfig("center must have one entry per output".into()));
        }
        for m in [self.loss.center_momentum, self.loss.ema_momentum, self.ema_momentum_end] {
            if !(0.0..=1.0).contains(&m) {
                return Err(Error::BadConfig(format!("momentum {m} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Student and EMA teacher, each a network plus a cosine prototype layer.
#[derive(Clone, Debug)]
pub struct DistillState {
    pub student: SpeakerNet,
    pub student_proj: Matrix,
    pub teacher: SpeakerNet,
    pub teacher_proj: Matrix,
    pub center: Vec<f64>,
    pub anchor: AnchorSnapshot,
    pub optimizer: Optimizer,
    pub steps_done: usize,
}

impl DistillState {
    pub fn new(encoder: &LayeredEncoder, embed_dim: usize, cfg: &DistillConfig, seed: u64) -> Result<Self> {
        let head = AttentivePoolingHead::fresh(encoder.num_layers(), encoder.hidden_dim(), embed_dim, seed);
        let student = SpeakerNet::new(encoder.clone(), head)?;
        let mut rng = rng::stream(seed, &[0x7072_6f6a]);
        let k = cfg.loss.output_dim;
        let data = (0..k * embed_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let proj = Matrix::from_vec(k, embed_dim, data)?;
        Ok(Self {
            teacher: student.clone(),
            teacher_proj: proj.clone(),
            student,
            student_proj: proj,
            center: cfg.loss.center.clone(),
            anchor: AnchorSnapshot::new(encoder),
            optimizer: Optimizer::new(cfg.train.optimizer),
            steps_done: 0,
        })
    }
}

/// `cos(e, w_k)` for every prototype row.
fn prototype_logits(e: &[f64], proj: &Matrix) -> Result<Vec<f64>> {
    let ne = norm(e);
    if !(ne >= 1e-12) {
        return Err(Error::ZeroNorm { norm: ne });
    }
    proj.iter_rows()
        .map(|w| {
            let nw = norm(w);
            if !(nw >= 1e-12) {
                return Err(Error::ZeroNorm { norm: nw });
            }
            Ok(dot(e, w) / (ne * nw))
        })
        .collect()
}

struct SampleOutcome {
    loss: f64,
    grad: NetGrad,
    grad_proj: Matrix,
    teacher_logits: Vec<Vec<f64>>,
}

fn sample_step(
    state: &DistillState,
    seq: &Matrix,
    cfg: &DinoConfig,
    views: &ViewConfig,
    aug: &Augmentation,
    reg: &dyn DinoRegularizer,
    seed: u64,
) -> Result<SampleOutcome> {
    let set = make_views(seq, views, aug, seed)?;
    let mut embeddings = Vec::with_capacity(set.views.len());
    let mut caches = Vec::with_capacity(set.views.len());
    let mut student_logits = Vec::with_capacity(set.views.len());
    for v in &set.views {
        let (e, cache) = state.student.forward(v)?;
        student_logits.push(prototype_logits(&e, &state.student_proj)?);
        embeddings.push(e);
        caches.push(cache);
    }
    let teacher_logits = set
        .global()
        .iter()
        .map(|v| prototype_logits(&state.teacher.embed(v)?, &state.teacher_proj))
        .collect::<Result<Vec<_>>>()?;
    let out = dino_loss(&student_logits, &teacher_logits, cfg)?;
    let (penalty, penalty_grads) = reg.penalty(&embeddings);

    let mut grad = NetGrad::zeros_like(&state.student);
    let mut grad_proj = Matrix::zeros(state.student_proj.rows(), state.student_proj.cols());
    for (v, cache) in caches.iter().enumerate() {
        let (mut ge, gp) = cosine_logits_backward(&embeddings[v], &state.student_proj, 1.0, &out.grad_student[v])?;
        ge.iter_mut().zip(&penalty_grads[v]).for_each(|(g, p)| *g += p);
        grad.add_scaled(1.0, &state.student.backward(cache, &ge)?);
        grad_proj
            .as_mut_slice()
            .iter_mut()
            .zip(gp.as_slice())
            .for_each(|(a, b)| *a += b);
    }
    Ok(SampleOutcome {
        loss: out.loss + penalty,
        grad,
        grad_proj,
        teacher_logits,
    })
}

/// One epoch of student updates, each followed by a centre update and an
/// EMA step of the teacher. Returns the mean per-sample loss.
pub fn distill_epoch(
    state: &mut DistillState,
    features: &FeatureSet,
    cfg: &DistillConfig,
    aug: &Augmentation,
    reg: &dyn DinoRegularizer,
    epoch: usize,
    seed: u64,
) -> Result<f64> {
    cfg.validate()?;
    let n = features.len();
    if n == 0 {
        return Err(Error::TooFewSamples { needed: 1, have: 0 });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[SHUFFLE_STREAM, epoch as u64]));
    let rates = layer_rates(&cfg.train, state.student.encoder.num_layers(), epoch);
    let steps_per_epoch = n.div_ceil(cfg.train.batch_size);
    let total_steps = steps_per_epoch * cfg.train.epochs;
    let k = cfg.loss.output_dim;
    let mut total_loss = 0.0;

    for batch in order.chunks(cfg.train.batch_size) {
        let mut loss_cfg = cfg.loss.clone();
        loss_cfg.center = state.center.clone();
        let outcomes: Vec<SampleOutcome> = batch
            .par_iter()
            .map(|&i| {
                let view_seed = rng::derive_seed(seed, &[VIEW_STREAM, epoch as u64, i as u64]);
                sample_step(state, features.sequence(i), &loss_cfg, &cfg.views, aug, reg, view_seed)
            })
            .collect::<Result<_>>()?;
        let inv_b = 1.0 / batch.len() as f64;
        let mut grad = NetGrad::zeros_like(&state.student);
        let mut grad_proj = Matrix::zeros(state.student_proj.rows(), state.student_proj.cols());
        let mut teacher_mean = vec![0.0; k];
        let mut teacher_count = 0usize;
        for o in &outcomes {
            total_loss += o.loss;
            grad.add_scaled(inv_b, &o.grad);
            grad_proj
                .as_mut_slice()
                .iter_mut()
                .zip(o.grad_proj.as_slice())
                .for_each(|(a, b)| *a += inv_b * b);
            for t in &o.teacher_logits {
                teacher_mean.iter_mut().zip(t).for_each(|(m, x)| *m += x);
                teacher_count += 1;
            }
        }
        teacher_mean.iter_mut().for_each(|m| *m /= teacher_count as f64);
        apply_update(
            &mut state.student,
            &grad,
            Some((&mut state.student_proj, &grad_proj)),
            &rates,
            &state.anchor,
            cfg.train.anchor_l2,
            &mut state.optimizer,
        )?;
        state.center = dino_center_update(&state.center, &teacher_mean, cfg.loss.center_momentum)?;
        let m = ema_momentum_schedule(state.steps_done, total_steps, cfg.loss.ema_momentum, cfg.ema_momentum_end);
        let t = ema_update(&state.teacher.flat(), &state.student.flat(), m)?;
        state.teacher.set_flat(&t)?;
        let tp = ema_update(state.teacher_proj.as_slice(), state.student_proj.as_slice(), m)?;
        state.teacher_proj.set_flat(&tp)?;
        state.steps_done += 1;
    }
    Ok(total_loss / n as f64)
}
