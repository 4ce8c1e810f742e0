//! Self-distillation objective with teacher centering and EMA updates.

use crate::error::{Error, Result};

use super::{log_sum_exp, softmax};

#[derive(Clone, Debug, PartialEq)]
pub struct DinoConfig {
    pub output_dim: usize,
    /// Low teacher temperature sharpens the teacher distribution.
    pub teacher_temp: f64,
    pub student_temp: f64,
    pub center: Vec<f64>,
    pub center_momentum: f64,
    pub ema_momentum: f64,
    pub num_global: usize,
    pub num_local: usize,
    /// Divide by the number of (teacher, student) cross terms.
    pub normalize: bool,
}

impl DinoConfig {
    pub fn new(output_dim: usize) -> Self {
        Self {
            output_dim,
            teacher_temp: 0.04,
            student_temp: 0.1,
            center: vec![0.0; output_dim],
            center_momentum: 0.9,
            ema_momentum: 0.996,
            num_global: 2,
            num_local: 4,
            normalize: true,
        }
    }

    pub fn num_views(&self) -> usize {
        self.num_global + self.num_local
    }
}

#[derive(Clone, Debug)]
pub struct DinoOutput {
    pub loss: f64,
    /// Gradient for each student view, same order as the input.
    pub grad_student: Vec<Vec<f64>>,
    /// Teacher distributions (after centering and sharpening).
    pub teacher_probs: Vec<Vec<f64>>,
}

/// Cross-entropy between teacher global views and every other student view.
///
/// `student_logits` holds all views with the globals first, in the same
/// order as `teacher_logits`. No gradient flows to the teacher.
pub fn dino_loss(
    student_logits: &[Vec<f64>],
    teacher_logits: &[Vec<f64>],
    cfg: &DinoConfig,
) -> Result<DinoOutput> {
    let k = cfg.output_dim;
    if !(cfg.teacher_temp > 0.0 && cfg.student_temp > 0.0) {
        return Err(Error::BadConfig("temperatures must be positive".into()));
    }
    if cfg.center.len() != k {
        return Err(Error::DimMismatch {
            expected: k,
            got: cfg.center.len(),
        });
    }
    if teacher_logits.len() != cfg.num_global || student_logits.len() < cfg.num_global {
        return Err(Error::ShapeMismatch(format!(
            "{} teacher and {} student views for {} globals",
            teacher_logits.len(),
            student_logits.len(),
            cfg.num_global
        )));
    }
    for v in student_logits.iter().chain(teacher_logits) {
        if v.len() != k {
            return Err(Error::DimMismatch {
                expected: k,
                got: v.len(),
            });
        }
    }

    let teacher_probs: Vec<Vec<f64>> = teacher_logits
        .iter()
        .map(|t| {
            let z: Vec<f64> = t
                .iter()
                .zip(&cfg.center)
                .map(|(x, c)| (x - c) / cfg.teacher_temp)
                .collect();
            softmax(&z)
        })
        .collect();
    let student_log_probs: Vec<Vec<f64>> = student_logits
        .iter()
        .map(|s| {
            let z: Vec<f64> = s.iter().map(|x| x / cfg.student_temp).collect();
            let lse = log_sum_exp(&z);
            z.iter().map(|x| x - lse).collect()
        })
        .collect();

    let terms = teacher_probs.len() * (student_logits.len() - 1);
    let weight = if cfg.normalize && terms > 0 {
        1.0 / terms as f64
    } else {
        1.0
    };

    let mut loss = 0.0;
    let mut grad_student = vec![vec![0.0; k]; student_logits.len()];
    for (ti, pt) in teacher_probs.iter().enumerate() {
        for (si, lps) in student_log_probs.iter().enumerate() {
            if si == ti {
                continue;
            }
            loss -= weight * pt.iter().zip(lps).map(|(a, b)| a * b).sum::<f64>();
            for c in 0..k {
                grad_student[si][c] += weight * (lps[c].exp() - pt[c]) / cfg.student_temp;
            }
        }
    }
    Ok(DinoOutput {
        loss,
        grad_student,
        teacher_probs,
    })
}

pub fn dino_center_update(center: &[f64], teacher_batch_mean: &[f64], momentum: f64) -> Result<Vec<f64>> {
    if center.len() != teacher_batch_mean.len() {
        return Err(Error::DimMismatch {
            expected: center.len(),
            got: teacher_batch_mean.len(),
        });
    }
    Ok(center
        .iter()
        .zip(teacher_batch_mean)
        .map(|(c, m)| momentum * c + (1.0 - momentum) * m)
        .collect())
}

pub fn ema_update(teacher: &[f64], student: &[f64], momentum: f64) -> Result<Vec<f64>> {
    if teacher.len() != student.len() {
        return Err(Error::DimMismatch {
            expected: teacher.len(),
            got: student.len(),
        });
    }
    Ok(teacher
        .iter()
        .zip(student)
        .map(|(t, s)| momentum * t + (1.0 - momentum) * s)
        .collect())
}

/// Cosine ramp of the EMA momentum from `start` at step 0 to `end` at `total`.
pub fn ema_momentum_schedule(step: usize, total: usize, start: f64, end: f64) -> f64 {
    if total == 0 {
        return end;
    }
    let progress = (step.min(total) as f64 / total as f64) * std::f64::consts::PI;
    end - (end - start) * (progress.cos() + 1.0) / 2.0
}

/// Extra penalty on student embeddings added to the distillation loss.
pub trait DinoRegularizer: Send + Sync {
    /// Returns the penalty and its gradient for each embedding.
    fn penalty(&self, embeddings: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>);
}

/// The default: no regularization.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoRegularizer;

impl DinoRegularizer for NoRegularizer {
    fn penalty(&self, embeddings: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
        (
            0.0,
            embeddings.iter().map(|e| vec![0.0; e.len()]).collect(),
        )
    }
}
