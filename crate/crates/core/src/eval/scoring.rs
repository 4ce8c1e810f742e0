//! Multi-window embedding extraction and cosine trial scoring.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::embedding::{dot, norm, Matrix, TrialList, UtteranceId};
use crate::error::{Error, Result};

use super::verification::ScoredTrials;

/// Per-utterance window embeddings, one row per window.
pub type FrameEmbeddings = HashMap<UtteranceId, Matrix>;

/// Start offsets of `num_windows` evenly spaced windows of `window_len`
/// frames over a sequence of `len` frames. Offsets are rounded to the nearest
/// frame; a sequence no longer than the window yields all-zero offsets.
pub fn window_offsets(len: usize, window_len: usize, num_windows: usize) -> Vec<usize> {
    if len <= window_len || num_windows <= 1 {
        return vec![0; num_windows];
    }
    let span = (len - window_len) as f64;
    let last = (num_windows - 1) as f64;
    (0..num_windows)
        .map(|i| (i as f64 * span / last).round() as usize)
        .collect()
}

/// `window_len` frames starting at `offset`, wrapping to the start of the
/// sequence when it runs out (repeat padding).
pub fn window(seq: &Matrix, offset: usize, window_len: usize) -> Result<Matrix> {
    let t = seq.rows();
    if t == 0 {
        return Err(Error::EmptyUtterance);
    }
    let mut out = Matrix::zeros(window_len, seq.cols());
    for r in 0..window_len {
        out.row_mut(r).copy_from_slice(seq.row((offset + r) % t));
    }
    Ok(out)
}

/// Embeds `num_windows` evenly spaced windows of one utterance.
pub fn extract_frame_embeddings<F>(
    seq: &Matrix,
    num_windows: usize,
    window_len: usize,
    embed: F,
) -> Result<Matrix>
where
    F: Fn(&Matrix) -> Result<Vec<f64>>,
{
    if seq.rows() == 0 {
        return Err(Error::EmptyUtterance);
    }
    if num_windows == 0 || window_len == 0 {
        return Err(Error::BadConfig("need at least one window of one frame".into()));
    }
    let rows = window_offsets(seq.rows(), window_len, num_windows)
        .into_iter()
        .map(|o| embed(&window(seq, o, window_len)?))
        .collect::<Result<Vec<_>>>()?;
    Matrix::from_rows(&rows)
}

/// Mean of the l2-normalised rows. The dot product of two such means is the
/// average cosine over every cross pair of rows.
fn mean_unit(frames: &Matrix) -> Result<Vec<f64>> {
    let mut mean = vec![0.0; frames.cols()];
    for row in frames.iter_rows() {
        let n = norm(row);
        if !(n >= 1e-12) {
            return Err(Error::ZeroNorm { norm: n });
        }
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    let k = frames.rows() as f64;
    mean.iter_mut().for_each(|m| *m /= k);
    Ok(mean)
}

/// Scores each trial as the average cosine over all enrol/test window pairs.
pub fn score_trials(trials: &TrialList, frames: &FrameEmbeddings) -> Result<ScoredTrials> {
    let mut means: HashMap<&UtteranceId, Vec<f64>> = HashMap::new();
    for t in trials.rows() {
        for id in [&t.enroll, &t.test] {
            if !means.contains_key(id) {
                let m = frames
                    .get(id)
                    .ok_or_else(|| Error::MissingUtterance(id.to_string()))?;
                if m.rows() == 0 {
                    return Err(Error::EmptyUtterance);
                }
                means.insert(id, mean_unit(m)?);
            }
        }
    }
    let scores: Vec<f64> = trials
        .rows()
        .par_iter()
        .map(|t| dot(&means[&t.enroll], &means[&t.test]))
        .collect();
    ScoredTrials::new(trials.rows().iter().map(|t| t.is_target).collect(), scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::Trial;

    fn id(s: &str) -> UtteranceId {
        UtteranceId::new(s).unwrap()
    }

    #[test]
    fn offsets_tile_without_overlap() {
        let offs = window_offsets(15 * 4, 4, 15);
        assert_eq!(offs, (0..15).map(|i| i * 4).collect::<Vec<_>>());
        assert_eq!(window_offsets(4, 4, 15), vec![0; 15]);
    }

    #[test]
    fn short_sequence_wraps() {
        let seq = Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let w = window(&seq, 0, 5).unwrap();
        assert_eq!(w.as_slice(), &[1.0, 2.0, 1.0, 2.0, 1.0]);
    }

    #[test]
    fn two_window_example() {
        let mut frames = FrameEmbeddings::new();
        frames.insert(id("a"), Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        frames.insert(id("b"), Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap());
        let trials = TrialList::new(vec![
            Trial { is_target: true, enroll: id("a"), test: id("b") },
            Trial { is_target: false, enroll: id("b"), test: id("a") },
        ])
        .unwrap();
        let s = score_trials(&trials, &frames).unwrap();
        assert!((s.scores[0] - 0.5).abs() < 1e-12);
        assert_eq!(s.scores[0], s.scores[1]);
    }

    #[test]
    fn missing_utterance() {
        let trials = TrialList::new(vec![Trial { is_target: true, enroll: id("a"), test: id("b") }]).unwrap();
        assert!(matches!(
            score_trials(&trials, &FrameEmbeddings::new()),
            Err(Error::MissingUtterance(_))
        ));
    }
}
