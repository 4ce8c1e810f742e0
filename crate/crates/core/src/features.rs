//! Per-utterance frame sequences.

use std::collections::HashMap;

use crate::embedding::{Matrix, UtteranceId};
use crate::error::{Error, Result};

/// Frame sequences (frames × dim) keyed by utterance id, in a fixed order.
///
/// This is the handle handed to training and clustering code. It carries no
/// speaker identity.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    ids: Vec<UtteranceId>,
    dim: usize,
    sequences: Vec<Matrix>,
    index: HashMap<UtteranceId, usize>,
}

impl FeatureSet {
    pub fn new(ids: Vec<UtteranceId>, dim: usize, sequences: Vec<Matrix>) -> Result<Self> {
        if ids.len() != sequences.len() {
            return Err(Error::LengthMismatch {
                left: ids.len(),
                right: sequences.len(),
            });
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, (id, seq)) in ids.iter().zip(&sequences).enumerate() {
            if seq.cols() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    got: seq.cols(),
                });
            }
            if seq.rows() == 0 {
                return Err(Error::EmptyUtterance);
            }
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateId(id.to_string()));
            }
        }
        Ok(Self {
            ids,
            dim,
            sequences,
            index,
        })
    }

    pub fn ids(&self) -> &[UtteranceId] {
        &self.ids
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn sequence(&self, i: usize) -> &Matrix {
        &self.sequences[i]
    }

    pub fn sequences(&self) -> &[Matrix] {
        &self.sequences
    }

    pub fn position(&self, id: &UtteranceId) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &UtteranceId) -> Option<&Matrix> {
        self.position(id).map(|i| &self.sequences[i])
    }

    /// Mean of each utterance's frames.
    pub fn mean_pooled(&self) -> Matrix {
        let mut out = Matrix::zeros(self.len(), self.dim);
        for (i, seq) in self.sequences.iter().enumerate() {
            let row = out.row_mut(i);
            for frame in seq.iter_rows() {
                for (o, v) in row.iter_mut().zip(frame) {
                    *o += v;
                }
            }
            let n = seq.rows() as f64;
            row.iter_mut().for_each(|v| *v /= n);
        }
        out
    }
}
