//! Embedding data model and similarity primitives.
//!
//! Everything numeric is computed in `f64`. [`EmbeddingMatrix`] is the
//! interchange type and stores `f32`, which is what goes to disk.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const NORM_FLOOR: f64 = 1e-12;

/// Non-empty utterance identifier without whitespace.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct UtteranceId(String);

impl UtteranceId {
    pub fn new(value: impl Into<String>) -> Result<Self> {
        let value = value.into();
        if value.is_empty() || value.chars().any(|c| c.is_whitespace() || c == '\0') {
            return Err(Error::InvalidId(value));
        }
        Ok(Self(value))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for UtteranceId {
    type Error = Error;
    fn try_from(value: String) -> Result<Self> {
        Self::new(value)
    }
}

impl From<UtteranceId> for String {
    fn from(id: UtteranceId) -> String {
        id.0
    }
}

impl fmt::Display for UtteranceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Dense row-major `f64` matrix used for computation.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimMismatch {
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }
}

/// Utterance embeddings keyed by id; the on-disk interchange type.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    ids: Vec<UtteranceId>,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<UtteranceId>, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::ShapeMismatch("embedding dim must be >= 1".into()));
        }
        if data.len() != ids.len() * dim {
            return Err(Error::DimMismatch {
                expected: ids.len() * dim,
                got: data.len(),
            });
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id) {
                return Err(Error::DuplicateId(id.to_string()));
            }
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "row {} col {}",
                pos / dim,
                pos % dim
            )));
        }
        Ok(Self { ids, dim, data })
    }

    /// Rounds `f64` rows to the `f32` storage precision.
    pub fn from_f64_rows(ids: Vec<UtteranceId>, rows: &Matrix) -> Result<Self> {
        if rows.rows() != ids.len() {
            return Err(Error::LengthMismatch {
                left: ids.len(),
                right: rows.rows(),
            });
        }
        let data = rows.as_slice().iter().map(|&v| v as f32).collect();
        Self::new(ids, rows.cols(), data)
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

    pub fn raw(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| f64::from(v)).collect()
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix {
            rows: self.len(),
            cols: self.dim,
            data: self.data.iter().map(|&v| f64::from(v)).collect(),
        }
    }

    /// Same ids, every row scaled to unit norm.
    pub fn l2_normalized(&self) -> Result<Matrix> {
        let mut m = self.to_matrix();
        for i in 0..m.rows() {
            let unit = l2_normalize(m.row(i))?;
            m.row_mut(i).copy_from_slice(&unit);
        }
        Ok(m)
    }

    /// Rows reordered by `order` (a permutation of `0..len`).
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let ids = order.iter().map(|&i| self.ids[i].clone()).collect();
        let data = order
            .iter()
            .flat_map(|&i| self.row(i).iter().copied())
            .collect();
        Self::new(ids, self.dim, data)
    }
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n >= NORM_FLOOR) {
        return Err(Error::ZeroNorm { norm: n });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    let (nu, nv) = (norm(u), norm(v));
    for n in [nu, nv] {
        if !(n >= NORM_FLOOR) {
            return Err(Error::ZeroNorm { norm: n });
        }
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Utterance → cluster assignment produced at one pipeline iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelMap {
    assignments: BTreeMap<UtteranceId, usize>,
    iteration: usize,
    num_classes: usize,
}

impl PseudoLabelMap {
    /// Validates that labels are compact (`0..num_classes`, all used).
    pub fn new(assignments: BTreeMap<UtteranceId, usize>, iteration: usize) -> Result<Self> {
        let num_classes = assignments.values().max().map_or(0, |m| m + 1);
        if num_classes == 0 {
            return Err(Error::BadConfig("label map is empty".into()));
        }
        let mut used = vec![false; num_classes];
        for &l in assignments.values() {
            used[l] = true;
        }
        if let Some(gap) = used.iter().position(|u| !u) {
            return Err(Error::BadConfig(format!(
                "labels are not compact: class {gap} unused"
            )));
        }
        Ok(Self {
            assignments,
            iteration,
            num_classes,
        })
    }

    /// Renumbers arbitrary labels to `0..C` in order of first appearance
    /// along `ids`.
    pub fn compacted(ids: &[UtteranceId], raw: &[usize], iteration: usize) -> Result<Self> {
        if ids.len() != raw.len() {
            return Err(Error::LengthMismatch {
                left: ids.len(),
                right: raw.len(),
            });
        }
        let mut remap = BTreeMap::new();
        let mut assignments = BTreeMap::new();
        for (id, &r) in ids.iter().zip(raw) {
            let next = remap.len();
            let label = *remap.entry(r).or_insert(next);
            if assignments.insert(id.clone(), label).is_some() {
                return Err(Error::DuplicateId(id.to_string()));
            }
        }
        Self::new(assignments, iteration)
    }

    pub fn get(&self, id: &UtteranceId) -> Option<usize> {
        self.assignments.get(id).copied()
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&UtteranceId, usize)> {
        self.assignments.iter().map(|(k, &v)| (k, v))
    }

    /// Labels aligned to `ids`.
    pub fn labels_for(&self, ids: &[UtteranceId]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| {
                self.get(id)
                    .ok_or_else(|| Error::MissingUtterance(id.to_string()))
            })
            .collect()
    }

    pub fn with_iteration(mut self, iteration: usize) -> Self {
        self.iteration = iteration;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub is_target: bool,
    pub enroll: UtteranceId,
    pub test: UtteranceId,
}

/// Ordered verification trials.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrialList {
    rows: Vec<Trial>,
}

impl TrialList {
    pub fn new(rows: Vec<Trial>) -> Result<Self> {
        if let Some(t) = rows.iter().find(|t| t.enroll == t.test) {
            return Err(Error::BadConfig(format!(
                "trial compares {} with itself",
                t.enroll
            )));
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[Trial] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}
