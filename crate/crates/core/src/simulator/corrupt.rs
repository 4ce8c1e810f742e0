//! Controlled label noise.

use std::collections::BTreeMap;

use rand::Rng as _;

use crate::embedding::{PseudoLabelMap, UtteranceId};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct CorruptedLabels {
    pub labels: PseudoLabelMap,
    /// True for every utterance whose label was changed.
    pub corrupted: BTreeMap<UtteranceId, bool>,
}

impl CorruptedLabels {
    pub fn num_corrupted(&self) -> usize {
        self.corrupted.values().filter(|&&c| c).count()
    }

    /// Corruption flags aligned to `ids`.
    pub fn mask_for(&self, ids: &[UtteranceId]) -> Result<Vec<bool>> {
        ids.iter()
            .map(|id| {
                self.corrupted
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::MissingUtterance(id.to_string()))
            })
            .collect()
    }
}

/// Moves exactly `floor(p * N)` utterances to a uniformly drawn other class.
///
/// Labels keep their numbering unless a class ends up empty, in which case
/// the map is compacted.
pub fn corrupt_labels(truth: &PseudoLabelMap, fraction: f64, seed: u64) -> Result<CorruptedLabels> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::BadFraction(fraction));
    }
    let n = truth.len();
    let count = (fraction * n as f64).floor() as usize;
    let c = truth.num_classes();
    if count > 0 && c < 2 {
        return Err(Error::BadConfig("corruption needs at least two classes".into()));
    }
    let mut rng = rng::stream(seed, &[0x636f_7272_7570_74]);
    let chosen = rand::seq::index::sample(&mut rng, n, count);
    let mut flip = vec![false; n];
    for i in chosen.iter() {
        flip[i] = true;
    }
    let mut ids = Vec::with_capacity(n);
    let mut raw = Vec::with_capacity(n);
    let mut corrupted = BTreeMap::new();
    for (i, (id, label)) in truth.iter().enumerate() {
        let new = if flip[i] {
            (label + 1 + rng.random_range(0..c - 1)) % c
        } else {
            label
        };
        ids.push(id.clone());
        raw.push(new);
        corrupted.insert(id.clone(), flip[i]);
    }
    let assignments: BTreeMap<UtteranceId, usize> = ids.iter().cloned().zip(raw.iter().copied()).collect();
    let labels = match PseudoLabelMap::new(assignments, truth.iteration()) {
        Ok(l) => l,
        Err(_) => PseudoLabelMap::compacted(&ids, &raw, truth.iteration())?,
    };
    Ok(CorruptedLabels { labels, corrupted })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn truth(n: usize, c: usize) -> PseudoLabelMap {
        let ids: Vec<UtteranceId> = (0..n).map(|i| UtteranceId::new(format!("u{i:04}")).unwrap()).collect();
        let raw: Vec<usize> = (0..n).map(|i| i % c).collect();
        PseudoLabelMap::compacted(&ids, &raw, 0).unwrap()
    }

    #[test]
    fn zero_fraction_is_identity() {
        let t = truth(50, 5);
        let out = corrupt_labels(&t, 0.0, 1).unwrap();
        assert_eq!(out.labels, t);
        assert_eq!(out.num_corrupted(), 0);
    }

    #[test]
    fn exact_count_and_never_own_class() {
        let t = truth(1000, 10);
        let out = corrupt_labels(&t, 0.2, 4).unwrap();
        assert_eq!(out.num_corrupted(), 200);
        let changed = t
            .iter()
            .filter(|(id, l)| out.labels.get(id) != Some(*l))
            .count();
        assert_eq!(changed, 200);
        for (id, l) in t.iter() {
            assert_eq!(out.corrupted[id], out.labels.get(id) != Some(l));
        }
    }

    #[test]
    fn full_fraction_changes_everything() {
        let t = truth(40, 4);
        let out = corrupt_labels(&t, 1.0, 2).unwrap();
        assert_eq!(out.num_corrupted(), 40);
        assert!(t.iter().all(|(id, l)| out.labels.get(id) != Some(l)));
    }

    #[test]
    fn bad_fraction() {
        assert!(matches!(corrupt_labels(&truth(4, 2), 1.5, 0), Err(Error::BadFraction(_))));
    }
}
