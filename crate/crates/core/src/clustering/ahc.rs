//! Agglomerative merging of k-means centroids.

use crate::embedding::{dot, l2_normalize, Matrix};
use crate::error::{Error, Result};

/// One merge: `absorbed` joins `kept` at the given linkage distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Merge {
    pub kept: usize,
    pub absorbed: usize,
    pub distance: f64,
}

/// Merge list over the initial leaves. Cluster ids are the smallest leaf
/// index they contain.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AhcDendrogram {
    pub merges: Vec<Merge>,
}

impl AhcDendrogram {
    pub fn is_monotone(&self) -> bool {
        self.merges
            .windows(2)
            .all(|w| w[1].distance >= w[0].distance - 1e-12)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AhcResult {
    pub dendrogram: AhcDendrogram,
    /// Final cluster (0..target_k) of each leaf.
    pub leaf_to_cluster: Vec<usize>,
}

impl AhcResult {
    pub fn num_clusters(&self) -> usize {
        self.leaf_to_cluster.iter().max().map_or(0, |m| m + 1)
    }
}

/// Pairwise cosine distance `1 - cos` between rows.
pub fn cosine_distance_matrix(rows: &Matrix) -> Result<Vec<Vec<f64>>> {
    let units = rows
        .iter_rows()
        .map(l2_normalize)
        .collect::<Result<Vec<_>>>()?;
    let k = units.len();
    let mut d = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in (i + 1)..k {
            let v = 1.0 - dot(&units[i], &units[j]);
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    Ok(d)
}

/// Greedy agglomeration under count-weighted average linkage on cosine
/// distance, until `target_k` clusters remain.
///
/// Ties go to the lexicographically smallest `(kept, absorbed)` pair.
/// A leaf with zero members is weighted as one.
pub fn ahc_merge(centroids: &Matrix, member_counts: &[usize], target_k: usize) -> Result<AhcResult> {
    let k = centroids.rows();
    if member_counts.len() != k {
        return Err(Error::LengthMismatch {
            left: k,
            right: member_counts.len(),
        });
    }
    if target_k < 1 || target_k > k {
        return Err(Error::BadTarget(target_k));
    }
    let mut dist = cosine_distance_matrix(centroids)?;
    let mut weight: Vec<f64> = member_counts.iter().map(|&c| c.max(1) as f64).collect();
    let mut active = vec![true; k];
    let mut owner: Vec<usize> = (0..k).collect();
    let mut merges = Vec::with_capacity(k - target_k);

    for _ in 0..(k - target_k) {
        let mut best: Option<(usize, usize, f64)> = None;
        for a in (0..k).filter(|&a| active[a]) {
            for b in ((a + 1)..k).filter(|&b| active[b]) {
                if best.is_none_or(|(_, _, d)| dist[a][b] < d) {
                    best = Some((a, b, dist[a][b]));
                }
            }
        }
        let (a, b, d) = best.expect("at least two active clusters");
        if let Some(last) = merges.last().map(|m: &Merge| m.distance) {
            if d < last - 1e-12 {
                log::error!("average-linkage inversion: {d} after {last}");
            }
        }
        let (wa, wb) = (weight[a], weight[b]);
        for c in (0..k).filter(|&c| active[c] && c != a && c != b) {
            let v = (wa * dist[a][c] + wb * dist[b][c]) / (wa + wb);
            dist[a][c] = v;
            dist[c][a] = v;
        }
        weight[a] = wa + wb;
        active[b] = false;
        for o in owner.iter_mut().filter(|o| **o == b) {
            *o = a;
        }
        merges.push(Merge {
            kept: a,
            absorbed: b,
            distance: d,
        });
    }

    let survivors: Vec<usize> = (0..k).filter(|&c| active[c]).collect();
    let leaf_to_cluster = owner
        .iter()
        .map(|o| survivors.binary_search(o).expect("owner is active"))
        .collect();
    Ok(AhcResult {
        dendrogram: AhcDendrogram { merges },
        leaf_to_cluster,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_when_target_equals_k() {
        let c = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let r = ahc_merge(&c, &[1, 1, 1], 3).unwrap();
        assert!(r.dendrogram.merges.is_empty());
        assert_eq!(r.leaf_to_cluster, vec![0, 1, 2]);
    }

    #[test]
    fn closest_pair_merges_first() {
        // Angles chosen so pairwise cosine distances are 0.1, 0.5, 0.6.
        let a = 0.0f64;
        let b = (1.0f64 - 0.1).acos();
        let c = -(1.0f64 - 0.5).acos();
        let rows = [a, b, c].map(|t| vec![t.cos(), t.sin()]);
        let m = Matrix::from_rows(&rows).unwrap();
        let d = cosine_distance_matrix(&m).unwrap();
        assert!((d[0][1] - 0.1).abs() < 1e-12);
        assert!((d[0][2] - 0.5).abs() < 1e-12);
        assert!(d[1][2] > 0.6);
        let r = ahc_merge(&m, &[1, 1, 1], 2).unwrap();
        assert_eq!(r.dendrogram.merges[0].kept, 0);
        assert_eq!(r.dendrogram.merges[0].absorbed, 1);
        assert_eq!(r.leaf_to_cluster, vec![0, 0, 1]);
    }

    #[test]
    fn bad_targets() {
        let c = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(ahc_merge(&c, &[1, 1], 0), Err(Error::BadTarget(0))));
        assert!(matches!(ahc_merge(&c, &[1, 1], 3), Err(Error::BadTarget(3))));
    }

    #[test]
    fn single_cluster_target() {
        let c = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.2]]).unwrap();
        let r = ahc_merge(&c, &[3, 1, 2], 1).unwrap();
        assert_eq!(r.leaf_to_cluster, vec![0, 0, 0]);
        assert_eq!(r.dendrogram.merges.len(), 2);
        assert!(r.dendrogram.is_monotone());
    }
}
