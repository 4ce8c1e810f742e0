//! Pseudo-label generation: k-means over embeddings, then agglomerative
//! merging of the centroids down to the target class count.

mod ahc;
mod kmeans;

pub use ahc::{ahc_merge, cosine_distance_matrix, AhcDendrogram, AhcResult, Merge};
pub use kmeans::{kmeans_fit, kmeans_fit_from, kmeans_plus_plus, KMeansModel, KMeansParams};

use crate::embedding::{EmbeddingMatrix, Matrix, PseudoLabelMap};
use crate::error::{Error, Result};

/// Labels each row by its nearest centroid mapped through the merge result,
/// compacted to `0..num_classes` in order of first appearance.
pub fn assign_pseudo_labels(
    embeddings: &EmbeddingMatrix,
    model: &KMeansModel,
    ahc: &AhcResult,
    iteration: usize,
) -> Result<PseudoLabelMap> {
    if ahc.leaf_to_cluster.len() != model.k() {
        return Err(Error::LengthMismatch {
            left: ahc.leaf_to_cluster.len(),
            right: model.k(),
        });
    }
    let data = embeddings.l2_normalized()?;
    let raw: Vec<usize> = model
        .assign(&data)?
        .into_iter()
        .map(|c| ahc.leaf_to_cluster[c])
        .collect();
    PseudoLabelMap::compacted(embeddings.ids(), &raw, iteration)
}

/// Settings for the full k-means → AHC composition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusterParams {
    pub k: usize,
    pub target_k: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct ClusterOutcome {
    pub labels: PseudoLabelMap,
    pub kmeans: KMeansModel,
    pub ahc: AhcResult,
}

/// k-means on the l2-normalised rows, AHC to `target_k`, then labelling.
/// `k` and `target_k` are clipped to the number of rows.
pub fn cluster_embeddings(
    embeddings: &EmbeddingMatrix,
    params: &ClusterParams,
    iteration: usize,
) -> Result<ClusterOutcome> {
    let data: Matrix = embeddings.l2_normalized()?;
    let k = params.k.min(data.rows());
    let target_k = params.target_k.min(k);
    let kmeans = kmeans_fit(
        &data,
        &KMeansParams {
            k,
            max_iters: params.max_iters,
            tol: params.tol,
            seed: params.seed,
        },
    )?;
    let counts = kmeans.member_counts(&data)?;
    let ahc = ahc_merge(&kmeans.centroids, &counts, target_k)?;
    let labels = assign_pseudo_labels(embeddings, &kmeans, &ahc, iteration)?;
    Ok(ClusterOutcome {
        labels,
        kmeans,
        ahc,
    })
}
