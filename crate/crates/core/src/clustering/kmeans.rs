//! Lloyd's k-means with k-means++ seeding.

use rand::Rng as _;
use rayon::prelude::*;

use crate::embedding::Matrix;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub max_iters: usize,
    /// Stop once no centroid moves further than this (Euclidean).
    pub tol: f64,
    pub seed: u64,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            max_iters: 50,
            tol: 1e-6,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansModel {
    pub centroids: Matrix,
    /// Sum of squared distances to the assigned centroid.
    pub inertia: f64,
    pub iterations_run: usize,
    pub seed: u64,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
}

impl KMeansModel {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    /// Nearest centroid for each row, ties to the lowest index.
    pub fn assign(&self, data: &Matrix) -> Result<Vec<usize>> {
        if data.cols() != self.centroids.cols() {
            return Err(Error::DimMismatch {
                expected: self.centroids.cols(),
                got: data.cols(),
            });
        }
        Ok(assign_rows(data, &self.centroids)
            .into_iter()
            .map(|(c, _)| c)
            .collect())
    }

    /// Members per centroid under [`Self::assign`].
    pub fn member_counts(&self, data: &Matrix) -> Result<Vec<usize>> {
        let mut counts = vec![0; self.k()];
        for c in self.assign(data)? {
            counts[c] += 1;
        }
        Ok(counts)
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(row: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter_rows().enumerate() {
        let d = sq_dist(row, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign_rows(data: &Matrix, centroids: &Matrix) -> Vec<(usize, f64)> {
    (0..data.rows())
        .into_par_iter()
        .map(|i| nearest(data.row(i), centroids))
        .collect()
}

/// k-means++ seeding: first centre uniform, then proportional to D².
pub fn kmeans_plus_plus(data: &Matrix, k: usize, seed: u64) -> Result<Matrix> {
    let n = data.rows();
    if k == 0 || k > n {
        return Err(Error::TooFewSamples { needed: k.max(1), have: n });
    }
    let mut rng = rng::stream(seed, &[0x6b6d_6561_6e73]);
    let mut chosen = vec![rng.random_range(0..n)];
    let mut dist: Vec<f64> = (0..n)
        .map(|i| sq_dist(data.row(i), data.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &d) in dist.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                if target < d {
                    pick = Some(i);
                    break;
                }
                target -= d;
            }
            // Rounding can walk off the end; take the last positive weight.
            pick.unwrap_or_else(|| dist.iter().rposition(|&d| d > 0.0).unwrap_or(0))
        } else {
            // Every point coincides with a centre: fall back to unused rows.
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(sq_dist(data.row(i), data.row(next)));
        }
    }
    let mut centroids = Matrix::zeros(k, data.cols());
    for (c, &i) in chosen.iter().enumerate() {
        centroids.row_mut(c).copy_from_slice(data.row(i));
    }
    Ok(centroids)
}

pub fn kmeans_fit(data: &Matrix, params: &KMeansParams) -> Result<KMeansModel> {
    let init = kmeans_plus_plus(data, params.k, params.seed)?;
    kmeans_fit_from(data, init, params)
}

/// Lloyd iterations from explicit initial centroids.
///
/// An empty cluster is re-seeded with the point farthest from its centroid
/// inside the cluster with the largest inertia.
pub fn kmeans_fit_from(data: &Matrix, init: Matrix, params: &KMeansParams) -> Result<KMeansModel> {
    let (n, d, k) = (data.rows(), data.cols(), init.rows());
    if k == 0 || k > n {
        return Err(Error::TooFewSamples { needed: k.max(1), have: n });
    }
    if init.cols() != d {
        return Err(Error::DimMismatch { expected: d, got: init.cols() });
    }
    let mut centroids = init;
    let mut history: Vec<f64> = Vec::new();
    let mut iterations_run = 0;
    let mut assignment = assign_rows(data, &centroids);

    for _ in 0..params.max_iters {
        iterations_run += 1;
        let inertia: f64 = assignment.iter().map(|&(_, dist)| dist).sum();
        if let Some(&prev) = history.last() {
            assert!(
                inertia <= prev + 1e-9 * prev.max(1.0),
                "k-means inertia increased: {prev} -> {inertia}"
            );
        }
        history.push(inertia);

        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, &(c, _)) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums.row_mut(c).iter_mut().zip(data.row(i)) {
                *s += v;
            }
        }
        let mut next = Matrix::zeros(k, d);
        for c in 0..k {
            if counts[c] == 0 {
                next.row_mut(c).copy_from_slice(centroids.row(c));
            } else {
                let inv = counts[c] as f64;
                for (o, s) in next.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *o = s / inv;
                }
            }
        }
        repair_empty(data, &assignment, &mut next, &mut counts);

        let shift = (0..k)
            .map(|c| sq_dist(centroids.row(c), next.row(c)).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        assignment = assign_rows(data, &centroids);
        if shift < params.tol {
            break;
        }
    }
    let inertia: f64 = assignment.iter().map(|&(_, dist)| dist).sum();
    history.push(inertia);
    Ok(KMeansModel {
        centroids,
        inertia,
        iterations_run,
        seed: params.seed,
        inertia_history: history,
    })
}

fn repair_empty(
    data: &Matrix,
    assignment: &[(usize, f64)],
    centroids: &mut Matrix,
    counts: &mut [usize],
) {
    let k = centroids.rows();
    let mut owner: Vec<usize> = assignment.iter().map(|&(c, _)| c).collect();
    while let Some(empty) = counts.iter().position(|&c| c == 0) {
        let mut cluster_inertia = vec![0.0; k];
        let dist: Vec<f64> = (0..data.rows())
            .map(|i| sq_dist(data.row(i), centroids.row(owner[i])))
            .collect();
        for (i, &d) in dist.iter().enumerate() {
            cluster_inertia[owner[i]] += d;
        }
        let donor = (0..k)
            .filter(|&c| counts[c] > 1)
            .max_by(|&a, &b| cluster_inertia[a].total_cmp(&cluster_inertia[b]).then(b.cmp(&a)));
        let Some(donor) = donor else {
            return;
        };
        let far = (0..data.rows())
            .filter(|&i| owner[i] == donor)
            .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
            .expect("donor has members");
        centroids.row_mut(empty).copy_from_slice(data.row(far));
        owner[far] = empty;
        counts[empty] = 1;
        counts[donor] -= 1;
    }
}
