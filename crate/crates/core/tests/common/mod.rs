//! Reference implementations and helpers shared by the integration tests.
//!
//! The oracles are written for clarity, not speed: quadratic sweeps, dense
//! contingency tables, from-scratch linkage distances.

#![allow(dead_code)]

use std::path::PathBuf;

use forge_core::pipeline::RunConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

pub fn normals(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(r)).collect()
}

// ---------------------------------------------------------------- gradients

/// Central differences of `f` at `x`.
pub fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / (|a| + |b|)` over whole vectors; 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

// ------------------------------------------------------------- verification

/// `(threshold, p_miss, p_fa)` for every unique score and `+inf`, counted
/// trial by trial. Accept when `score >= threshold`.
pub fn brute_sweep(is_target: &[bool], scores: &[f64]) -> Vec<(f64, f64, f64)> {
    let mut ts = scores.to_vec();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    ts.push(f64::INFINITY);
    let nt = is_target.iter().filter(|&&t| t).count() as f64;
    let nn = is_target.len() as f64 - nt;
    ts.into_iter()
        .map(|t| {
            let mut miss = 0.0;
            let mut fa = 0.0;
            for (&tgt, &s) in is_target.iter().zip(scores) {
                if tgt && s < t {
                    miss += 1.0;
                }
                if !tgt && s >= t {
                    fa += 1.0;
                }
            }
            (t, miss / nt, fa / nn)
        })
        .collect()
}

/// Crossing of miss and false-alarm rates, interpolated between the last
/// point with `p_miss < p_fa` and the first with `p_miss >= p_fa`.
pub fn brute_eer(is_target: &[bool], scores: &[f64]) -> f64 {
    let pts = brute_sweep(is_target, scores);
    let i = pts.iter().position(|p| p.1 >= p.2).unwrap();
    let (a, b) = (pts[i - 1], pts[i]);
    let (da, db) = (a.1 - a.2, b.1 - b.2);
    let alpha = if da == db { 0.0 } else { da / (da - db) };
    a.1 + alpha * (b.1 - a.1)
}

pub fn brute_min_dcf(is_target: &[bool], scores: &[f64], p_target: f64, c_miss: f64, c_fa: f64, normalized: bool) -> f64 {
    let norm = if normalized {
        (c_miss * p_target).min(c_fa * (1.0 - p_target))
    } else {
        1.0
    };
    brute_sweep(is_target, scores)
        .into_iter()
        .map(|(_, pm, pf)| (c_miss * p_target * pm + c_fa * (1.0 - p_target) * pf) / norm)
        .fold(f64::INFINITY, f64::min)
}

// ---------------------------------------------------------------- partitions

fn table(a: &[usize], b: &[usize]) -> Vec<Vec<f64>> {
    let ra = a.iter().max().map_or(0, |m| m + 1);
    let rb = b.iter().max().map_or(0, |m| m + 1);
    let mut t = vec![vec![0.0; rb]; ra];
    for (&x, &y) in a.iter().zip(b) {
        t[x][y] += 1.0;
    }
    t
}

fn c2(x: f64) -> f64 {
    x * (x - 1.0) / 2.0
}

/// Hubert-Arabie adjusted Rand index from a dense contingency table.
pub fn direct_ari(a: &[usize], b: &[usize]) -> f64 {
    let t = table(a, b);
    let n = a.len() as f64;
    let rows: Vec<f64> = t.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..t.first().map_or(0, Vec::len)).map(|j| t.iter().map(|r| r[j]).sum()).collect();
    let index: f64 = t.iter().flatten().map(|&v| c2(v)).sum();
    let sa: f64 = rows.iter().map(|&v| c2(v)).sum();
    let sb: f64 = cols.iter().map(|&v| c2(v)).sum();
    let expected = sa * sb / c2(n);
    let max = 0.5 * (sa + sb);
    if max == expected {
        1.0
    } else {
        (index - expected) / (max - expected)
    }
}

/// Mutual information over the arithmetic mean of the two entropies.
pub fn direct_nmi_arithmetic(a: &[usize], b: &[usize]) -> f64 {
    let t = table(a, b);
    let n = a.len() as f64;
    let rows: Vec<f64> = t.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..t[0].len()).map(|j| t.iter().map(|r| r[j]).sum()).collect();
    let mut mi = 0.0;
    for (i, r) in t.iter().enumerate() {
        for (j, &v) in r.iter().enumerate() {
            if v > 0.0 {
                mi += v / n * (n * v / (rows[i] * cols[j])).ln();
            }
        }
    }
    let h = |m: &[f64]| -m.iter().filter(|&&v| v > 0.0).map(|&v| v / n * (v / n).ln()).sum::<f64>();
    let denom = 0.5 * (h(&rows) + h(&cols));
    if denom <= 0.0 {
        0.0
    } else {
        mi / denom
    }
}

/// Relabels clusters in order of first appearance.
pub fn canonical(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

// ---------------------------------------------------------------- clustering

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centres: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, m) in centres.iter().enumerate() {
        let d = sq(p, m);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Textbook Lloyd iterations; stops when no centre moves more than `tol`.
/// Returns the final inertia and assignment.
pub fn naive_lloyd(points: &[Vec<f64>], mut centres: Vec<Vec<f64>>, max_iters: usize, tol: f64) -> (f64, Vec<usize>) {
    let d = points[0].len();
    for _ in 0..max_iters {
        let assign: Vec<usize> = points.iter().map(|p| nearest(p, &centres).0).collect();
        let mut next = centres.clone();
        for (c, centre) in next.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
            if !members.is_empty() {
                *centre = (0..d).map(|j| members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64).collect();
            }
        }
        let shift = centres.iter().zip(&next).map(|(a, b)| sq(a, b).sqrt()).fold(0.0, f64::max);
        centres = next;
        if shift < tol {
            break;
        }
    }
    let assign: Vec<(usize, f64)> = points.iter().map(|p| nearest(p, &centres)).collect();
    (assign.iter().map(|a| a.1).sum(), assign.iter().map(|a| a.0).collect())
}

fn cos_dist(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

/// Average linkage recomputed from leaf pairs at every step: the distance
/// between two groups is the weight-averaged cosine distance over all
/// cross pairs. Returns the canonical leaf partition.
pub fn naive_average_linkage(points: &[Vec<f64>], weights: &[f64], target: usize) -> Vec<usize> {
    let mut groups: Vec<Vec<usize>> = (0..points.len()).map(|i| vec![i]).collect();
    while groups.len() > target {
        let mut best = (0, 0, f64::INFINITY);
        for a in 0..groups.len() {
            for b in (a + 1)..groups.len() {
                let mut num = 0.0;
                for &i in &groups[a] {
                    for &j in &groups[b] {
                        num += weights[i] * weights[j] * cos_dist(&points[i], &points[j]);
                    }
                }
                let wa: f64 = groups[a].iter().map(|&i| weights[i]).sum();
                let wb: f64 = groups[b].iter().map(|&i| weights[i]).sum();
                let d = num / (wa * wb);
                if d < best.2 {
                    best = (a, b, d);
                }
            }
        }
        let absorbed = groups.remove(best.1);
        groups[best.0].extend(absorbed);
    }
    let mut labels = vec![0; points.len()];
    for (g, members) in groups.iter().enumerate() {
        for &i in members {
            labels[i] = g;
        }
    }
    canonical(&labels)
}

/// `k` Gaussian blobs of `n` points in `d` dimensions.
pub fn blobs(r: &mut ChaCha8Rng, n: usize, k: usize, d: usize, spread: f64) -> Vec<Vec<f64>> {
    let centres: Vec<Vec<f64>> = (0..k).map(|_| normals(r, d).iter().map(|v| 3.0 * v).collect()).collect();
    (0..n)
        .map(|i| centres[i % k].iter().map(|c| c + spread * normal(r)).collect())
        .collect()
}

// ------------------------------------------------------------------ configs

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn config_text(name: &str) -> String {
    std::fs::read_to_string(repo_root().join("configs").join(name)).expect("config file")
}

/// A world and budget small enough for a full run in a few seconds.
pub const TINY: &[(&str, &str)] = &[
    ("world.num_speakers", "8"),
    ("world.utterances_per_speaker", "6"),
    ("world.eval_speakers", "5"),
    ("world.eval_utterances_per_speaker", "4"),
    ("dino.epochs", "2"),
    ("train.epochs", "3"),
    ("train.batch_size", "16"),
    ("train.lmft_epochs", "1"),
    ("gate.warmup_epochs", "1"),
    ("cluster.k", "16"),
    ("cluster.target_k", "8"),
    ("run.num_refinement_iterations", "1"),
];

pub fn tiny_config(extra: &[(&str, &str)]) -> RunConfig {
    let mut all: Vec<(&str, &str)> = TINY.to_vec();
    all.extend_from_slice(extra);
    RunConfig::parse_with(&config_text("desk.cfg"), &all).expect("tiny config")
}
