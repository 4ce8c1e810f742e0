//! Agreement between two partitions of the same items.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

struct Contingency {
    n: usize,
    left: HashMap<usize, usize>,
    right: HashMap<usize, usize>,
    joint: HashMap<(usize, usize), usize>,
}

fn contingency(a: &[usize], b: &[usize]) -> Result<Contingency> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let mut c = Contingency {
        n: a.len(),
        left: HashMap::new(),
        right: HashMap::new(),
        joint: HashMap::new(),
    };
    for (&x, &y) in a.iter().zip(b) {
        *c.left.entry(x).or_default() += 1;
        *c.right.entry(y).or_default() += 1;
        *c.joint.entry((x, y)).or_default() += 1;
    }
    Ok(c)
}

fn comb2(v: usize) -> f64 {
    let v = v as f64;
    v * (v - 1.0) / 2.0
}

/// Sums in ascending key order so the result is independent of hash order.
fn sorted_sum<K: Ord + Copy + std::hash::Hash>(m: &HashMap<K, usize>, f: impl Fn(usize) -> f64) -> f64 {
    let mut keys: Vec<K> = m.keys().copied().collect();
    keys.sort_unstable();
    keys.iter().map(|k| f(m[k])).sum()
}

/// Adjusted Rand index. Returns 1.0 when both partitions are trivial in the
/// same way (fewer than two items, or zero expected-index spread).
pub fn ari(labels_a: &[usize], labels_b: &[usize]) -> Result<f64> {
    let c = contingency(labels_a, labels_b)?;
    if c.n < 2 {
        return Ok(1.0);
    }
    let index = sorted_sum(&c.joint, comb2);
    let sum_a = sorted_sum(&c.left, comb2);
    let sum_b = sorted_sum(&c.right, comb2);
    let expected = sum_a * sum_b / comb2(c.n);
    let max_index = 0.5 * (sum_a + sum_b);
    let denom = max_index - expected;
    Ok(if denom == 0.0 {
        1.0
    } else {
        (index - expected) / denom
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NmiNormalizer {
    Min,
    Geometric,
    #[default]
    Arithmetic,
    Max,
}

impl std::str::FromStr for NmiNormalizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "min" => Self::Min,
            "geometric" => Self::Geometric,
            "arithmetic" => Self::Arithmetic,
            "max" => Self::Max,
            other => return Err(Error::BadConfig(format!("unknown NMI normalizer {other:?}"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nmi {
    pub value: f64,
    /// Both partitions put everything in one cluster; the value is 1.0 by
    /// convention.
    pub degenerate: bool,
}

fn entropy(counts: &HashMap<usize, usize>, n: f64) -> f64 {
    -sorted_sum(counts, |c| {
        let p = c as f64 / n;
        p * p.ln()
    })
}

pub fn nmi(labels_a: &[usize], labels_b: &[usize], normalizer: NmiNormalizer) -> Result<Nmi> {
    let c = contingency(labels_a, labels_b)?;
    if c.n == 0 || (c.left.len() == 1 && c.right.len() == 1) {
        return Ok(Nmi {
            value: 1.0,
            degenerate: true,
        });
    }
    let n = c.n as f64;
    let mut keys: Vec<(usize, usize)> = c.joint.keys().copied().collect();
    keys.sort_unstable();
    let mi: f64 = keys
        .iter()
        .map(|k| {
            let nij = c.joint[k] as f64;
            let (ni, nj) = (c.left[&k.0] as f64, c.right[&k.1] as f64);
            (nij / n) * (n * nij / (ni * nj)).ln()
        })
        .sum();
    let (ha, hb) = (entropy(&c.left, n), entropy(&c.right, n));
    let denom = match normalizer {
        NmiNormalizer::Min => ha.min(hb),
        NmiNormalizer::Geometric => (ha * hb).sqrt(),
        NmiNormalizer::Arithmetic => 0.5 * (ha + hb),
        NmiNormalizer::Max => ha.max(hb),
    };
    let value = if denom <= 0.0 {
        0.0
    } else {
        (mi.max(0.0) / denom).min(1.0)
    };
    Ok(Nmi {
        value,
        degenerate: false,
    })
}
