//! Bag partitions and the implicit bagging matrix.
//!
//! A partition of `n` samples into bags `B_1..B_m` defines `S` (`m x n`,
//! `S[l, i] = 1/sqrt(|B_l|)` for `i` in `B_l`). `S` is never built: `S^T S v`
//! replaces each entry of `v` by the mean of its bag, and `S S^T = I_m`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Disjoint bags covering `0..n`, each of size at least `min_size`.
///
/// Indices inside a bag are increasing and bags are ordered by their smallest
/// index, so two partitions with the same bags compare equal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPartition")]
pub struct Partition {
    #[serde(rename = "k")]
    min_size: usize,
    bags: Vec<Vec<usize>>,
}

#[derive(Deserialize)]
struct RawPartition {
    k: usize,
    bags: Vec<Vec<usize>>,
}

impl TryFrom<RawPartition> for Partition {
    type Error = Error;

    fn try_from(raw: RawPartition) -> Result<Self> {
        Partition::new(raw.bags, raw.k)
    }
}

impl Partition {
    /// Normalizes bag order and validates the invariants.
    pub fn new(mut bags: Vec<Vec<usize>>, min_size: usize) -> Result<Self> {
        if min_size == 0 {
            return Err(Error::InvalidArgument("minimum bag size must be positive".into()));
        }
        for bag in &mut bags {
            bag.sort_unstable();
        }
        bags.sort_by_key(|b| b.first().copied().unwrap_or(usize::MAX));

        let n: usize = bags.iter().map(Vec::len).sum();
        let mut seen = vec![false; n];
        for bag in &bags {
            if bag.len() < min_size {
                return Err(Error::InvalidPartition(format!(
                    "bag of size {} is below the minimum {min_size}",
                    bag.len()
                )));
            }
            for &i in bag {
                if i >= n {
                    return Err(Error::InvalidPartition(format!(
                        "index {i} outside 0..{n}"
                    )));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::InvalidPartition(format!("index {i} appears twice")));
                }
            }
        }
        Ok(Partition { min_size, bags })
    }

    /// Every sample in its own bag (`S^T S = I`).
    pub fn singletons(n: usize) -> Self {
        Partition {
            min_size: 1,
            bags: (0..n).map(|i| vec![i]).collect(),
        }
    }

    /// One bag holding all samples.
    pub fn single_bag(n: usize, min_size: usize) -> Result<Self> {
        Partition::new(vec![(0..n).collect()], min_size)
    }

    /// Builds bags from consecutive runs of `order` with the given sizes.
    pub fn from_runs(order: &[usize], sizes: &[usize], min_size: usize) -> Result<Self> {
        let mut bags = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &s in sizes {
            let end = start + s;
            if end > order.len() {
                return Err(Error::InvalidPartition("run sizes exceed the ordering".into()));
            }
            bags.push(order[start..end].to_vec());
            start = end;
        }
        if start != order.len() {
            return Err(Error::InvalidPartition("run sizes do not cover the ordering".into()));
        }
        Partition::new(bags, min_size)
    }

    pub fn bags(&self) -> &[Vec<usize>] {
        &self.bags
    }

    pub fn min_size(&self) -> usize {
        self.min_size
    }

    /// Number of samples covered.
    pub fn len(&self) -> usize {
        self.bags.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    pub fn num_bags(&self) -> usize {
        self.bags.len()
    }

    pub fn bag_sizes(&self) -> Vec<usize> {
        self.bags.iter().map(Vec::len).collect()
    }

    /// Bag ordinal of every sample.
    pub fn membership(&self) -> Vec<usize> {
        let mut out = vec![0; self.len()];
        for (l, bag) in self.bags.iter().enumerate() {
            for &i in bag {
                out[i] = l;
            }
        }
        out
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                found: len,
            });
        }
        Ok(())
    }

    /// Mean of `v` over each bag.
    pub fn bag_means(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_len(v.len())?;
        Ok(self
            .bags
            .iter()
            .map(|bag| bag.iter().map(|&i| v[i]).sum::<f64>() / bag.len() as f64)
            .collect())
    }

    /// Writes each bag's value to all of its members.
    pub fn expand(&self, per_bag: &[f64]) -> Result<Vec<f64>> {
        if per_bag.len() != self.num_bags() {
            return Err(Error::DimensionMismatch {
                expected: self.num_bags(),
                found: per_bag.len(),
            });
        }
        let mut out = vec![0.0; self.len()];
        for (bag, &value) in self.bags.iter().zip(per_bag) {
            for &i in bag {
                out[i] = value;
            }
        }
        Ok(out)
    }

    /// `S^T S v`: every entry replaced by its bag mean.
    pub fn average(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.expand(&self.bag_means(v)?)
    }

    /// `||(I - S^T S) v||^2`, the within-bag sum of squared deviations.
    pub fn within_bag_sse(&self, v: &[f64]) -> Result<f64> {
        let means = self.bag_means(v)?;
        Ok(self
            .bags
            .iter()
            .zip(&means)
            .map(|(bag, mu)| bag.iter().map(|&i| (v[i] - mu).powi(2)).sum::<f64>())
            .sum())
    }

    /// `trace(I - S^T S) = sum over bags of (|B| - 1) = n - m`.
    pub fn complement_trace(&self) -> f64 {
        self.bags
            .iter()
            .map(|b| b.len() as f64 * (1.0 - 1.0 / b.len() as f64))
            .sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("partition serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Within-bag averaging `S^T S v` without materializing `S`.
pub fn partition_aggregation_operator(p: &Partition, v: &[f64]) -> Result<Vec<f64>> {
    p.average(v)
}
