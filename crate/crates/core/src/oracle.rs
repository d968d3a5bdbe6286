//! The trusted aggregator.
//!
//! Only the oracle reads individual responses. It releases one mean per bag,
//! optionally perturbed with Laplace noise for label differential privacy and
//! optionally rounded back to a binary label. When both are requested the
//! noise is added first and the noisy mean is rounded.
//!
//! With responses bounded by `|y| <= B` and bags of at least `k` samples, one
//! changed label moves a bag mean by at most `B/k`, so adding independent
//! `Laplace(0, B/(eps k))` noise to every mean makes the release eps-label-DP.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::Partition;
use crate::rng::{derive_seed, open_unit, substream, Purpose};

/// Parameters of the Laplace release attached to a batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyRecord {
    pub epsilon: f64,
    pub bound: f64,
    pub noise_scale: f64,
}

/// Per-bag mean responses as released by the oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateBatch {
    pub bag_means: Vec<f64>,
    pub partition: Partition,
    pub privacy: Option<PrivacyRecord>,
    pub rounded: bool,
}

#[derive(Serialize, Deserialize)]
struct BatchRecord {
    k: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bound: Option<f64>,
    bag_means: Vec<f64>,
    bag_sizes: Vec<usize>,
}

impl AggregateBatch {
    /// `S^T S ybar`: every sample receives its bag's released mean.
    pub fn expanded_targets(&self) -> Vec<f64> {
        self.partition
            .expand(&self.bag_means)
            .expect("batch means match its partition")
    }

    /// `{k, epsilon?, bound?, bag_means[], bag_sizes[]}`.
    pub fn to_json(&self) -> String {
        let record = BatchRecord {
            k: self.partition.min_size(),
            epsilon: self.privacy.map(|p| p.epsilon),
            bound: self.privacy.map(|p| p.bound),
            bag_means: self.bag_means.clone(),
            bag_sizes: self.partition.bag_sizes(),
        };
        serde_json::to_string(&record).expect("batch serializes")
    }
}

/// Exact bag means.
pub fn aggregate(responses: &[f64], partition: &Partition) -> Result<AggregateBatch> {
    Ok(AggregateBatch {
        bag_means: partition.bag_means(responses)?,
        partition: partition.clone(),
        privacy: None,
        rounded: false,
    })
}

/// Means within this distance of 1/2 are treated as exact ties.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Rounds every bag mean to `{0, 1}`.
///
/// Exact halves are broken by a fair coin derived from `seed` and the bag's
/// smallest sample index, so a bag rounds the same way on every run. Noised
/// batches may hold means outside `[0, 1]`; they are thresholded at 1/2.
pub fn round_binary(batch: &AggregateBatch, seed: u64) -> Result<AggregateBatch> {
    if batch.privacy.is_none() {
        if let Some(m) = batch.bag_means.iter().find(|m| !(0.0..=1.0).contains(*m)) {
            return Err(Error::OutOfRange(format!("bag mean {m} is outside [0, 1]")));
        }
    }
    let bag_means = batch
        .bag_means
        .iter()
        .zip(batch.partition.bags())
        .map(|(&m, bag)| {
            if (m - 0.5).abs() <= TIE_TOLERANCE {
                let coin = derive_seed(seed, &[bag[0] as u64]) & 1;
                coin as f64
            } else if m > 0.5 {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Ok(AggregateBatch {
        bag_means,
        partition: batch.partition.clone(),
        privacy: batch.privacy,
        rounded: true,
    })
}

/// `B / (eps k)`.
pub fn laplace_scale(bound: f64, epsilon: f64, min_size: usize) -> f64 {
    bound / (epsilon * min_size as f64)
}

/// One `Laplace(0, scale)` draw by inverting the CDF at a uniform `u`:
/// `-scale * sgn(u - 1/2) * ln(1 - 2|u - 1/2|)`.
pub fn sample_laplace<R: rand::Rng + ?Sized>(rng: &mut R, scale: f64) -> f64 {
    let v = open_unit(rng) - 0.5;
    -scale * v.signum() * (1.0 - 2.0 * v.abs()).ln()
}

/// Adds independent `Laplace(0, B/(eps k))` noise to each bag mean, with `k`
/// the partition's declared minimum size. Bag `l` draws from substream `l`.
pub fn apply_label_dp(
    batch: &AggregateBatch,
    epsilon: f64,
    bound: f64,
    seed: u64,
) -> Result<AggregateBatch> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    if !(bound > 0.0) || !bound.is_finite() {
        return Err(Error::InvalidArgument(format!("bound must be positive, got {bound}")));
    }
    if batch.rounded {
        return Err(Error::InvalidArgument("noise must be applied before rounding".into()));
    }
    if batch.privacy.is_some() {
        return Err(Error::InvalidArgument("batch is already privatized".into()));
    }
    let noise_scale = laplace_scale(bound, epsilon, batch.partition.min_size());
    let bag_means = batch
        .bag_means
        .iter()
        .enumerate()
        .map(|(l, &m)| m + sample_laplace(&mut substream(seed, Purpose::DpNoise, l as u64), noise_scale))
        .collect();
    Ok(AggregateBatch {
        bag_means,
        partition: batch.partition.clone(),
        privacy: Some(PrivacyRecord {
            epsilon,
            bound,
            noise_scale,
        }),
        rounded: false,
    })
}

/// Read access to individual responses. The adaptive drivers only ever hold
/// one of these through an [`AggregationOracle`].
pub trait ResponseSource {
    fn len(&self) -> usize;
    fn response(&self, index: usize) -> f64;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ResponseSource for [f64] {
    fn len(&self) -> usize {
        <[f64]>::len(self)
    }

    fn response(&self, index: usize) -> f64 {
        self[index]
    }
}

impl ResponseSource for Vec<f64> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn response(&self, index: usize) -> f64 {
        self[index]
    }
}

/// Label-DP parameters of a release.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpParams {
    pub epsilon: f64,
    pub bound: f64,
}

/// What the oracle does to the exact means before releasing them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Release {
    pub dp: Option<DpParams>,
    pub round: bool,
    /// Seeds both the Laplace substreams and the tie-breaking coins.
    pub seed: u64,
}

impl Release {
    pub fn exact() -> Self {
        Release {
            dp: None,
            round: false,
            seed: 0,
        }
    }
}

/// Answers aggregate queries over contiguous row ranges of a response source.
pub struct AggregationOracle<'a, S: ResponseSource + ?Sized> {
    source: &'a S,
}

impl<'a, S: ResponseSource + ?Sized> AggregationOracle<'a, S> {
    pub fn new(source: &'a S) -> Self {
        AggregationOracle { source }
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// Aggregates rows `rows` under `partition`, whose indices are relative
    /// to `rows.start`.
    pub fn query(
        &self,
        rows: Range<usize>,
        partition: &Partition,
        release: &Release,
    ) -> Result<AggregateBatch> {
        if rows.end > self.source.len() || rows.len() != partition.len() {
            return Err(Error::InvalidPartition(format!(
                "partition over {} samples does not cover rows {rows:?}",
                partition.len()
            )));
        }
        let responses: Vec<f64> = rows.map(|i| self.source.response(i)).collect();
        let mut batch = aggregate(&responses, partition)?;
        if let Some(dp) = release.dp {
            batch = apply_label_dp(&batch, dp.epsilon, dp.bound, release.seed)?;
        }
        if release.round {
            batch = round_binary(&batch, release.seed)?;
        }
        Ok(batch)
    }
}
