//! Conditional risk of the event-level estimators given the design.
//!
//! For least squares on bag means, `theta_hat - theta* = (X^T X)^{-1} X^T (S^T S - I) X theta*
//! + (X^T X)^{-1} X^T S^T S eps`, hence
//!
//! ```text
//! E[||theta_hat - theta*||^2 | X] = ||(X^T X)^{-1} X^T (S^T S - I) X theta*||^2
//!                                 + sigma^2 trace((X^T X)^{-1} X^T S^T S X (X^T X)^{-1})
//! ```
//!
//! using `S S^T = I_m`. `X^T S^T S X = sum_l |B_l| xbar_l xbar_l^T` is formed
//! from per-bag feature sums, so `S` is never materialized.
//!
//! For a canonical GLM the score at the truth,
//! `g = X^T D^{-1} (b'(X theta*) - S^T S y)` with `D = phi I`, satisfies
//!
//! ```text
//! E[||g||^2 | X] = ||X^T D^{-1} (S^T S - I) b'(X theta*)||^2
//!                + sum_l (sum_{i in B_l} b''(x_i^T theta*)) ||xbar_l||^2 / phi
//! ```
//!
//! (the second term is the squared Frobenius norm of
//! `X^T D^{-1} S^T S D^{1/2} diag(b'')^{1/2}`, reduced per bag). The score is
//! the unnormalized gradient, i.e. `n` times the gradient of the mean loss.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bagging::{random_bagging, sorted_consecutive_bags};
use crate::data::{generate_linear_dataset, DataGenConfig, Task};
use crate::error::{Error, Result};
use crate::glm::GlmFamily;
use crate::linalg::{gram, power_iteration, pseudo_inverse_op_norm_sq, spd_factor, xt_vec};
use crate::partition::Partition;
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub bias_sq: f64,
    pub variance: f64,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub upper_bound: Option<f64>,
}

impl RiskReport {
    fn new(bias_sq: f64, variance: f64) -> Self {
        RiskReport {
            bias_sq,
            variance,
            total: bias_sq + variance,
            upper_bound: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

fn check(x: &DMatrix<f64>, partition: &Partition, theta_star: &[f64]) -> Result<()> {
    if partition.len() != x.nrows() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            found: partition.len(),
        });
    }
    if theta_star.len() != x.ncols() {
        return Err(Error::DimensionMismatch {
            expected: x.ncols(),
            found: theta_star.len(),
        });
    }
    Ok(())
}

/// `(S^T S - I) v`.
fn within_bag_residual(partition: &Partition, v: &[f64]) -> Result<Vec<f64>> {
    let avg = partition.average(v)?;
    Ok(avg.iter().zip(v).map(|(a, b)| a - b).collect())
}

/// Per-bag feature sums `sum_{i in B_l} x_i`.
fn bag_feature_sums(x: &DMatrix<f64>, partition: &Partition) -> Vec<DVector<f64>> {
    partition
        .bags()
        .iter()
        .map(|bag| {
            let mut s = DVector::zeros(x.ncols());
            for &i in bag {
                s += x.row(i).transpose();
            }
            s
        })
        .collect()
}

/// `X^T S^T S X`.
pub fn bagged_gram(x: &DMatrix<f64>, partition: &Partition) -> DMatrix<f64> {
    let d = x.ncols();
    let mut m = DMatrix::zeros(d, d);
    for (sum, bag) in bag_feature_sums(x, partition).iter().zip(partition.bags()) {
        m += sum * sum.transpose() / bag.len() as f64;
    }
    m
}

fn signal(x: &DMatrix<f64>, theta_star: &[f64]) -> Vec<f64> {
    (x * DVector::from_column_slice(theta_star))
        .iter()
        .copied()
        .collect()
}

/// Exact bias/variance split of the least-squares event-level estimator.
pub fn linear_risk_decomposition(
    x: &DMatrix<f64>,
    partition: &Partition,
    theta_star: &[f64],
    sigma: f64,
) -> Result<RiskReport> {
    check(x, partition, theta_star)?;
    let chol = spd_factor(&gram(x))?;
    let resid = within_bag_residual(partition, &signal(x, theta_star))?;
    let bias = chol.solve(&xt_vec(x, &resid));

    let m = bagged_gram(x, partition);
    let left = chol.solve(&m);
    let both = chol.solve(&left.transpose());
    let variance = sigma * sigma * both.trace();
    Ok(RiskReport::new(bias.norm_squared(), variance.max(0.0)))
}

/// `||(X^T X)^{-1} X^T||_op^2 (||(S^T S - I) X theta*||^2 + sigma^2 min(m, d))`.
pub fn linear_risk_upper_bound(
    x: &DMatrix<f64>,
    partition: &Partition,
    theta_star: &[f64],
    sigma: f64,
) -> Result<f64> {
    check(x, partition, theta_star)?;
    let chol = spd_factor(&gram(x))?;
    let op_sq = pseudo_inverse_op_norm_sq(&chol, x.ncols());
    let resid = within_bag_residual(partition, &signal(x, theta_star))?;
    let resid_sq: f64 = resid.iter().map(|r| r * r).sum();
    let dof = partition.num_bags().min(x.ncols()) as f64;
    Ok(op_sq * (resid_sq + sigma * sigma * dof))
}

/// `sum_l sum_{i in B_l} v_i / |B_l|`.
pub fn bag_variance_sum(partition: &Partition, v: &[f64]) -> Result<f64> {
    if v.len() != partition.len() {
        return Err(Error::DimensionMismatch {
            expected: partition.len(),
            found: v.len(),
        });
    }
    Ok(partition
        .bags()
        .iter()
        .map(|bag| bag.iter().map(|&i| v[i]).sum::<f64>() / bag.len() as f64)
        .sum())
}

/// Conditional second moment of the GLM score at the truth, split into the
/// squared mean (`bias_sq`) and the trace of the covariance (`variance`).
pub fn glm_gradient_moments(
    x: &DMatrix<f64>,
    partition: &Partition,
    theta_star: &[f64],
    family: &GlmFamily,
) -> Result<RiskReport> {
    check(x, partition, theta_star)?;
    let phi = family.dispersion;
    let eta = signal(x, theta_star);
    let mu: Vec<f64> = eta.iter().map(|&e| family.mean(e)).collect();
    let resid = within_bag_residual(partition, &mu)?;
    let bias = xt_vec(x, &resid) / phi;

    let variance: f64 = bag_feature_sums(x, partition)
        .iter()
        .zip(partition.bags())
        .map(|(sum, bag)| {
            let size = bag.len() as f64;
            let weight: f64 = bag.iter().map(|&i| family.variance(eta[i])).sum();
            weight * sum.norm_squared() / (size * size)
        })
        .sum::<f64>()
        / phi;
    Ok(RiskReport::new(bias.norm_squared(), variance))
}

/// `||X^T D^{-1}||_op^2 (||(S^T S - I) mu||^2 + min(sum_l sum_{B_l} v_i/|B_l|, d max_i v_i))`
/// with `mu_i = b'(x_i^T theta*)` and `v_i = phi b''(x_i^T theta*)`.
pub fn glm_gradient_upper_bound(
    x: &DMatrix<f64>,
    partition: &Partition,
    theta_star: &[f64],
    family: &GlmFamily,
) -> Result<f64> {
    check(x, partition, theta_star)?;
    let phi = family.dispersion;
    let g = gram(x);
    let op_sq = power_iteration(x.ncols(), |v| &g * v, 1e-12, 10_000) / (phi * phi);
    let eta = signal(x, theta_star);
    let mu: Vec<f64> = eta.iter().map(|&e| family.mean(e)).collect();
    let v: Vec<f64> = eta.iter().map(|&e| phi * family.variance(e)).collect();
    let resid_sq: f64 = within_bag_residual(partition, &mu)?
        .iter()
        .map(|r| r * r)
        .sum();
    let per_bag = bag_variance_sum(partition, &v)?;
    let max_v = v.iter().copied().fold(0.0, f64::max);
    let spread = per_bag.min(x.ncols() as f64 * max_v);
    Ok(op_sq * (resid_sq + spread))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasSeparation {
    pub curated_bias_sq: f64,
    pub random_bias_sq: f64,
}

/// Average least-squares bias under curated bags (consecutive groups of `k`
/// over the sorted true means) and under random bags, with `theta*` rescaled
/// to unit norm. Each trial draws a fresh design and truth.
pub fn bias_separation_experiment(
    cfg: &DataGenConfig,
    k: usize,
    trials: usize,
) -> Result<BiasSeparation> {
    if k == 0 || trials == 0 {
        return Err(Error::InvalidArgument("k and trials must be positive".into()));
    }
    if cfg.n < 2 * k * cfg.d {
        return Err(Error::Infeasible { n: cfg.n, k: 2 * k * cfg.d });
    }
    let per_trial: Vec<Result<(f64, f64)>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let trial_seed = derive_seed(cfg.seed, &[t as u64]);
            let data_cfg = DataGenConfig {
                task: Task::Linear,
                seed: trial_seed,
                ..cfg.clone()
            };
            let ds = generate_linear_dataset(&data_cfg)?;
            let truth = ds.truth.as_ref().expect("generated data has a truth");
            let norm = truth.iter().map(|v| v * v).sum::<f64>().sqrt();
            let theta: Vec<f64> = truth.iter().map(|v| v / norm).collect();
            let mu = signal(&ds.features, &theta);

            let curated = sorted_consecutive_bags(&mu, k)?;
            let random = random_bagging(cfg.n, k, derive_seed(trial_seed, &[1]))?;
            let c = linear_risk_decomposition(&ds.features, &curated, &theta, 0.0)?;
            let r = linear_risk_decomposition(&ds.features, &random, &theta, 0.0)?;
            Ok((c.bias_sq, r.bias_sq))
        })
        .collect();
    let mut curated = 0.0;
    let mut random = 0.0;
    for r in per_trial {
        let (c, rb) = r?;
        curated += c;
        random += rb;
    }
    Ok(BiasSeparation {
        curated_bias_sq: curated / trials as f64,
        random_bias_sq: random / trials as f64,
    })
}
