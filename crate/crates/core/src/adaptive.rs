//! Training drivers: PriorBoost, OneShot and PBPrefix.
//!
//! The training rows are split into `T` contiguous slices (the first `n mod T`
//! slices one row longer). Step 1 bags its slice at random; every later step
//! predicts the slice with the previous model, clusters the predictions with
//! [`solve_constrained_kmeans`], asks the oracle for the bag means and refits.
//! PriorBoost fits on the current slice only, PBPrefix on every slice seen so
//! far, and OneShot is the `T = 1` case.
//!
//! With `k = 1` every bag is a singleton and the bags carry no information
//! from the prior, so all three drivers collapse to a single round over the
//! full training set (identical to OneShot under the same seed).
//!
//! The drivers never see responses directly: [`run_adaptive`] takes the
//! design matrix and a [`ResponseSource`] that only the oracle reads.
//!
//! Under label DP every step queries disjoint samples, so the per-step
//! releases compose in parallel and the whole run is eps-label-DP.

use std::collections::BTreeMap;
use std::ops::Range;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bagging::{random_bagging, solve_constrained_kmeans};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::glm::{
    evaluate_loss, fit_glm_from, fit_linear_event_level, predict, FamilyKind, FitConfig,
    GlmFamily, Metric, ModelParams,
};
use crate::oracle::{AggregationOracle, DpParams, Release, ResponseSource};
use crate::partition::Partition;
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    PriorBoost,
    OneShot,
    PbPrefix,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::PriorBoost => "priorboost",
            Algorithm::OneShot => "oneshot",
            Algorithm::PbPrefix => "pbprefix",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "priorboost" => Ok(Algorithm::PriorBoost),
            "oneshot" => Ok(Algorithm::OneShot),
            "pbprefix" => Ok(Algorithm::PbPrefix),
            other => Err(Error::Config(format!("unknown algorithm '{other}'"))),
        }
    }
}

/// How `fit.l2_lambda` relates to the number of rows being fitted.
///
/// `PerSample` uses it as-is in the mean-normalized objective. `Summed`
/// treats it as the penalty on the summed loss (scikit-learn's `1/C`), i.e.
/// the fitter receives `lambda / n_fit`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyScale {
    PerSample,
    Summed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub steps: usize,
    pub min_bag_size: usize,
    pub family: GlmFamily,
    pub fit: FitConfig,
    pub penalty: PenaltyScale,
    pub dp: Option<DpParams>,
    pub round_labels: bool,
    /// Start each step's optimizer at the previous step's estimate instead of zero.
    pub warm_start_fits: bool,
    pub seed: u64,
}

impl RunConfig {
    /// Linear regression defaults: Gaussian family, no penalty, no rounding.
    pub fn linear(algorithm: Algorithm, steps: usize, min_bag_size: usize, seed: u64) -> Self {
        RunConfig {
            algorithm,
            steps,
            min_bag_size,
            family: GlmFamily::gaussian(),
            fit: FitConfig::default(),
            penalty: PenaltyScale::PerSample,
            dp: None,
            round_labels: false,
            warm_start_fits: false,
            seed,
        }
    }

    /// Logistic regression with rounded aggregate labels and a penalty on the
    /// summed loss.
    pub fn logistic(
        algorithm: Algorithm,
        steps: usize,
        min_bag_size: usize,
        l2_lambda: f64,
        seed: u64,
    ) -> Self {
        RunConfig {
            algorithm,
            steps,
            min_bag_size,
            family: GlmFamily::bernoulli_logit(),
            fit: FitConfig::with_lambda(l2_lambda),
            penalty: PenaltyScale::Summed,
            dp: None,
            round_labels: true,
            warm_start_fits: false,
            seed,
        }
    }

    /// Number of rounds actually run (OneShot and `k = 1` use a single round).
    pub fn effective_steps(&self) -> usize {
        if self.algorithm == Algorithm::OneShot || self.min_bag_size == 1 {
            1
        } else {
            self.steps
        }
    }

    fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.min_bag_size == 0 {
            return Err(Error::Config("steps and min_bag_size must be positive".into()));
        }
        if self.family.kind == FamilyKind::PoissonLog {
            return Err(Error::Config("adaptive runs support gaussian and bernoulli_logit".into()));
        }
        if self.family.kind == FamilyKind::BernoulliLogit && self.dp.is_some() && !self.round_labels {
            return Err(Error::Config(
                "noisy logistic aggregates must be rounded before fitting".into(),
            ));
        }
        Ok(())
    }

    fn lambda_for(&self, rows: usize) -> f64 {
        match self.penalty {
            PenaltyScale::PerSample => self.fit.l2_lambda,
            PenaltyScale::Summed => self.fit.l2_lambda / rows as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub theta: ModelParams,
    pub train_samples_used: usize,
    pub test_loss: f64,
    /// Bag size -> number of bags of that size in this step's query.
    pub bag_size_histogram: BTreeMap<usize, usize>,
    pub fit_converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub algorithm: Algorithm,
    pub min_bag_size: usize,
    pub epsilon: Option<f64>,
    pub per_step: Vec<StepRecord>,
    pub final_theta: ModelParams,
}

impl RunTrace {
    pub fn final_loss(&self) -> f64 {
        self.per_step.last().map_or(f64::NAN, |s| s.test_loss)
    }

    /// Rows `algorithm,k,epsilon,step,test_loss` with a header line.
    pub fn to_csv(&self) -> String {
        let eps = self.epsilon.map(|e| e.to_string()).unwrap_or_default();
        let mut out = String::from("algorithm,k,epsilon,step,test_loss\n");
        for s in &self.per_step {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                self.algorithm.name(),
                self.min_bag_size,
                eps,
                s.step,
                s.test_loss
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }
}

/// Contiguous slice bounds; the first `n mod t` slices get one extra row.
pub fn slice_ranges(n: usize, t: usize) -> Vec<Range<usize>> {
    let base = n / t;
    let extra = n % t;
    let mut start = 0;
    (0..t)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

pub fn run_priorboost(train: &Dataset, test: &Dataset, cfg: &RunConfig) -> Result<RunTrace> {
    let cfg = RunConfig {
        algorithm: Algorithm::PriorBoost,
        ..cfg.clone()
    };
    run_adaptive(&train.features, &train.responses, test, &cfg, None)
}

pub fn run_oneshot(train: &Dataset, test: &Dataset, cfg: &RunConfig) -> Result<RunTrace> {
    let cfg = RunConfig {
        algorithm: Algorithm::OneShot,
        ..cfg.clone()
    };
    run_adaptive(&train.features, &train.responses, test, &cfg, None)
}

pub fn run_pbprefix(train: &Dataset, test: &Dataset, cfg: &RunConfig) -> Result<RunTrace> {
    let cfg = RunConfig {
        algorithm: Algorithm::PbPrefix,
        ..cfg.clone()
    };
    run_adaptive(&train.features, &train.responses, test, &cfg, None)
}

/// PriorBoost whose first slice is clustered on the predictions of `prior`
/// instead of being bagged at random.
pub fn warm_start_priorboost(
    train: &Dataset,
    test: &Dataset,
    cfg: &RunConfig,
    prior: &ModelParams,
) -> Result<RunTrace> {
    let cfg = RunConfig {
        algorithm: Algorithm::PriorBoost,
        ..cfg.clone()
    };
    run_adaptive(&train.features, &train.responses, test, &cfg, Some(prior))
}

/// Dispatches on `cfg.algorithm`.
pub fn run(train: &Dataset, test: &Dataset, cfg: &RunConfig) -> Result<RunTrace> {
    run_adaptive(&train.features, &train.responses, test, cfg, None)
}

/// Core driver. `responses` is read only through the aggregation oracle.
pub fn run_adaptive<S: ResponseSource + ?Sized>(
    features: &DMatrix<f64>,
    responses: &S,
    test: &Dataset,
    cfg: &RunConfig,
    prior: Option<&ModelParams>,
) -> Result<RunTrace> {
    cfg.validate()?;
    let n = features.nrows();
    if responses.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: responses.len(),
        });
    }
    if test.dim() != features.ncols() {
        return Err(Error::DimensionMismatch {
            expected: features.ncols(),
            found: test.dim(),
        });
    }
    if let Some(p) = prior {
        if p.dim() != features.ncols() {
            return Err(Error::DimensionMismatch {
                expected: features.ncols(),
                found: p.dim(),
            });
        }
    }
    let k = cfg.min_bag_size;
    let steps = cfg.effective_steps();
    if n / steps < k {
        return Err(Error::Infeasible { n: n / steps, k });
    }
    let metric = Metric::for_family(&cfg.family)?;
    let oracle = AggregationOracle::new(responses);
    let d = features.ncols();

    let mut current: Option<ModelParams> = prior.cloned();
    let mut prefix_targets: Vec<f64> = Vec::new();
    let mut per_step = Vec::with_capacity(steps);

    for (idx, rows) in slice_ranges(n, steps).into_iter().enumerate() {
        let step = idx + 1;
        let slice_x = features.rows(rows.start, rows.len()).into_owned();

        let partition = match (&current, k) {
            (_, 1) => Partition::singletons(rows.len()),
            (None, _) => random_bagging(rows.len(), k, derive_seed(cfg.seed, &[step as u64, 0]))?,
            (Some(model), _) => {
                let scores = predict(model, &slice_x, &cfg.family)?;
                solve_constrained_kmeans(&scores, k)?.original_partition()
            }
        };

        let release = Release {
            dp: cfg.dp,
            round: cfg.round_labels,
            seed: derive_seed(cfg.seed, &[step as u64, 1]),
        };
        let batch = oracle
            .query(rows.clone(), &partition, &release)
            .map_err(|e| e.at_step(step))?;
        let targets = batch.expanded_targets();

        let init = match (&current, cfg.warm_start_fits) {
            (Some(m), true) => m.clone(),
            _ => ModelParams::zeros(d),
        };
        let (fit, converged) = match cfg.algorithm {
            Algorithm::PbPrefix => {
                prefix_targets.extend_from_slice(&targets);
                let prefix_x = features.rows(0, rows.end).into_owned();
                fit_step(&prefix_x, &prefix_targets, cfg, &init)
            }
            _ => fit_step(&slice_x, &targets, cfg, &init),
        }
        .map_err(|e| e.at_step(step))?;

        let test_loss = evaluate_loss(&fit, test, &cfg.family, metric)?;
        if !test_loss.is_finite() {
            return Err(Error::Divergence { iteration: 0 }.at_step(step));
        }
        let mut bag_size_histogram = BTreeMap::new();
        for s in partition.bag_sizes() {
            *bag_size_histogram.entry(s).or_insert(0) += 1;
        }
        per_step.push(StepRecord {
            step,
            theta: fit.clone(),
            train_samples_used: match cfg.algorithm {
                Algorithm::PbPrefix => rows.end,
                _ => rows.len(),
            },
            test_loss,
            bag_size_histogram,
            fit_converged: converged,
        });
        current = Some(fit);
    }

    Ok(RunTrace {
        algorithm: cfg.algorithm,
        min_bag_size: k,
        epsilon: cfg.dp.map(|p| p.epsilon),
        final_theta: current.expect("at least one step"),
        per_step,
    })
}

fn fit_step(
    x: &DMatrix<f64>,
    targets: &[f64],
    cfg: &RunConfig,
    init: &ModelParams,
) -> Result<(ModelParams, bool)> {
    let lambda = cfg.lambda_for(x.nrows());
    if cfg.family.kind == FamilyKind::Gaussian && lambda == 0.0 {
        return Ok((fit_linear_event_level(x, targets)?, true));
    }
    let fit_cfg = FitConfig {
        l2_lambda: lambda,
        ..cfg.fit
    };
    let fit = fit_glm_from(x, targets, &cfg.family, &fit_cfg, init)?;
    if !fit.converged {
        log::warn!(
            "fit stopped after {} iterations with gradient norm {:.3e}",
            fit.iterations,
            fit.gradient_norm
        );
    }
    Ok((fit.params, fit.converged))
}
