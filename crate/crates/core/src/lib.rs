//! Learning from aggregate responses with curated bags.
//!
//! Samples are grouped into bags of at least `k` and only the mean response
//! of each bag is revealed. This crate builds those bags (at random, or by
//! exact size-constrained one-dimensional k-means on model predictions), fits
//! linear and generalized linear models to the bag means at the event level,
//! computes the resulting estimator risk analytically, and runs the adaptive
//! PriorBoost procedure with an optional Laplace mechanism for label
//! differential privacy.
//!
//! | module          | contents                                                   |
//! |-----------------|------------------------------------------------------------|
//! | [`data`]        | datasets, Gaussian generators, CSV/binary IO               |
//! | [`partition`]   | bag partitions and the within-bag averaging operator       |
//! | [`bagging`]     | constrained k-means DP, brute-force oracle, random bags    |
//! | [`glm`]         | families, event-level fitting, prediction and test metrics |
//! | [`oracle`]      | aggregation, rounding and label-DP release                 |
//! | [`adaptive`]    | PriorBoost, OneShot, PBPrefix                              |
//! | [`risk`]        | analytic risk decomposition and bounds                     |
//! | [`experiment`]  | seeded sweeps writing CSV curves                           |

// Validation uses `!(x > 0.0)` so that NaN is rejected along with the range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptive;
pub mod bagging;
pub mod data;
pub mod error;
pub mod experiment;
pub mod glm;
pub mod linalg;
pub mod oracle;
pub mod partition;
pub mod risk;
pub mod rng;

pub use adaptive::{
    run_oneshot, run_pbprefix, run_priorboost, warm_start_priorboost, Algorithm, PenaltyScale,
    RunConfig, RunTrace,
};
pub use bagging::{brute_force_kmeans, random_bagging, solve_constrained_kmeans, ClusteringSolution};
pub use data::{generate_linear_dataset, generate_logistic_dataset, DataGenConfig, Dataset, Task};
pub use error::{Error, Result};
pub use glm::{
    evaluate_loss, fit_glm_event_level, fit_linear_event_level, predict, FamilyKind, FitConfig,
    GlmFamily, Metric, ModelParams,
};
pub use oracle::{aggregate, apply_label_dp, round_binary, AggregateBatch, DpParams};
pub use partition::{partition_aggregation_operator, Partition};
pub use risk::{
    bias_separation_experiment, glm_gradient_moments, glm_gradient_upper_bound,
    linear_risk_decomposition, linear_risk_upper_bound, RiskReport,
};
