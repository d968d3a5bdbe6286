//! Exponential-family models fitted by event-level loss minimization.
//!
//! Every sample in bag `l` is fitted to the bag's mean response `ybar_l`. For
//! a canonical GLM with cumulant `b` and dispersion `phi` the objective is
//!
//! ```text
//! L(theta) = (1/n) sum_i [b(x_i^T theta) - t_i x_i^T theta] / phi + (lambda/2) ||theta||^2
//! ```
//!
//! with `t_i = ybar_{bag(i)}` (the "expanded targets", `S^T S y`). The Gaussian
//! member reduces to least squares, solved in closed form by
//! [`fit_linear_event_level`]; the others are fitted by damped Newton.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{gram, spd_factor, xt_vec};

/// Canonical exponential-family members supported by the fitters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    Gaussian,
    BernoulliLogit,
    PoissonLog,
}

/// Cumulant triple `(b, b', b'')` plus the dispersion `phi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlmFamily {
    pub kind: FamilyKind,
    pub dispersion: f64,
}

impl GlmFamily {
    pub fn new(kind: FamilyKind) -> Self {
        GlmFamily {
            kind,
            dispersion: 1.0,
        }
    }

    pub fn gaussian() -> Self {
        Self::new(FamilyKind::Gaussian)
    }

    pub fn bernoulli_logit() -> Self {
        Self::new(FamilyKind::BernoulliLogit)
    }

    pub fn poisson_log() -> Self {
        Self::new(FamilyKind::PoissonLog)
    }

    /// `b(eta)`.
    pub fn cumulant(&self, eta: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => 0.5 * eta * eta,
            FamilyKind::BernoulliLogit => log1p_exp(eta),
            FamilyKind::PoissonLog => eta.exp(),
        }
    }

    /// `b'(eta)`, the mean response.
    pub fn mean(&self, eta: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => eta,
            FamilyKind::BernoulliLogit => sigmoid(eta),
            FamilyKind::PoissonLog => eta.exp(),
        }
    }

    /// `b''(eta)`, the variance factor.
    pub fn variance(&self, eta: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => 1.0,
            FamilyKind::BernoulliLogit => {
                let p = sigmoid(eta);
                p * (1.0 - p)
            }
            FamilyKind::PoissonLog => eta.exp(),
        }
    }

    fn check_targets(&self, targets: &[f64]) -> Result<()> {
        let bad = match self.kind {
            FamilyKind::Gaussian => targets.iter().find(|t| !t.is_finite()),
            FamilyKind::BernoulliLogit => targets.iter().find(|t| !(0.0..=1.0).contains(*t)),
            FamilyKind::PoissonLog => targets.iter().find(|t| !(**t >= 0.0 && t.is_finite())),
        };
        match bad {
            Some(t) => Err(Error::OutOfRange(format!(
                "target {t} not admissible for {:?}",
                self.kind
            ))),
            None => Ok(()),
        }
    }
}

/// Logistic function, evaluated without overflow.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Model parameter vector; serializes as a bare JSON array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelParams {
    pub theta: Vec<f64>,
}

impl ModelParams {
    pub fn new(theta: Vec<f64>) -> Self {
        ModelParams { theta }
    }

    pub fn zeros(d: usize) -> Self {
        ModelParams {
            theta: vec![0.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn as_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.theta)
    }
}

impl From<DVector<f64>> for ModelParams {
    fn from(v: DVector<f64>) -> Self {
        ModelParams {
            theta: v.iter().copied().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub l2_lambda: f64,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub line_search: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            l2_lambda: 0.0,
            max_iter: 100,
            grad_tol: 1e-10,
            line_search: true,
        }
    }
}

impl FitConfig {
    pub fn with_lambda(l2_lambda: f64) -> Self {
        FitConfig {
            l2_lambda,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.grad_tol > 0.0) {
            return Err(Error::InvalidArgument("grad_tol must be positive".into()));
        }
        if !(self.l2_lambda >= 0.0) || !self.l2_lambda.is_finite() {
            return Err(Error::InvalidArgument("l2_lambda must be finite and nonnegative".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidArgument("max_iter must be positive".into()));
        }
        Ok(())
    }
}

/// Fitted parameters plus optimizer metadata. `converged = false` means
/// `max_iter` was exhausted (or the line search stalled) above `grad_tol`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlmFit {
    pub params: ModelParams,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
}

fn check_shapes(x: &DMatrix<f64>, targets: &[f64]) -> Result<()> {
    if x.nrows() != targets.len() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            found: targets.len(),
        });
    }
    if x.nrows() == 0 {
        return Err(Error::InvalidArgument("empty design".into()));
    }
    Ok(())
}

/// Least squares on expanded targets: solves `X^T X theta = X^T t` by Cholesky
/// with one step of iterative refinement.
pub fn fit_linear_event_level(x: &DMatrix<f64>, targets: &[f64]) -> Result<ModelParams> {
    check_shapes(x, targets)?;
    let chol = spd_factor(&gram(x))?;
    let rhs = xt_vec(x, targets);
    let mut theta = chol.solve(&rhs);
    let t = DVector::from_column_slice(targets);
    let residual = x.tr_mul(&(&t - x * &theta));
    theta += chol.solve(&residual);
    Ok(theta.into())
}

/// Event-level objective `L(theta)` including the ridge term.
pub fn event_level_loss(
    x: &DMatrix<f64>,
    targets: &[f64],
    family: &GlmFamily,
    l2_lambda: f64,
    theta: &DVector<f64>,
) -> f64 {
    let eta = x * theta;
    let n = targets.len() as f64;
    let data: f64 = eta
        .iter()
        .zip(targets)
        .map(|(&e, &t)| family.cumulant(e) - t * e)
        .sum();
    data / (n * family.dispersion) + 0.5 * l2_lambda * theta.norm_squared()
}

/// `X^T (b'(X theta) - t) / (n phi) + lambda theta`.
pub fn event_level_gradient(
    x: &DMatrix<f64>,
    targets: &[f64],
    family: &GlmFamily,
    l2_lambda: f64,
    theta: &DVector<f64>,
) -> DVector<f64> {
    let eta = x * theta;
    let resid: Vec<f64> = eta
        .iter()
        .zip(targets)
        .map(|(&e, &t)| family.mean(e) - t)
        .collect();
    let n = targets.len() as f64;
    xt_vec(x, &resid) / (n * family.dispersion) + theta * l2_lambda
}

/// `X^T diag(b''(X theta)) X / (n phi) + lambda I`.
pub fn event_level_hessian(
    x: &DMatrix<f64>,
    family: &GlmFamily,
    l2_lambda: f64,
    theta: &DVector<f64>,
) -> DMatrix<f64> {
    let eta = x * theta;
    let mut weighted = x.clone();
    for (i, e) in eta.iter().enumerate() {
        let w = family.variance(*e);
        weighted.row_mut(i).scale_mut(w);
    }
    let n = x.nrows() as f64;
    let d = x.ncols();
    x.tr_mul(&weighted) / (n * family.dispersion) + DMatrix::identity(d, d) * l2_lambda
}

/// Minimizes the event-level negative log-likelihood by Newton's method from
/// `theta = 0`.
pub fn fit_glm_event_level(
    x: &DMatrix<f64>,
    targets: &[f64],
    family: &GlmFamily,
    cfg: &FitConfig,
) -> Result<GlmFit> {
    fit_glm_from(x, targets, family, cfg, &ModelParams::zeros(x.ncols()))
}

/// Newton iterations with step halving, started at `init`.
///
/// If the Hessian cannot be factored, the step falls back to the negative
/// gradient with unit length (still halved until the loss decreases).
pub fn fit_glm_from(
    x: &DMatrix<f64>,
    targets: &[f64],
    family: &GlmFamily,
    cfg: &FitConfig,
    init: &ModelParams,
) -> Result<GlmFit> {
    check_shapes(x, targets)?;
    cfg.validate()?;
    family.check_targets(targets)?;
    if !(family.dispersion > 0.0) {
        return Err(Error::InvalidArgument("dispersion must be positive".into()));
    }
    if init.dim() != x.ncols() {
        return Err(Error::DimensionMismatch {
            expected: x.ncols(),
            found: init.dim(),
        });
    }

    let lambda = cfg.l2_lambda;
    let loss_at = |theta: &DVector<f64>| event_level_loss(x, targets, family, lambda, theta);
    let mut theta = init.as_vector();
    let mut loss = loss_at(&theta);
    if !loss.is_finite() {
        return Err(Error::Divergence { iteration: 0 });
    }
    let mut grad = event_level_gradient(x, targets, family, lambda, &theta);
    let mut grad_norm = grad.norm();

    for iteration in 1..=cfg.max_iter {
        if grad_norm <= cfg.grad_tol {
            return Ok(GlmFit {
                params: theta.into(),
                iterations: iteration - 1,
                gradient_norm: grad_norm,
                converged: true,
            });
        }
        let hessian = event_level_hessian(x, family, lambda, &theta);
        let direction = match spd_factor(&hessian) {
            Ok(chol) => -chol.solve(&grad),
            Err(_) => -&grad,
        };

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let candidate = &theta + &direction * step;
            let candidate_loss = loss_at(&candidate);
            if !cfg.line_search {
                if !candidate_loss.is_finite() {
                    return Err(Error::Divergence { iteration });
                }
                accepted = Some((candidate, candidate_loss));
                break;
            }
            if candidate_loss.is_finite() {
                if candidate_loss < loss {
                    accepted = Some((candidate, candidate_loss));
                    break;
                }
                // Near the optimum the loss is flat to rounding; accept steps
                // that do not measurably increase it but shrink the gradient.
                let slack = 8.0 * f64::EPSILON * loss.abs().max(1.0);
                if candidate_loss <= loss + slack {
                    let g = event_level_gradient(x, targets, family, lambda, &candidate);
                    if g.norm() < grad_norm {
                        accepted = Some((candidate, candidate_loss));
                        break;
                    }
                }
            }
            step *= 0.5;
        }

        let Some((next, next_loss)) = accepted else {
            // No representable decrease along the search direction.
            return Ok(GlmFit {
                params: theta.into(),
                iterations: iteration,
                gradient_norm: grad_norm,
                converged: grad_norm <= cfg.grad_tol,
            });
        };
        theta = next;
        loss = next_loss;
        grad = event_level_gradient(x, targets, family, lambda, &theta);
        grad_norm = grad.norm();
        if !grad_norm.is_finite() {
            return Err(Error::Divergence { iteration });
        }
    }

    Ok(GlmFit {
        params: theta.into(),
        iterations: cfg.max_iter,
        gradient_norm: grad_norm,
        converged: grad_norm <= cfg.grad_tol,
    })
}

/// Mean predictions `b'(X theta)`.
pub fn predict(params: &ModelParams, x: &DMatrix<f64>, family: &GlmFamily) -> Result<Vec<f64>> {
    if x.ncols() != params.dim() {
        return Err(Error::DimensionMismatch {
            expected: params.dim(),
            found: x.ncols(),
        });
    }
    let eta = x * params.as_vector();
    Ok(eta.iter().map(|&e| family.mean(e)).collect())
}

/// Test-set metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Mse,
    LogLoss,
}

impl Metric {
    /// Metric reported for a family in the experiments.
    pub fn for_family(family: &GlmFamily) -> Result<Metric> {
        match family.kind {
            FamilyKind::Gaussian => Ok(Metric::Mse),
            FamilyKind::BernoulliLogit => Ok(Metric::LogLoss),
            FamilyKind::PoissonLog => Err(Error::InvalidArgument(
                "no test metric defined for the Poisson family".into(),
            )),
        }
    }
}

/// Probabilities are clamped to `[1e-12, 1 - 1e-12]` for the log loss.
pub const LOG_LOSS_CLAMP: f64 = 1e-12;

pub fn evaluate_loss(
    params: &ModelParams,
    test: &Dataset,
    family: &GlmFamily,
    metric: Metric,
) -> Result<f64> {
    match (metric, family.kind) {
        (Metric::Mse, FamilyKind::Gaussian) | (Metric::LogLoss, FamilyKind::BernoulliLogit) => {}
        _ => {
            return Err(Error::InvalidArgument(format!(
                "metric {metric:?} is incompatible with family {:?}",
                family.kind
            )))
        }
    }
    let pred = predict(params, &test.features, family)?;
    let n = test.len() as f64;
    let total: f64 = match metric {
        Metric::Mse => pred
            .iter()
            .zip(&test.responses)
            .map(|(p, y)| (y - p).powi(2))
            .sum(),
        Metric::LogLoss => pred
            .iter()
            .zip(&test.responses)
            .map(|(&p, &y)| {
                let p = p.clamp(LOG_LOSS_CLAMP, 1.0 - LOG_LOSS_CLAMP);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum(),
    };
    Ok(total / n)
}
