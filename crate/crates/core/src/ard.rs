//! Bayesian linear model of user experience.
//!
//! The prior over an app's weight vector is fitted by automatic relevance
//! determination (ARD) on pooled history, then updated per app with the
//! conjugate Gaussian formulas. Thompson sampling draws from the posterior;
//! the final recommendation uses its mode.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{HistoricalDataset, UserScore, BIAS_INDEX, FEATURE_DIM};

/// Default widening applied to the fitted prior covariance.
pub const DEFAULT_PRIOR_SCALE: f64 = 20.0;

/// Standard deviation assigned to coefficients ARD pruned away.
pub const PRUNED_STDEV: f64 = 1e-6;

const FACTOR_JITTER: f64 = 1e-10;
const DEGENERATE_VARIANCE: f64 = 1e-12;
const SYMMETRY_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("need at least {needed} observations, got {got}")]
    TooFewObservations { needed: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error("covariance is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
}

/// Parameters of the Gaussian prior `N(mean, scale * diag(stdev)^2)` plus
/// the observation noise learned alongside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPrior")]
pub struct PriorParams {
    mean: Vec<f64>,
    stdev: Vec<f64>,
    noise_sd: f64,
    scale: f64,
}

#[derive(Deserialize)]
struct RawPrior {
    mean: Vec<f64>,
    stdev: Vec<f64>,
    noise_sd: f64,
    scale: f64,
}

impl TryFrom<RawPrior> for PriorParams {
    type Error = ModelError;

    fn try_from(raw: RawPrior) -> Result<Self, Self::Error> {
        PriorParams::new(raw.mean, raw.stdev, raw.noise_sd, raw.scale)
    }
}

impl PriorParams {
    pub fn new(
        mean: Vec<f64>,
        stdev: Vec<f64>,
        noise_sd: f64,
        scale: f64,
    ) -> Result<Self, ModelError> {
        if mean.len() != stdev.len() {
            return Err(ModelError::DimensionMismatch {
                expected: mean.len(),
                found: stdev.len(),
            });
        }
        if mean.is_empty() {
            return Err(ModelError::InvalidPrior("empty mean".into()));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("prior mean"));
        }
        if let Some(bad) = stdev.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(ModelError::InvalidPrior(format!(
                "stdev components must be positive, got {bad}"
            )));
        }
        if !(noise_sd.is_finite() && noise_sd > 0.0) {
            return Err(ModelError::InvalidPrior(format!(
                "noise_sd must be positive, got {noise_sd}"
            )));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(ModelError::InvalidPrior(format!(
                "scale must be positive, got {scale}"
            )));
        }
        Ok(Self {
            mean,
            stdev,
            noise_sd,
            scale,
        })
    }

    /// Zero-mean prior with unit standard deviations: the uninformed control.
    pub fn flat(dim: usize, noise_sd: f64, scale: f64) -> Result<Self, ModelError> {
        Self::new(vec![0.0; dim], vec![1.0; dim], noise_sd, scale)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn stdev(&self) -> &[f64] {
        &self.stdev
    }

    pub fn noise_sd(&self) -> f64 {
        self.noise_sd
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn with_scale(&self, scale: f64) -> Result<Self, ModelError> {
        Self::new(self.mean.clone(), self.stdev.clone(), self.noise_sd, scale)
    }

    /// Diagonal of the widened prior covariance.
    fn variances(&self) -> impl Iterator<Item = f64> + '_ {
        self.stdev.iter().map(move |s| self.scale * s * s)
    }
}

/// Gaussian belief over an app's weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
}

impl Posterior {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self, ModelError> {
        let n = mean.len();
        if covariance.shape() != (n, n) {
            return Err(ModelError::DimensionMismatch {
                expected: n,
                found: covariance.nrows(),
            });
        }
        let asymmetry = (&covariance - covariance.transpose()).amax();
        if asymmetry > SYMMETRY_TOLERANCE {
            return Err(ModelError::NotSymmetric(asymmetry));
        }
        Ok(Self { mean, covariance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }
}

/// A point value for the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(weights: Vec<f64>) -> Result<Self, ModelError> {
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(ModelError::NonFinite("weights"));
        }
        Ok(Self(weights))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Raw inner product with a feature vector, unclamped.
    pub fn dot(&self, features: &[f64]) -> Result<f64, ModelError> {
        if features.len() != self.0.len() {
            return Err(ModelError::DimensionMismatch {
                expected: self.0.len(),
                found: features.len(),
            });
        }
        Ok(self.0.iter().zip(features).map(|(w, x)| w * x).sum())
    }
}

impl From<&DVector<f64>> for WeightVector {
    fn from(v: &DVector<f64>) -> Self {
        WeightVector(v.iter().copied().collect())
    }
}

/// `<weights, features>` clamped into the score range.
pub fn predict_score(weights: &WeightVector, features: &[f64]) -> Result<UserScore, ModelError> {
    weights.dot(features).map(UserScore::clamped)
}

/// Conjugate update of the widened prior with observations `(features, score)`.
///
/// Precision form: `P = Σ0⁻¹ + ΦᵀΦ/σ1²`, `mean = P⁻¹(Σ0⁻¹μ0 + Φᵀy/σ1²)`.
pub fn posterior_update(
    prior: &PriorParams,
    data: &[(&[f64], f64)],
) -> Result<Posterior, ModelError> {
    let dim = prior.dim();
    for (features, score) in data {
        if features.len() != dim {
            return Err(ModelError::DimensionMismatch {
                expected: dim,
                found: features.len(),
            });
        }
        if !score.is_finite() || features.iter().any(|x| !x.is_finite()) {
            return Err(ModelError::NonFinite("observation"));
        }
    }

    let prior_mean = DVector::from_column_slice(prior.mean());
    let prior_var = DVector::from_iterator(dim, prior.variances());
    if data.is_empty() {
        return Ok(Posterior {
            mean: prior_mean,
            covariance: DMatrix::from_diagonal(&prior_var),
        });
    }

    let noise_precision = 1.0 / (prior.noise_sd() * prior.noise_sd());
    let mut precision = DMatrix::from_diagonal(&prior_var.map(|v| 1.0 / v));
    let mut information = prior_mean.component_div(&prior_var);
    for (features, score) in data {
        let x = DVector::from_column_slice(features);
        precision.ger(noise_precision, &x, &x, 1.0);
        information.axpy(noise_precision * score, &x, 1.0);
    }

    let chol = Cholesky::new(precision).ok_or(ModelError::NotPositiveDefinite)?;
    let mean = chol.solve(&information);
    let mut covariance = chol.inverse();
    symmetrize(&mut covariance);
    Ok(Posterior { mean, covariance })
}

/// Conjugate update starting from an existing Gaussian posterior.
///
/// Chaining this after [`posterior_update`] gives the same result as one
/// batch update over all observations.
pub fn posterior_extend(
    posterior: &Posterior,
    noise_sd: f64,
    data: &[(&[f64], f64)],
) -> Result<Posterior, ModelError> {
    let dim = posterior.dim();
    if !(noise_sd.is_finite() && noise_sd > 0.0) {
        return Err(ModelError::InvalidPrior(format!(
            "noise_sd must be positive, got {noise_sd}"
        )));
    }
    for (features, score) in data {
        if features.len() != dim {
            return Err(ModelError::DimensionMismatch {
                expected: dim,
                found: features.len(),
            });
        }
        if !score.is_finite() || features.iter().any(|x| !x.is_finite()) {
            return Err(ModelError::NonFinite("observation"));
        }
    }
    if data.is_empty() {
        return Ok(posterior.clone());
    }
    let noise_precision = 1.0 / (noise_sd * noise_sd);
    let prior_chol =
        Cholesky::new(posterior.covariance().clone()).ok_or(ModelError::NotPositiveDefinite)?;
    let mut precision = prior_chol.inverse();
    let mut information = prior_chol.solve(posterior.mean());
    for (features, score) in data {
        let x = DVector::from_column_slice(features);
        precision.ger(noise_precision, &x, &x, 1.0);
        information.axpy(noise_precision * score, &x, 1.0);
    }
    symmetrize(&mut precision);
    let chol = Cholesky::new(precision).ok_or(ModelError::NotPositiveDefinite)?;
    let mean = chol.solve(&information);
    let mut covariance = chol.inverse();
    symmetrize(&mut covariance);
    Ok(Posterior { mean, covariance })
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Draws one weight vector from the posterior using its Cholesky factor.
///
/// A covariance whose diagonal is entirely below `1e-12` is treated as a point
/// mass and the mean is returned without consuming randomness.
pub fn sample_weights<R: Rng + ?Sized>(
    posterior: &Posterior,
    rng: &mut R,
) -> Result<WeightVector, ModelError> {
    let cov = posterior.covariance();
    if cov.diagonal().iter().all(|v| *v <= DEGENERATE_VARIANCE) {
        return Ok(map_estimate(posterior));
    }
    let factor = match Cholesky::new(cov.clone()) {
        Some(chol) => chol,
        None => {
            let jittered = cov + DMatrix::identity(cov.nrows(), cov.ncols()) * FACTOR_JITTER;
            Cholesky::new(jittered).ok_or(ModelError::NotPositiveDefinite)?
        }
    };
    let z = DVector::from_fn(posterior.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let draw = posterior.mean() + factor.l() * z;
    WeightVector::new(draw.iter().copied().collect())
}

/// Mode of the Gaussian posterior, i.e. its mean.
pub fn map_estimate(posterior: &Posterior) -> WeightVector {
    WeightVector::from(posterior.mean())
}

/// Knobs for the ARD evidence iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct ArdConfig {
    pub max_iterations: usize,
    /// Stop once every hyperparameter moves by less than this relative amount.
    pub tolerance: f64,
    /// Coefficients whose precision exceeds this are dropped for good.
    pub prune_threshold: f64,
    /// Upper bound on the noise precision (reached on noiseless data).
    pub max_noise_precision: f64,
    /// Column holding the constant term. Other zero-variance columns are
    /// collinear with it and get pruned up front.
    pub intercept: Option<usize>,
}

impl Default for ArdConfig {
    fn default() -> Self {
        Self {
            max_iterations: 300,
            tolerance: 1e-6,
            prune_threshold: 1e4,
            max_noise_precision: 1e10,
            intercept: None,
        }
    }
}

/// Result of an ARD fit.
#[derive(Debug, Clone, PartialEq)]
pub struct ArdFit {
    /// Posterior mean of the coefficients; pruned coefficients are zero.
    pub mean: Vec<f64>,
    /// Posterior standard deviation per coefficient; pruned ones get
    /// [`PRUNED_STDEV`].
    pub stdev: Vec<f64>,
    /// Per-coefficient prior precisions; `f64::INFINITY` when pruned.
    pub precisions: Vec<f64>,
    pub noise_precision: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl ArdFit {
    pub fn noise_sd(&self) -> f64 {
        (1.0 / self.noise_precision).sqrt()
    }

    pub fn is_pruned(&self, index: usize) -> bool {
        self.precisions[index].is_infinite()
    }
}

struct ActivePosterior {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    rss: f64,
}

fn active_posterior(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    active: &[usize],
    precisions: &[f64],
    noise_precision: f64,
) -> Result<ActivePosterior, ModelError> {
    if active.is_empty() {
        return Ok(ActivePosterior {
            mean: DVector::zeros(0),
            covariance: DMatrix::zeros(0, 0),
            rss: y.norm_squared(),
        });
    }
    let xa = x.select_columns(active);
    let mut p = xa.tr_mul(&xa) * noise_precision;
    for (k, &j) in active.iter().enumerate() {
        p[(k, k)] += precisions[j];
    }
    let chol: Cholesky<f64, Dyn> = Cholesky::new(p).ok_or(ModelError::NotPositiveDefinite)?;
    let mean = chol.solve(&(xa.tr_mul(y) * noise_precision));
    let covariance = chol.inverse();
    let rss = (y - &xa * &mean).norm_squared();
    Ok(ActivePosterior {
        mean,
        covariance,
        rss,
    })
}

/// Fits ARD regression by evidence maximization with MacKay's fixed-point
/// updates.
///
/// Each step computes the Gaussian posterior under the current precisions,
/// then sets `γ_j = 1 − a_j S_jj`, `a_j ← γ_j / m_j²` and
/// `b ← (N − Σγ) / RSS`. Coefficients whose precision passes
/// `prune_threshold` are removed. Failing to converge is logged and the last
/// iterate returned.
pub fn fit_ard(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    config: &ArdConfig,
) -> Result<ArdFit, ModelError> {
    let (n, d) = x.shape();
    if y.len() != n {
        return Err(ModelError::DimensionMismatch {
            expected: n,
            found: y.len(),
        });
    }
    if n < 2 {
        return Err(ModelError::TooFewObservations { needed: 2, got: n });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite("features"));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite("targets"));
    }

    let tiny = f64::MIN_POSITIVE.sqrt();
    let mut precisions = vec![1.0; d];
    let mut active: Vec<usize> = (0..d)
        .filter(|&j| {
            let column = x.column(j);
            if Some(j) == config.intercept {
                return column.iter().any(|v| *v != 0.0);
            }
            let spread = column.max() - column.min();
            if config.intercept.is_some() {
                spread > 0.0
            } else {
                column.iter().any(|v| *v != 0.0)
            }
        })
        .collect();
    for j in 0..d {
        if !active.contains(&j) {
            precisions[j] = f64::INFINITY;
        }
    }

    let y_mean = y.mean();
    let y_var = y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n as f64;
    let mut noise_precision = (1.0 / y_var.max(tiny)).min(config.max_noise_precision);

    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iterations {
        iterations += 1;
        let post = active_posterior(x, y, &active, &precisions, noise_precision)?;

        let mut gamma_total = 0.0;
        let mut max_change: f64 = 0.0;
        for (k, &j) in active.iter().enumerate() {
            let gamma = (1.0 - precisions[j] * post.covariance[(k, k)]).clamp(0.0, 1.0);
            gamma_total += gamma;
            let m2 = post.mean[k] * post.mean[k];
            let updated = if m2 > 0.0 { (gamma / m2).max(tiny) } else { f64::INFINITY };
            let change = (updated - precisions[j]).abs() / precisions[j];
            max_change = max_change.max(change);
            precisions[j] = updated;
        }

        let dof = (n as f64 - gamma_total).max(tiny);
        let updated_noise = (dof / post.rss.max(tiny)).min(config.max_noise_precision);
        max_change = max_change.max((updated_noise - noise_precision).abs() / noise_precision);
        noise_precision = updated_noise;

        let before = active.len();
        active.retain(|&j| precisions[j] <= config.prune_threshold);
        for j in 0..d {
            if precisions[j] > config.prune_threshold {
                precisions[j] = f64::INFINITY;
            }
        }

        if active.len() == before && max_change < config.tolerance {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!(
            "ARD did not converge after {} iterations; returning last iterate",
            iterations
        );
    }

    let post = active_posterior(x, y, &active, &precisions, noise_precision)?;
    let mut mean = vec![0.0; d];
    let mut stdev = vec![PRUNED_STDEV; d];
    for (k, &j) in active.iter().enumerate() {
        mean[j] = post.mean[k];
        stdev[j] = post.covariance[(k, k)].max(0.0).sqrt().max(PRUNED_STDEV);
    }
    Ok(ArdFit {
        mean,
        stdev,
        precisions,
        noise_precision,
        iterations,
        converged,
    })
}

/// Fits the prior from pooled history across apps.
pub fn fit_prior(history: &HistoricalDataset, scale: f64) -> Result<PriorParams, ModelError> {
    fit_prior_with(history, scale, &ArdConfig::default()).map(|(prior, _)| prior)
}

/// Like [`fit_prior`] with explicit ARD settings; also returns the raw fit.
pub fn fit_prior_with(
    history: &HistoricalDataset,
    scale: f64,
    config: &ArdConfig,
) -> Result<(PriorParams, ArdFit), ModelError> {
    let n = history.len();
    if n < 2 {
        return Err(ModelError::TooFewObservations { needed: 2, got: n });
    }
    let x = DMatrix::from_fn(n, FEATURE_DIM, |i, j| history.entries[i].features.get(j));
    let y = DVector::from_iterator(n, history.entries.iter().map(|e| e.score.value()));
    let config = ArdConfig {
        intercept: Some(BIAS_INDEX),
        ..config.clone()
    };
    let fit = fit_ard(&x, &y, &config)?;
    let prior = PriorParams::new(fit.mean.clone(), fit.stdev.clone(), fit.noise_sd(), scale)?;
    Ok((prior, fit))
}
