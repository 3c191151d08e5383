//! Priors, Gaussian likelihoods over exact or numerical forward maps, and the
//! unnormalized log posterior.
//!
//! Everything is kept in log space; a parameter region where the solver
//! produces a non-finite state has log-likelihood `-inf`.

use crate::models::ExactSolution;
use crate::ode::{observe_at, OdeSystem, SolverConfig, SolverError};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use std::f64::consts::PI;
use std::sync::Arc;
use thiserror::Error;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum DataError {
    #[error("dataset is empty")]
    Empty,
    #[error("{times} times but {values} values")]
    LengthMismatch { times: usize, values: usize },
    #[error("times must be strictly increasing (index {0})")]
    NonMonotoneTimes(usize),
    #[error("non-finite entry at index {0}")]
    NonFinite(usize),
    #[error("noise scale must be positive, got {0}")]
    InvalidSigma(f64),
}

/// A density (not necessarily normalized) over a flat parameter vector.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    fn log_density(&self, x: &[f64]) -> f64;
}

impl<T: LogDensity + ?Sized> LogDensity for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        (**self).log_density(x)
    }
}

/// Adapts a closure into a [`LogDensity`].
pub struct FnDensity<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> f64 + Sync> FnDensity<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64]) -> f64 + Sync> LogDensity for FnDensity<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }
}

/// Observations `y_i` at times `t_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_fixed: Option<f64>,
}

impl Dataset {
    pub fn new(times: Vec<f64>, values: Vec<f64>, sigma_fixed: Option<f64>) -> Result<Self, DataError> {
        if times.len() != values.len() {
            return Err(DataError::LengthMismatch { times: times.len(), values: values.len() });
        }
        if times.is_empty() {
            return Err(DataError::Empty);
        }
        if let Some(i) = times.iter().zip(&values).position(|(t, y)| !(t.is_finite() && y.is_finite())) {
            return Err(DataError::NonFinite(i));
        }
        if let Some(i) = times.windows(2).position(|w| w[1] <= w[0]) {
            return Err(DataError::NonMonotoneTimes(i + 1));
        }
        if let Some(s) = sigma_fixed {
            if !(s > 0.0 && s.is_finite()) {
                return Err(DataError::InvalidSigma(s));
            }
        }
        Ok(Self { times, values, sigma_fixed })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Drops the first `k` observations.
    pub fn skip(&self, k: usize) -> Result<Dataset, DataError> {
        Dataset::new(self.times[k..].to_vec(), self.values[k..].to_vec(), self.sigma_fixed)
    }
}

/// One prior factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "family")]
pub enum PriorComponent {
    /// Shape/rate parameterization, support `(0, ∞)`.
    Gamma { shape: f64, rate: f64 },
    Normal { mean: f64, sd: f64 },
    Uniform { lower: f64, upper: f64 },
}

impl PriorComponent {
    pub fn log_density(&self, x: f64) -> f64 {
        match *self {
            PriorComponent::Gamma { shape, rate } => {
                if x <= 0.0 || !x.is_finite() {
                    return f64::NEG_INFINITY;
                }
                shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
            }
            PriorComponent::Normal { mean, sd } => {
                let z = (x - mean) / sd;
                -0.5 * z * z - sd.ln() - 0.5 * LN_2PI
            }
            PriorComponent::Uniform { lower, upper } => {
                if x < lower || x > upper {
                    f64::NEG_INFINITY
                } else {
                    -(upper - lower).ln()
                }
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            PriorComponent::Gamma { shape, rate } => shape / rate,
            PriorComponent::Normal { mean, .. } => mean,
            PriorComponent::Uniform { lower, upper } => 0.5 * (lower + upper),
        }
    }

    pub fn sd(&self) -> f64 {
        match *self {
            PriorComponent::Gamma { shape, rate } => shape.sqrt() / rate,
            PriorComponent::Normal { sd, .. } => sd,
            PriorComponent::Uniform { lower, upper } => (upper - lower) / 12f64.sqrt(),
        }
    }

    /// An interval holding essentially all prior mass.
    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            PriorComponent::Gamma { .. } => (0.0, self.mean() + 12.0 * self.sd()),
            PriorComponent::Normal { mean, sd } => (mean - 12.0 * sd, mean + 12.0 * sd),
            PriorComponent::Uniform { lower, upper } => (lower, upper),
        }
    }

    /// Exact support; the density is zero outside it.
    pub fn support(&self) -> (f64, f64) {
        match *self {
            PriorComponent::Gamma { .. } => (0.0, f64::INFINITY),
            PriorComponent::Normal { .. } => (f64::NEG_INFINITY, f64::INFINITY),
            PriorComponent::Uniform { lower, upper } => (lower, upper),
        }
    }

    pub fn is_valid(&self) -> bool {
        match *self {
            PriorComponent::Gamma { shape, rate } => shape > 0.0 && rate > 0.0,
            PriorComponent::Normal { sd, mean } => sd > 0.0 && mean.is_finite(),
            PriorComponent::Uniform { lower, upper } => lower < upper,
        }
    }
}

/// Independent product prior, one component per sampled coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Prior {
    pub components: Vec<PriorComponent>,
}

impl Prior {
    pub fn new(components: Vec<PriorComponent>) -> Self {
        Self { components }
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }
}

impl LogDensity for Prior {
    fn dim(&self) -> usize {
        self.components.len()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        log_prior(self, x)
    }
}

pub fn log_prior(prior: &Prior, phi: &[f64]) -> f64 {
    prior
        .components
        .iter()
        .zip(phi)
        .map(|(c, &x)| c.log_density(x))
        .sum()
}

/// Whether the noise scale is fixed or sampled as the last coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseModel {
    Fixed(f64),
    Inferred,
}

/// `φ = (θ, σ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub theta: Vec<f64>,
    pub sigma: f64,
}

impl ParamVector {
    pub fn new(theta: Vec<f64>, sigma: f64) -> Self {
        Self { theta, sigma }
    }
}

/// Parameter-to-observable map, either closed form or through a solver.
#[derive(Clone)]
pub enum ForwardMap {
    Exact(Arc<dyn ExactSolution>),
    Numerical { system: Arc<dyn OdeSystem>, config: SolverConfig },
}

impl ForwardMap {
    pub fn numerical<S: OdeSystem + 'static>(system: S, config: SolverConfig) -> Self {
        ForwardMap::Numerical { system: Arc::new(system), config }
    }

    pub fn exact<E: ExactSolution + 'static>(model: E) -> Self {
        ForwardMap::Exact(Arc::new(model))
    }

    pub fn predict(&self, theta: &[f64], times: &[f64]) -> Result<Vec<f64>, SolverError> {
        match self {
            ForwardMap::Exact(model) => {
                Ok(times.iter().map(|&t| model.exact_observation(t, theta)).collect())
            }
            ForwardMap::Numerical { system, config } => observe_at(system.as_ref(), theta, config, times),
        }
    }

    pub fn param_dim(&self) -> usize {
        match self {
            ForwardMap::Exact(m) => m.param_dim(),
            ForwardMap::Numerical { system, .. } => system.param_dim(),
        }
    }

    pub fn solver(&self) -> Option<&SolverConfig> {
        match self {
            ForwardMap::Exact(_) => None,
            ForwardMap::Numerical { config, .. } => Some(config),
        }
    }
}

impl std::fmt::Debug for ForwardMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ForwardMap::Exact(_) => f.write_str("ForwardMap::Exact"),
            ForwardMap::Numerical { config, .. } => {
                write!(f, "ForwardMap::Numerical({}, h={})", config.method, config.h)
            }
        }
    }
}

/// Gaussian log-likelihood
/// `−n log σ − (n/2) log 2π − Σ (y_i − f(X_θ(t_i)))² / (2σ²)`.
pub fn log_likelihood(dataset: &Dataset, phi: &ParamVector, forward: &ForwardMap) -> f64 {
    if !(phi.sigma > 0.0) {
        return f64::NEG_INFINITY;
    }
    match forward.predict(&phi.theta, &dataset.times) {
        Ok(pred) => gaussian_log_likelihood(&dataset.values, &pred, phi.sigma),
        Err(_) => f64::NEG_INFINITY,
    }
}

pub(crate) fn gaussian_log_likelihood(values: &[f64], pred: &[f64], sigma: f64) -> f64 {
    let n = values.len() as f64;
    let ss: f64 = values.iter().zip(pred).map(|(y, f)| (y - f) * (y - f)).sum();
    let ll = -n * sigma.ln() - 0.5 * n * (2.0 * PI).ln() - ss / (2.0 * sigma * sigma);
    if ll.is_nan() {
        f64::NEG_INFINITY
    } else {
        ll
    }
}

/// `log P(y | φ) + log P(φ)`; short-circuits to `-inf` outside the prior
/// support so the solver is never run there.
pub fn log_posterior_unnorm(dataset: &Dataset, prior: &Prior, phi: &ParamVector, forward: &ForwardMap) -> f64 {
    let mut flat = phi.theta.clone();
    if prior.dim() > flat.len() {
        flat.push(phi.sigma);
    }
    let lp = log_prior(prior, &flat);
    if lp == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    log_likelihood(dataset, phi, forward) + lp
}

/// `R_h(φ) = P^h(y|φ) / P(y|φ)`.
pub fn likelihood_ratio_rh<S, E>(
    dataset: &Dataset,
    phi: &ParamVector,
    system: &S,
    config: &SolverConfig,
    exact: &E,
) -> Result<f64, SolverError>
where
    S: OdeSystem + ?Sized,
    E: ExactSolution + ?Sized,
{
    let numeric = observe_at(system, &phi.theta, config, &dataset.times)?;
    let exact: Vec<f64> = dataset.times.iter().map(|&t| exact.exact_observation(t, &phi.theta)).collect();
    let ll_h = gaussian_log_likelihood(&dataset.values, &numeric, phi.sigma);
    let ll = gaussian_log_likelihood(&dataset.values, &exact, phi.sigma);
    Ok((ll_h - ll).exp())
}

/// `max_i |f(X^h_θ(t_i)) − f(X_θ(t_i))|` over the observation times.
pub fn max_discrepancy_dh<S, E>(
    times: &[f64],
    theta: &[f64],
    system: &S,
    config: &SolverConfig,
    exact: &E,
) -> Result<f64, SolverError>
where
    S: OdeSystem + ?Sized,
    E: ExactSolution + ?Sized,
{
    let numeric = observe_at(system, theta, config, times)?;
    Ok(times
        .iter()
        .zip(&numeric)
        .map(|(&t, f)| (f - exact.exact_observation(t, theta)).abs())
        .fold(0.0, f64::max))
}

/// Unnormalized posterior over the flat coordinate vector
/// `φ = θ` (fixed noise) or `φ = (θ, σ)` (inferred noise).
#[derive(Debug, Clone)]
pub struct Posterior {
    pub dataset: Dataset,
    pub prior: Prior,
    pub forward: ForwardMap,
    pub noise: NoiseModel,
}

impl Posterior {
    pub fn new(dataset: Dataset, prior: Prior, forward: ForwardMap, noise: NoiseModel) -> Self {
        Self { dataset, prior, forward, noise }
    }

    /// Same data, prior and noise model with a different forward map.
    pub fn with_forward(&self, forward: ForwardMap) -> Self {
        Self { forward, ..self.clone() }
    }

    pub fn param_vector(&self, phi: &[f64]) -> ParamVector {
        match self.noise {
            NoiseModel::Fixed(sigma) => ParamVector::new(phi.to_vec(), sigma),
            NoiseModel::Inferred => {
                let (theta, sigma) = phi.split_at(phi.len() - 1);
                ParamVector::new(theta.to_vec(), sigma[0])
            }
        }
    }

    pub fn log_likelihood(&self, phi: &[f64]) -> f64 {
        log_likelihood(&self.dataset, &self.param_vector(phi), &self.forward)
    }
}

impl LogDensity for Posterior {
    fn dim(&self) -> usize {
        self.prior.dim()
    }

    fn log_density(&self, phi: &[f64]) -> f64 {
        log_posterior_unnorm(&self.dataset, &self.prior, &self.param_vector(phi), &self.forward)
    }
}
