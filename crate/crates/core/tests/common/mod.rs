//! Fixtures shared by the integration test targets.
#![allow(dead_code)]

use odebayes::bayes::{Dataset, ForwardMap, NoiseModel, Posterior, Prior, PriorComponent};
use odebayes::models::ConstantMean;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Gaussian-mean model `y_i = θ + ε_i`, `θ ~ N(mu0, tau²)`, with its
/// closed-form log evidence and posterior mean and sd.
pub struct Conjugate {
    pub posterior: Posterior,
    pub log_evidence: f64,
    pub post_mean: f64,
    pub post_sd: f64,
}

pub fn conjugate(n: usize, sigma: f64, mu0: f64, tau: f64, seed: u64) -> Conjugate {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<f64> = (0..n).map(|_| 1.7 + sigma * rng.sample::<f64, _>(StandardNormal)).collect();
    let times: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let log_evidence = conjugate_log_evidence(&values, sigma, mu0, tau);
    let prec = 1.0 / (tau * tau) + n as f64 / (sigma * sigma);
    let post_mean = (mu0 / (tau * tau) + values.iter().sum::<f64>() / (sigma * sigma)) / prec;
    let data = Dataset::new(times, values, Some(sigma)).unwrap();
    let prior = Prior::new(vec![PriorComponent::Normal { mean: mu0, sd: tau }]);
    let posterior = Posterior::new(data, prior, ForwardMap::exact(ConstantMean), NoiseModel::Fixed(sigma));
    Conjugate { posterior, log_evidence, post_mean, post_sd: prec.recip().sqrt() }
}

/// Log density of `y ~ N(mu0·1, σ²I + τ²11ᵀ)`, using the matrix
/// determinant lemma and Sherman–Morrison for the rank-one update.
pub fn conjugate_log_evidence(y: &[f64], sigma: f64, mu0: f64, tau: f64) -> f64 {
    let n = y.len() as f64;
    let (s2, t2) = (sigma * sigma, tau * tau);
    let r: Vec<f64> = y.iter().map(|v| v - mu0).collect();
    let sum_sq: f64 = r.iter().map(|x| x * x).sum();
    let sum: f64 = r.iter().sum();
    let quad = (sum_sq - t2 * sum * sum / (s2 + n * t2)) / s2;
    let log_det = n * s2.ln() + (1.0 + n * t2 / s2).ln();
    -0.5 * (n * LN_2PI + log_det + quad)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2))
}

/// Logistic solution written out independently of the library:
/// `K X0 e^{λt} / (K + X0 (e^{λt} − 1))`.
pub fn logistic_oracle(t: f64, lambda: f64, capacity: f64, x0: f64) -> f64 {
    let e = (lambda * t).exp();
    capacity * x0 * e / (capacity + x0 * (e - 1.0))
}
