//! Marginal-likelihood estimation from MCMC output (Gelfand–Dey with a
//! kernel-density weighting function) and deterministic Simpson quadrature
//! for one- and two-dimensional parameter spaces.

use crate::bayes::{LogDensity, Posterior};
use crate::mcmc::Chain;
use crate::ode::{Method, SolverConfig};
use crate::stats;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Minimum number of draws for a KDE fit.
pub const MIN_KDE_DRAWS: usize = 30;
/// Variance added to each bandwidth when a coordinate has zero spread.
pub const DEGENERATE_JITTER: f64 = 1e-10;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum EvidenceError {
    #[error("need at least {min} draws, got {got}")]
    TooFewDraws { min: usize, got: usize },
    #[error("{draws} draws but {energies} energies")]
    Misaligned { draws: usize, energies: usize },
    #[error("non-finite energy at draw {0}")]
    NonFiniteEnergy(usize),
    #[error("weighting density has dimension {alpha}, draws have {draws}")]
    DimensionMismatch { alpha: usize, draws: usize },
    #[error("weighting density vanishes at every draw")]
    ZeroWeight,
    #[error("quadrature supports 1 or 2 dimensions, got {0}")]
    UnsupportedDimension(usize),
    #[error("integrand at the grid boundary of coordinate {coordinate} is {ratio:e} of its peak")]
    BoundsTooTight { coordinate: usize, ratio: f64 },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("integrand is zero or non-finite on the whole grid")]
    EmptyIntegrand,
    #[error("quadrature did not reach relative tolerance {tol:e} within {intervals} intervals")]
    NotConverged { tol: f64, intervals: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EvidenceWarning {
    /// A coordinate of the KDE sample had zero spread and was jittered.
    DegenerateSample,
    /// The largest 1% of importance terms carry more than half the weight.
    InfiniteVariance { top_share: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceMethod {
    GelfandDeyKde,
    HarmonicMean,
    Quadrature,
}

impl std::fmt::Display for EvidenceMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvidenceMethod::GelfandDeyKde => "gelfand_dey_kde",
            EvidenceMethod::HarmonicMean => "harmonic_mean",
            EvidenceMethod::Quadrature => "quadrature",
        })
    }
}

/// Estimated `log P(y)`.
///
/// For Monte Carlo methods `mc_standard_error` is the delta-method standard
/// error on the log scale. For quadrature it is the relative change of the
/// last refinement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceEstimate {
    pub log_marginal: f64,
    pub mc_standard_error: f64,
    pub n_used: usize,
    pub method: EvidenceMethod,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<EvidenceWarning>,
}

impl EvidenceEstimate {
    pub fn record(&self, solver: Option<&SolverConfig>) -> EvidenceRecord {
        EvidenceRecord {
            log_marginal: self.log_marginal,
            se: self.mc_standard_error,
            method: self.method,
            h: solver.map(|s| s.h),
            solver: solver.map(|s| s.method),
        }
    }
}

/// Flat JSON form of an estimate tagged with the solver that produced it.
/// `h` and `solver` are null for the exact forward map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceRecord {
    pub log_marginal: f64,
    pub se: f64,
    pub method: EvidenceMethod,
    pub h: Option<f64>,
    pub solver: Option<Method>,
}

/// Settings of the weighting density fitted to posterior draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KdeConfig {
    /// Number of kernel centers drawn from the chain.
    pub subsample: usize,
    /// Multiplier on the Silverman bandwidth; below 1 thins the tails.
    pub shrink: f64,
    /// Centers are restricted to draws whose every coordinate lies between
    /// these marginal quantiles.
    pub trim_lower: f64,
    pub trim_upper: f64,
    pub seed: u64,
    /// Fit one density per chain half and weight each half's draws with the
    /// density fitted on the other half. A density fitted to the very draws
    /// it weights is inflated around them, which biases the marginal low.
    pub cross_fit: bool,
}

impl Default for KdeConfig {
    fn default() -> Self {
        Self { subsample: 500, shrink: 0.5, trim_lower: 0.05, trim_upper: 0.95, seed: 0, cross_fit: true }
    }
}

/// Equal-weight mixture of axis-aligned Gaussian kernels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeDensity {
    pub centers: Vec<Vec<f64>>,
    /// Kernel standard deviation per coordinate (diagonal bandwidth matrix).
    pub bandwidths: Vec<f64>,
    pub degenerate: bool,
    log_norm: f64,
}

impl KdeDensity {
    pub fn new(centers: Vec<Vec<f64>>, bandwidths: Vec<f64>) -> Self {
        let d = bandwidths.len() as f64;
        let log_norm = -(centers.len() as f64).ln()
            - bandwidths.iter().map(|b| b.ln()).sum::<f64>()
            - 0.5 * d * LN_2PI;
        Self { centers, bandwidths, degenerate: false, log_norm }
    }
}

impl LogDensity for KdeDensity {
    fn dim(&self) -> usize {
        self.bandwidths.len()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        // streaming log-sum-exp over kernels
        let mut max = f64::NEG_INFINITY;
        let mut acc = 0.0;
        for c in &self.centers {
            let q: f64 = x
                .iter()
                .zip(c)
                .zip(&self.bandwidths)
                .map(|((xi, ci), bw)| {
                    let z = (xi - ci) / bw;
                    z * z
                })
                .sum();
            let term = -0.5 * q;
            if term > max {
                acc = acc * (max - term).exp() + 1.0;
                max = term;
            } else {
                acc += (term - max).exp();
            }
        }
        if max == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        max + acc.ln() + self.log_norm
    }
}

/// Fits the weighting density: centers are a seeded subsample of the trimmed
/// draws, bandwidths are Silverman's rule per coordinate times `shrink`.
pub fn kde_fit(draws: &[Vec<f64>], config: &KdeConfig) -> Result<KdeDensity, EvidenceError> {
    if draws.len() < MIN_KDE_DRAWS {
        return Err(EvidenceError::TooFewDraws { min: MIN_KDE_DRAWS, got: draws.len() });
    }
    let d = draws[0].len();
    let columns: Vec<Vec<f64>> = (0..d).map(|j| draws.iter().map(|x| x[j]).collect()).collect();
    let limits: Vec<(f64, f64)> = columns
        .iter()
        .map(|c| (stats::quantile(c, config.trim_lower), stats::quantile(c, config.trim_upper)))
        .collect();
    let trimmed: Vec<&Vec<f64>> = draws
        .iter()
        .filter(|x| x.iter().zip(&limits).all(|(v, (lo, hi))| v >= lo && v <= hi))
        .collect();
    let pool: Vec<&Vec<f64>> = if trimmed.len() >= MIN_KDE_DRAWS { trimmed } else { draws.iter().collect() };

    let m = config.subsample.max(1).min(pool.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut idx = rand::seq::index::sample(&mut rng, pool.len(), m).into_vec();
    idx.sort_unstable();
    let centers: Vec<Vec<f64>> = idx.iter().map(|&i| pool[i].clone()).collect();

    let silverman = (4.0 / ((d as f64 + 2.0) * m as f64)).powf(1.0 / (d as f64 + 4.0));
    let mut degenerate = false;
    let bandwidths: Vec<f64> = columns
        .iter()
        .map(|c| {
            let bw = stats::variance(c).sqrt() * silverman * config.shrink;
            if bw.is_finite() && bw > 0.0 {
                bw
            } else {
                degenerate = true;
                (bw.max(0.0).powi(2) + DEGENERATE_JITTER).sqrt()
            }
        })
        .collect();
    if degenerate {
        log::warn!("KDE sample has a coordinate with zero spread; jittering bandwidth");
    }
    let mut kde = KdeDensity::new(centers, bandwidths);
    kde.degenerate = degenerate;
    Ok(kde)
}

/// Gelfand–Dey estimate `P(y) ≈ [L⁻¹ Σ exp(U_ℓ + log α(φ_ℓ))]⁻¹`, evaluated
/// in log space. `alpha` must be a normalized density.
///
/// The weighting density is evaluated in parallel; values are collected in
/// draw order and reduced sequentially, so results do not depend on the
/// thread count.
pub fn gelfand_dey<A: LogDensity + ?Sized>(
    energies: &[f64],
    alpha: &A,
    draws: &[Vec<f64>],
    method: EvidenceMethod,
) -> Result<EvidenceEstimate, EvidenceError> {
    if draws.len() != energies.len() {
        return Err(EvidenceError::Misaligned { draws: draws.len(), energies: energies.len() });
    }
    if draws.len() < 2 {
        return Err(EvidenceError::TooFewDraws { min: 2, got: draws.len() });
    }
    if let Some(i) = energies.iter().position(|u| !u.is_finite()) {
        return Err(EvidenceError::NonFiniteEnergy(i));
    }
    if draws[0].len() != alpha.dim() {
        return Err(EvidenceError::DimensionMismatch { alpha: alpha.dim(), draws: draws[0].len() });
    }

    let log_alpha: Vec<f64> = draws.par_iter().map(|x| alpha.log_density(x)).collect();
    estimate_from_log_alpha(energies, &log_alpha, method)
}

fn estimate_from_log_alpha(
    energies: &[f64],
    log_alpha: &[f64],
    method: EvidenceMethod,
) -> Result<EvidenceEstimate, EvidenceError> {
    let terms: Vec<f64> = energies
        .iter()
        .zip(log_alpha)
        .map(|(u, la)| if la.is_nan() { f64::NEG_INFINITY } else { u + la })
        .collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(EvidenceError::ZeroWeight);
    }
    let n = terms.len();
    let log_marginal = (n as f64).ln() - stats::logsumexp(&terms);

    let scaled: Vec<f64> = terms.iter().map(|t| (t - max).exp()).collect();
    let mean = stats::mean(&scaled);
    let n_batches = ((n as f64).sqrt() as usize).clamp(2, 50);
    let se = stats::batch_means_se(&scaled, n_batches) / mean;

    let mut warnings = Vec::new();
    let share = top_share(&scaled, 0.01);
    if share > 0.5 {
        log::warn!("top 1% of importance terms carry {:.0}% of the weight", 100.0 * share);
        warnings.push(EvidenceWarning::InfiniteVariance { top_share: share });
    }
    Ok(EvidenceEstimate { log_marginal, mc_standard_error: se, n_used: n, method, warnings })
}

/// Fraction of the total carried by the largest `frac` of the (nonnegative)
/// terms, at least one term.
fn top_share(terms: &[f64], frac: f64) -> f64 {
    let mut sorted = terms.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = ((terms.len() as f64 * frac).ceil() as usize).max(1);
    let total: f64 = sorted.iter().sum();
    sorted[..k].iter().sum::<f64>() / total
}

/// Gelfand–Dey with a KDE fitted to the chain itself (cross-fitted on the
/// two chain halves unless disabled in `config`).
pub fn gelfand_dey_kde(chain: &Chain, config: &KdeConfig) -> Result<EvidenceEstimate, EvidenceError> {
    let n = chain.len();
    if chain.energies.len() != n {
        return Err(EvidenceError::Misaligned { draws: n, energies: chain.energies.len() });
    }
    if !config.cross_fit || n < 2 * MIN_KDE_DRAWS {
        let kde = kde_fit(&chain.draws, config)?;
        let mut est = gelfand_dey(&chain.energies, &kde, &chain.draws, EvidenceMethod::GelfandDeyKde)?;
        if kde.degenerate {
            est.warnings.insert(0, EvidenceWarning::DegenerateSample);
        }
        return Ok(est);
    }
    let half = n / 2;
    let (first, second) = chain.draws.split_at(half);
    let kde_first = kde_fit(first, config)?;
    let kde_second = kde_fit(second, &KdeConfig { seed: config.seed.wrapping_add(1), ..config.clone() })?;
    if first[0].len() != kde_first.dim() {
        return Err(EvidenceError::DimensionMismatch { alpha: kde_first.dim(), draws: first[0].len() });
    }
    if let Some(i) = chain.energies.iter().position(|u| !u.is_finite()) {
        return Err(EvidenceError::NonFiniteEnergy(i));
    }
    let log_alpha: Vec<f64> = chain
        .draws
        .par_iter()
        .enumerate()
        .map(|(i, x)| if i < half { kde_second.log_density(x) } else { kde_first.log_density(x) })
        .collect();
    let mut est = estimate_from_log_alpha(&chain.energies, &log_alpha, EvidenceMethod::GelfandDeyKde)?;
    if kde_first.degenerate || kde_second.degenerate {
        est.warnings.insert(0, EvidenceWarning::DegenerateSample);
    }
    Ok(est)
}

/// Harmonic-mean estimator: Gelfand–Dey with the prior as weighting density.
pub fn harmonic_mean<P: LogDensity + ?Sized>(chain: &Chain, prior: &P) -> Result<EvidenceEstimate, EvidenceError> {
    gelfand_dey(&chain.energies, prior, &chain.draws, EvidenceMethod::HarmonicMean)
}

/// Grid settings for composite Simpson quadrature. The interval count is
/// per coordinate and doubles until the integral changes by less than
/// `rel_tol`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    /// Integration box; located automatically around the mode when absent
    /// (one-dimensional problems only).
    pub bounds: Option<Vec<(f64, f64)>>,
    pub initial_intervals: usize,
    pub max_intervals: usize,
    pub rel_tol: f64,
    /// Largest admissible integrand value on a boundary interior to the
    /// support, relative to the peak.
    pub boundary_tol: f64,
    /// Half-width of the automatically located box in posterior sds.
    pub width_sds: f64,
    pub scan_points: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            bounds: None,
            initial_intervals: 64,
            max_intervals: 1 << 16,
            rel_tol: 1e-6,
            boundary_tol: 1e-12,
            width_sds: 12.0,
            scan_points: 2000,
        }
    }
}

impl GridSpec {
    pub fn with_bounds(bounds: Vec<(f64, f64)>) -> Self {
        Self { bounds: Some(bounds), ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureResult {
    pub log_integral: f64,
    pub bounds: Vec<(f64, f64)>,
    pub intervals: usize,
    pub rel_change: f64,
    pub evaluations: usize,
}

fn eval_grid<D: LogDensity + ?Sized>(density: &D, points: &[Vec<f64>]) -> Vec<f64> {
    points
        .par_iter()
        .map(|x| {
            let v = density.log_density(x);
            if v.is_nan() {
                f64::NEG_INFINITY
            } else {
                v
            }
        })
        .collect()
}

fn simpson_weight(i: usize, n: usize) -> f64 {
    if i == 0 || i == n {
        1.0
    } else if i % 2 == 1 {
        4.0
    } else {
        2.0
    }
}

/// Composite Simpson rule on `n + 1` equally spaced log-values over
/// `[a, b]`, returning the log of the integral (`n` even).
pub fn simpson_log(log_values: &[f64], a: f64, b: f64) -> f64 {
    let n = log_values.len() - 1;
    let max = log_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = log_values
        .iter()
        .enumerate()
        .map(|(i, v)| simpson_weight(i, n) * (v - max).exp())
        .sum();
    max + (sum * (b - a) / (3.0 * n as f64)).ln()
}

/// Composite Simpson rule on plain values.
pub fn simpson(values: &[f64], a: f64, b: f64) -> f64 {
    let n = values.len() - 1;
    let sum: f64 = values.iter().enumerate().map(|(i, v)| simpson_weight(i, n) * v).sum();
    sum * (b - a) / (3.0 * n as f64)
}

/// `n + 1` equally spaced nodes on `[a, b]`.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| a + (b - a) * i as f64 / n as f64).collect()
}

fn simpson_log_2d(lv: &[f64], n: usize, bounds: &[(f64, f64)]) -> f64 {
    let max = lv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let mut sum = 0.0;
    for i in 0..=n {
        for j in 0..=n {
            sum += simpson_weight(i, n) * simpson_weight(j, n) * (lv[i * (n + 1) + j] - max).exp();
        }
    }
    let dx = (bounds[0].1 - bounds[0].0) / (3.0 * n as f64);
    let dy = (bounds[1].1 - bounds[1].0) / (3.0 * n as f64);
    max + (sum * dx * dy).ln()
}

fn validate_box(bounds: &[(f64, f64)], support: &[(f64, f64)]) -> Result<(), EvidenceError> {
    if bounds.len() != support.len() {
        return Err(EvidenceError::InvalidGrid(format!(
            "{} bounds for {} coordinates",
            bounds.len(),
            support.len()
        )));
    }
    for &(a, b) in bounds {
        if !(a.is_finite() && b.is_finite() && a < b) {
            return Err(EvidenceError::InvalidGrid(format!("bad interval [{a}, {b}]")));
        }
    }
    Ok(())
}

/// Integrates `exp(density)` over `bounds` by Simpson's rule with interval
/// doubling. A boundary strictly inside `support` must carry an integrand
/// below `boundary_tol` times the peak.
pub fn quadrature_log_integral<D: LogDensity + ?Sized>(
    density: &D,
    bounds: &[(f64, f64)],
    support: &[(f64, f64)],
    spec: &GridSpec,
) -> Result<QuadratureResult, EvidenceError> {
    let d = bounds.len();
    if d == 0 || d > 2 {
        return Err(EvidenceError::UnsupportedDimension(d));
    }
    validate_box(bounds, support)?;
    let mut n = spec.initial_intervals.max(2);
    n += n % 2;
    let mut evaluations = 0;
    let mut prev: Option<f64> = None;

    if d == 1 {
        let (a, b) = bounds[0];
        let mut lv = eval_grid(density, &linspace(a, b, n).into_iter().map(|x| vec![x]).collect::<Vec<_>>());
        evaluations += lv.len();
        loop {
            let current = simpson_log(&lv, a, b);
            if current == f64::NEG_INFINITY || !current.is_finite() {
                return Err(EvidenceError::EmptyIntegrand);
            }
            if let Some(p) = prev {
                let change = (current - p).exp_m1().abs();
                if change < spec.rel_tol {
                    check_edges_1d(&lv, bounds[0], support[0], spec.boundary_tol)?;
                    return Ok(QuadratureResult {
                        log_integral: current,
                        bounds: bounds.to_vec(),
                        intervals: n,
                        rel_change: change,
                        evaluations,
                    });
                }
            }
            if 2 * n > spec.max_intervals {
                return Err(EvidenceError::NotConverged { tol: spec.rel_tol, intervals: n });
            }
            prev = Some(current);
            let mids: Vec<Vec<f64>> =
                (0..n).map(|i| vec![a + (b - a) * (2 * i + 1) as f64 / (2 * n) as f64]).collect();
            let mid_vals = eval_grid(density, &mids);
            evaluations += mid_vals.len();
            let mut refined = Vec::with_capacity(2 * n + 1);
            for i in 0..n {
                refined.push(lv[i]);
                refined.push(mid_vals[i]);
            }
            refined.push(lv[n]);
            lv = refined;
            n *= 2;
        }
    }

    loop {
        let xs = linspace(bounds[0].0, bounds[0].1, n);
        let ys = linspace(bounds[1].0, bounds[1].1, n);
        let points: Vec<Vec<f64>> = xs.iter().flat_map(|&x| ys.iter().map(move |&y| vec![x, y])).collect();
        let lv = eval_grid(density, &points);
        evaluations += lv.len();
        let current = simpson_log_2d(&lv, n, bounds);
        if current == f64::NEG_INFINITY || !current.is_finite() {
            return Err(EvidenceError::EmptyIntegrand);
        }
        if let Some(p) = prev {
            let change = (current - p).exp_m1().abs();
            if change < spec.rel_tol {
                check_edges_2d(&lv, n, bounds, support, spec.boundary_tol)?;
                return Ok(QuadratureResult {
                    log_integral: current,
                    bounds: bounds.to_vec(),
                    intervals: n,
                    rel_change: change,
                    evaluations,
                });
            }
        }
        if 2 * n > spec.max_intervals {
            return Err(EvidenceError::NotConverged { tol: spec.rel_tol, intervals: n });
        }
        prev = Some(current);
        n *= 2;
    }
}

fn edge_ratio(edge: f64, max: f64) -> f64 {
    (edge - max).exp()
}

fn check_edges_1d(lv: &[f64], bounds: (f64, f64), support: (f64, f64), tol: f64) -> Result<(), EvidenceError> {
    let max = lv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for (edge, interior) in [(lv[0], bounds.0 > support.0), (lv[lv.len() - 1], bounds.1 < support.1)] {
        let ratio = edge_ratio(edge, max);
        if interior && ratio >= tol {
            return Err(EvidenceError::BoundsTooTight { coordinate: 0, ratio });
        }
    }
    Ok(())
}

fn check_edges_2d(
    lv: &[f64],
    n: usize,
    bounds: &[(f64, f64)],
    support: &[(f64, f64)],
    tol: f64,
) -> Result<(), EvidenceError> {
    let max = lv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let at = |i: usize, j: usize| lv[i * (n + 1) + j];
    for k in 0..=n {
        let edges = [
            (0, at(0, k), bounds[0].0 > support[0].0),
            (0, at(n, k), bounds[0].1 < support[0].1),
            (1, at(k, 0), bounds[1].0 > support[1].0),
            (1, at(k, n), bounds[1].1 < support[1].1),
        ];
        for (coordinate, edge, interior) in edges {
            let ratio = edge_ratio(edge, max);
            if interior && ratio >= tol {
                return Err(EvidenceError::BoundsTooTight { coordinate, ratio });
            }
        }
    }
    Ok(())
}

/// Mode and local scale (inverse square root of the log-density curvature)
/// of a unimodal one-dimensional density: grid scan over `search`, then
/// golden-section refinement inside the best scan bracket.
pub fn mode_and_scale_1d<D: LogDensity + ?Sized>(
    density: &D,
    search: (f64, f64),
    support: (f64, f64),
    scan_points: usize,
) -> Result<(f64, f64), EvidenceError> {
    let f = |x: f64| log_density_1d(density, x);
    let (a, b) = search;
    let n = scan_points.max(3);
    let dx = (b - a) / n as f64;
    let xs: Vec<f64> = (0..n).map(|i| a + (i as f64 + 0.5) * dx).collect();
    let vals: Vec<f64> = xs.par_iter().map(|&x| f(x)).collect();
    let (best, &best_val) = vals
        .iter()
        .enumerate()
        .max_by(|x, y| x.1.total_cmp(y.1))
        .ok_or(EvidenceError::EmptyIntegrand)?;
    if best_val == f64::NEG_INFINITY {
        return Err(EvidenceError::EmptyIntegrand);
    }

    let (mut lo, mut hi) = ((xs[best] - dx).max(support.0), (xs[best] + dx).min(support.1));
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (hi - lo) <= 1e-14 * (1.0 + c.abs()) {
            break;
        }
        if fc >= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = f(d);
        }
    }
    let mode = 0.5 * (lo + hi);
    let f_mode = f(mode);

    // curvature at the mode, re-estimated at the implied scale
    let mut step = dx / 4.0;
    let mut scale = dx;
    for _ in 0..3 {
        let curv = -(f(mode + step) - 2.0 * f_mode + f(mode - step)) / (step * step);
        if curv.is_finite() && curv > 0.0 {
            scale = 1.0 / curv.sqrt();
            step = scale / 2.0;
        } else {
            step /= 4.0;
        }
    }
    Ok((mode, scale))
}

fn log_density_1d<D: LogDensity + ?Sized>(density: &D, x: f64) -> f64 {
    let v = density.log_density(&[x]);
    if v.is_nan() {
        f64::NEG_INFINITY
    } else {
        v
    }
}

/// Integration interval for a unimodal one-dimensional density: `width_sds`
/// local scales on each side of the mode, widened until the boundary check
/// passes.
pub fn locate_bounds_1d<D: LogDensity + ?Sized>(
    density: &D,
    search: (f64, f64),
    support: (f64, f64),
    spec: &GridSpec,
) -> Result<(f64, f64), EvidenceError> {
    let (mode, scale) = mode_and_scale_1d(density, search, support, spec.scan_points)?;
    let f_mode = log_density_1d(density, mode);
    let mut width = spec.width_sds * scale;
    for _ in 0..40 {
        let lower = (mode - width).max(support.0);
        let upper = (mode + width).min(support.1);
        let ok_low = lower <= support.0 || edge_ratio(log_density_1d(density, lower), f_mode) < spec.boundary_tol;
        let ok_high = upper >= support.1 || edge_ratio(log_density_1d(density, upper), f_mode) < spec.boundary_tol;
        if ok_low && ok_high && lower.is_finite() && upper.is_finite() {
            return Ok((lower, upper));
        }
        width *= 1.5;
    }
    Err(EvidenceError::BoundsTooTight { coordinate: 0, ratio: f64::NAN })
}

/// Support of the posterior's prior, one interval per coordinate.
pub fn prior_support(posterior: &Posterior) -> Vec<(f64, f64)> {
    posterior.prior.components.iter().map(|c| c.support()).collect()
}

/// Integration box for a posterior: explicit bounds from `spec`, or a
/// located interval in one dimension.
pub fn quadrature_bounds(posterior: &Posterior, spec: &GridSpec) -> Result<Vec<(f64, f64)>, EvidenceError> {
    if let Some(b) = &spec.bounds {
        return Ok(b.clone());
    }
    let d = posterior.dim();
    if d != 1 {
        return Err(EvidenceError::InvalidGrid(format!(
            "explicit bounds are required in {d} dimensions"
        )));
    }
    let prior = &posterior.prior.components[0];
    locate_bounds_1d(posterior, prior.bounds(), prior.support(), spec).map(|b| vec![b])
}

/// Deterministic evidence `∫ P(y|φ) P(φ) dφ` by Simpson quadrature.
pub fn quadrature_marginal(posterior: &Posterior, spec: &GridSpec) -> Result<EvidenceEstimate, EvidenceError> {
    let bounds = quadrature_bounds(posterior, spec)?;
    let q = quadrature_log_integral(posterior, &bounds, &prior_support(posterior), spec)?;
    Ok(EvidenceEstimate {
        log_marginal: q.log_integral,
        mc_standard_error: q.rel_change,
        n_used: q.evaluations,
        method: EvidenceMethod::Quadrature,
        warnings: Vec::new(),
    })
}
