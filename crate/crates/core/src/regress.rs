//! Evidence-versus-step-size regression `P^h(y) ≈ a + b·h^p`, Bayes factors
//! against the extrapolated exact-model evidence, step recommendation, and
//! quadrature-based posterior discrepancies.

use crate::bayes::{LogDensity, Posterior};
use crate::evidence::{
    linspace, prior_support, quadrature_bounds, simpson, EvidenceError, GridSpec,
};
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

/// Default indistinguishability threshold; the window is `[t, 1/t]`.
pub const JEFFREYS_THRESHOLD: f64 = 0.99;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum RegressError {
    #[error("need at least {min} points, got {got}")]
    TooFewPoints { min: usize, got: usize },
    #[error("step size {0} appears twice")]
    DuplicateStep(f64),
    #[error("points mix solver orders {0} and {1}")]
    MixedOrders(u32, u32),
    #[error("regressor spread h_max^p / h_min^p = {0} is below 2")]
    IllConditionedFit(f64),
    #[error("weights concentrate on a single point ({0} effective); the marginals are far from the h^p regime")]
    DegenerateWeights(f64),
    #[error("fitted intercept {0} is not positive")]
    NonPositiveIntercept(f64),
    #[error("no step size has a Bayes factor inside [{threshold}, 1/{threshold}]")]
    NoAdmissibleStep { threshold: f64 },
    #[error("invalid point: {0}")]
    InvalidPoint(String),
    #[error("posterior discrepancy: {0}")]
    Quadrature(#[from] EvidenceError),
    #[error("posteriors have different dimensions ({0} and {1})")]
    DimensionMismatch(usize, usize),
    #[error("csv: {0}")]
    Csv(String),
}

/// One evidence estimate at step size `h` for a solver of order `order`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvidencePoint {
    pub h: f64,
    pub log_marginal: f64,
    /// Standard error of `log_marginal`.
    pub se: f64,
    pub order: u32,
}

/// Weighted least-squares fit of the marginal on `h^p`.
///
/// Marginals are reconstructed on the linear scale relative to
/// `exp(log_shift)` (the largest point), so `fitted_a` and `fitted_b` are in
/// units of that shift; `log_a` is the absolute log intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceCurve {
    pub points: Vec<EvidencePoint>,
    pub order: u32,
    pub log_shift: f64,
    pub fitted_a: f64,
    pub fitted_b: f64,
    /// Log of the extrapolated exact-model marginal.
    pub log_a: f64,
    /// Standard error of `log_a`.
    pub log_a_se: f64,
    /// `−b/a`, so that `P^h ≈ P(1 − B h^p)`.
    pub b_y: f64,
    pub r_squared: f64,
    pub weighted: bool,
}

impl EvidenceCurve {
    /// Fitted log marginal at step `h`; `None` where the fit is not positive.
    pub fn log_predict(&self, h: f64) -> Option<f64> {
        let v = self.fitted_a + self.fitted_b * h.powi(self.order as i32);
        (v > 0.0).then(|| self.log_shift + v.ln())
    }
}

/// The `k` smallest step sizes, in decreasing-h order.
pub fn select_smallest(points: &[EvidencePoint], k: usize) -> Vec<EvidencePoint> {
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.h.total_cmp(&b.h));
    sorted.truncate(k);
    sorted.reverse();
    sorted
}

/// Fits `m_k = a + b·h_k^p` with weights `1/se_k²` on the linear scale. Falls
/// back to ordinary least squares when some standard error is not positive.
pub fn fit_curve(points: &[EvidencePoint], p: u32) -> Result<EvidenceCurve, RegressError> {
    if points.len() < 3 {
        return Err(RegressError::TooFewPoints { min: 3, got: points.len() });
    }
    for (i, pt) in points.iter().enumerate() {
        if !(pt.h > 0.0 && pt.h.is_finite() && pt.log_marginal.is_finite() && pt.se >= 0.0) {
            return Err(RegressError::InvalidPoint(format!("{pt:?}")));
        }
        if pt.order != p {
            return Err(RegressError::MixedOrders(p, pt.order));
        }
        if points[..i].iter().any(|q| q.h == pt.h) {
            return Err(RegressError::DuplicateStep(pt.h));
        }
    }
    let xs: Vec<f64> = points.iter().map(|pt| pt.h.powi(p as i32)).collect();
    let (xmin, xmax) = xs.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let spread = xmax / xmin;
    if spread < 2.0 {
        return Err(RegressError::IllConditionedFit(spread));
    }

    let log_shift = points.iter().map(|pt| pt.log_marginal).fold(f64::NEG_INFINITY, f64::max);
    let ys: Vec<f64> = points.iter().map(|pt| (pt.log_marginal - log_shift).exp()).collect();
    let weighted = points.iter().all(|pt| pt.se > 0.0);
    // weights 1/(se·y)² are formed in log space and rescaled by the largest,
    // since y can span hundreds of orders of magnitude
    let log_ws: Vec<f64> = if weighted {
        points.iter().map(|pt| -2.0 * (pt.se.ln() + pt.log_marginal - log_shift)).collect()
    } else {
        vec![0.0; points.len()]
    };
    let log_w_scale = log_ws.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ws: Vec<f64> = log_ws.iter().map(|lw| (lw - log_w_scale).exp()).collect();

    let w_sum: f64 = ws.iter().sum();
    let effective_points = w_sum * w_sum / ws.iter().map(|w| w * w).sum::<f64>();
    // a single point carrying all the weight leaves the slope undetermined
    if effective_points < 1.0 + 1e-6 {
        return Err(RegressError::DegenerateWeights(effective_points));
    }
    let x_bar = ws.iter().zip(&xs).map(|(w, x)| w * x).sum::<f64>() / w_sum;
    let y_bar = ws.iter().zip(&ys).map(|(w, y)| w * y).sum::<f64>() / w_sum;
    let sxx: f64 = ws.iter().zip(&xs).map(|(w, x)| w * (x - x_bar).powi(2)).sum();
    let sxy: f64 = ws.iter().zip(xs.iter().zip(&ys)).map(|(w, (x, y))| w * (x - x_bar) * (y - y_bar)).sum();
    let b = sxy / sxx;
    let a = y_bar - b * x_bar;
    if !(a > 0.0) {
        return Err(RegressError::NonPositiveIntercept(a));
    }

    let ss_res: f64 = ws.iter().zip(xs.iter().zip(&ys)).map(|(w, (x, y))| w * (y - a - b * x).powi(2)).sum();
    let ss_tot: f64 = ws.iter().zip(&ys).map(|(w, y)| w * (y - y_bar).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    // known-variance weights give absolute intercept variance; otherwise
    // scale by the residual variance
    let var_scale = if weighted { 1.0 } else { ss_res / (points.len() - 2) as f64 };
    let a_se = (var_scale * (1.0 / w_sum + x_bar * x_bar / sxx)).sqrt() * (-0.5 * log_w_scale).exp();

    Ok(EvidenceCurve {
        points: points.to_vec(),
        order: p,
        log_shift,
        fitted_a: a,
        fitted_b: b,
        log_a: log_shift + a.ln(),
        log_a_se: a_se / a,
        b_y: -b / a,
        r_squared,
        weighted,
    })
}

/// `P₁/P₂` from two log marginals, with equal prior model odds.
pub fn bayes_factor(log_marginal_1: f64, log_marginal_2: f64) -> f64 {
    (log_marginal_1 - log_marginal_2).exp()
}

/// Whether a Bayes factor lies in `[threshold, 1/threshold]`.
pub fn indistinguishable(bf: f64, threshold: f64) -> bool {
    bf >= threshold && bf <= 1.0 / threshold
}

/// One step size of a sweep with its measured cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub point: EvidencePoint,
    pub cpu_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BfRow {
    pub h: f64,
    pub log_marginal: f64,
    pub se: f64,
    /// `P^h / â`.
    pub bayes_factor: f64,
    pub indistinguishable: bool,
    pub cpu_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub h: f64,
    pub bayes_factor: f64,
    /// `cpu(h_min) / cpu(h)`.
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BfReport {
    pub log_a: f64,
    pub threshold: f64,
    /// Rows in decreasing-h order.
    pub rows: Vec<BfRow>,
    pub recommended: Option<Recommendation>,
}

impl BfReport {
    /// Flat CSV: `h,log_marginal,se,bayes_factor,indistinguishable,cpu_seconds`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), RegressError> {
        write_bf_rows(&self.rows, writer)
    }
}

pub fn write_bf_rows<W: Write>(rows: &[BfRow], writer: W) -> Result<(), RegressError> {
    let err = |e: csv::Error| RegressError::Csv(e.to_string());
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["h", "log_marginal", "se", "bayes_factor", "indistinguishable", "cpu_seconds"])
        .map_err(err)?;
    for r in rows {
        w.write_record([
            r.h.to_string(),
            r.log_marginal.to_string(),
            r.se.to_string(),
            r.bayes_factor.to_string(),
            r.indistinguishable.to_string(),
            r.cpu_seconds.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| RegressError::Csv(e.to_string()))
}

/// Bayes factor of every step against `log_a` and the flag per row.
pub fn bf_rows(points: &[SweepPoint], log_a: f64, threshold: f64) -> Vec<BfRow> {
    let mut rows: Vec<BfRow> = points
        .iter()
        .map(|sp| {
            let bf = bayes_factor(sp.point.log_marginal, log_a);
            BfRow {
                h: sp.point.h,
                log_marginal: sp.point.log_marginal,
                se: sp.point.se,
                bayes_factor: bf,
                indistinguishable: indistinguishable(bf, threshold),
                cpu_seconds: sp.cpu_seconds,
            }
        })
        .collect();
    rows.sort_by(|a, b| b.h.total_cmp(&a.h));
    rows
}

/// Largest step whose Bayes factor against the extrapolated evidence lies in
/// the indistinguishability window.
pub fn recommend_step(rows: &[BfRow], threshold: f64) -> Result<Recommendation, RegressError> {
    let finest = rows
        .iter()
        .min_by(|a, b| a.h.total_cmp(&b.h))
        .ok_or(RegressError::TooFewPoints { min: 1, got: 0 })?;
    let best = rows
        .iter()
        .filter(|r| r.indistinguishable)
        .max_by(|a, b| a.h.total_cmp(&b.h))
        .ok_or(RegressError::NoAdmissibleStep { threshold })?;
    Ok(Recommendation {
        h: best.h,
        bayes_factor: best.bayes_factor,
        speedup: finest.cpu_seconds / best.cpu_seconds,
    })
}

/// Builds the full report: fit on `fit_points` (already restricted to the
/// asymptotic regime), then Bayes factors and a recommendation over all
/// sweep points. A missing recommendation is reported as `None`.
pub fn bf_report(points: &[SweepPoint], fit_points: &[EvidencePoint], threshold: f64) -> Result<(EvidenceCurve, BfReport), RegressError> {
    let order = fit_points.first().map(|p| p.order).unwrap_or(0);
    let curve = fit_curve(fit_points, order)?;
    let rows = bf_rows(points, curve.log_a, threshold);
    let recommended = match recommend_step(&rows, threshold) {
        Ok(r) => Some(r),
        Err(RegressError::NoAdmissibleStep { .. }) => None,
        Err(e) => return Err(e),
    };
    let log_a = curve.log_a;
    Ok((curve, BfReport { log_a, threshold, rows, recommended }))
}

/// Posterior functional compared by [`posterior_discrepancy`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Statistic {
    /// Absolute difference of posterior means of one coordinate.
    Mean { coordinate: usize },
    /// Total-variation distance `½∫|p₁ − p₂|`.
    TotalVariation,
}

/// Normalized posterior density of a one-dimensional posterior on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    pub nodes: Vec<f64>,
    pub density: Vec<f64>,
}

/// Evaluates `posterior` on `n + 1` nodes over `[a, b]` and normalizes by
/// Simpson's rule.
pub fn grid_density(posterior: &Posterior, a: f64, b: f64, n: usize) -> Result<GridDensity, RegressError> {
    use rayon::prelude::*;
    let nodes = linspace(a, b, n);
    let lv: Vec<f64> = nodes
        .par_iter()
        .map(|&x| {
            let v = posterior.log_density(&[x]);
            if v.is_nan() {
                f64::NEG_INFINITY
            } else {
                v
            }
        })
        .collect();
    let max = lv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(EvidenceError::EmptyIntegrand.into());
    }
    let raw: Vec<f64> = lv.iter().map(|v| (v - max).exp()).collect();
    let z = simpson(&raw, a, b);
    Ok(GridDensity { nodes, density: raw.iter().map(|v| v / z).collect() })
}

fn statistic_on_grid(p1: &GridDensity, p2: &GridDensity, statistic: Statistic) -> f64 {
    let (a, b) = (p1.nodes[0], p1.nodes[p1.nodes.len() - 1]);
    match statistic {
        Statistic::Mean { .. } => {
            let m = |g: &GridDensity| {
                let v: Vec<f64> = g.nodes.iter().zip(&g.density).map(|(x, p)| x * p).collect();
                simpson(&v, a, b)
            };
            (m(p1) - m(p2)).abs()
        }
        Statistic::TotalVariation => {
            let diff: Vec<f64> = p1.density.iter().zip(&p2.density).map(|(x, y)| (x - y).abs()).collect();
            0.5 * simpson(&diff, a, b)
        }
    }
}

/// Discrepancy between two one-dimensional posteriors, integrated on a
/// shared grid covering both. The grid doubles until the statistic changes by
/// less than `spec.rel_tol` relative (or `1e-14` absolute).
pub fn posterior_discrepancy(
    post1: &Posterior,
    post2: &Posterior,
    statistic: Statistic,
    spec: &GridSpec,
) -> Result<f64, RegressError> {
    let (d1, d2) = (post1.dim(), post2.dim());
    if d1 != d2 {
        return Err(RegressError::DimensionMismatch(d1, d2));
    }
    if d1 != 1 {
        return Err(EvidenceError::UnsupportedDimension(d1).into());
    }
    if let Statistic::Mean { coordinate } = statistic {
        if coordinate != 0 {
            return Err(RegressError::InvalidPoint(format!("coordinate {coordinate} out of range")));
        }
    }
    let (a, b) = shared_bounds(post1, post2, spec)?;
    let mut n = spec.initial_intervals.max(2);
    n += n % 2;
    let mut prev = statistic_on_grid(&grid_density(post1, a, b, n)?, &grid_density(post2, a, b, n)?, statistic);
    loop {
        if 2 * n > spec.max_intervals {
            return Err(EvidenceError::NotConverged { tol: spec.rel_tol, intervals: n }.into());
        }
        n *= 2;
        let cur = statistic_on_grid(&grid_density(post1, a, b, n)?, &grid_density(post2, a, b, n)?, statistic);
        if (cur - prev).abs() <= spec.rel_tol * cur.abs() + 1e-14 {
            return Ok(cur);
        }
        prev = cur;
    }
}

/// Union of the integration intervals of two one-dimensional posteriors.
pub fn shared_bounds(post1: &Posterior, post2: &Posterior, spec: &GridSpec) -> Result<(f64, f64), RegressError> {
    let b1 = quadrature_bounds(post1, spec)?[0];
    let b2 = quadrature_bounds(post2, spec)?[0];
    let support = prior_support(post1)[0];
    Ok((b1.0.min(b2.0).max(support.0), b1.1.max(b2.1).min(support.1)))
}
