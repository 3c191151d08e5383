//! Random-walk Metropolis–Hastings with Robbins–Monro scale adaptation during
//! burn-in, recording the energy `U = −log P(y|φ) − log P(φ)` of every kept
//! draw.

use crate::bayes::LogDensity;
use crate::stats;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::time::Instant;
use thiserror::Error;

/// Acceptance rate below which a chain is flagged as stuck.
pub const STUCK_ACCEPT_RATE: f64 = 0.01;

#[derive(Error, Debug)]
pub enum McmcError {
    #[error("log posterior at the initial point is not finite ({0})")]
    Initialization(f64),
    #[error("initial point has dimension {got}, target expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("n_iter ({n_iter}) must exceed burn_in ({burn_in})")]
    NoDraws { n_iter: usize, burn_in: usize },
    #[error("invalid proposal: {0}")]
    InvalidProposal(String),
    #[error("chain file: {0}")]
    Csv(#[from] csv::Error),
    #[error("chain file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ChainWarning {
    /// Post burn-in acceptance rate below [`STUCK_ACCEPT_RATE`].
    StuckChain { accept_rate: f64 },
}

/// Gaussian random-walk proposal settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalConfig {
    pub step_scales: Vec<f64>,
    #[serde(default = "default_true")]
    pub adapt: bool,
    #[serde(default = "default_adapt_window")]
    pub adapt_window: usize,
    #[serde(default = "default_target_accept")]
    pub target_accept: f64,
}

fn default_true() -> bool {
    true
}
fn default_adapt_window() -> usize {
    100
}
fn default_target_accept() -> f64 {
    0.30
}

impl ProposalConfig {
    pub fn new(step_scales: Vec<f64>) -> Self {
        Self {
            step_scales,
            adapt: true,
            adapt_window: default_adapt_window(),
            target_accept: default_target_accept(),
        }
    }

    pub fn fixed(step_scales: Vec<f64>) -> Self {
        Self { adapt: false, ..Self::new(step_scales) }
    }

    fn validate(&self, dim: usize) -> Result<(), McmcError> {
        if self.step_scales.len() != dim {
            return Err(McmcError::InvalidProposal(format!(
                "{} step scales for a {dim}-dimensional target",
                self.step_scales.len()
            )));
        }
        if self.step_scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(McmcError::InvalidProposal("step scales must be positive".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(McmcError::InvalidProposal("target_accept must lie in (0, 1)".into()));
        }
        if self.adapt_window == 0 {
            return Err(McmcError::InvalidProposal("adapt_window must be positive".into()));
        }
        Ok(())
    }
}

/// Post burn-in output of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chain {
    pub draws: Vec<Vec<f64>>,
    pub energies: Vec<f64>,
    pub accept_rate: f64,
    pub wall_clock_seconds: f64,
    pub seed: u64,
    /// Proposal scales in effect after burn-in.
    pub final_scales: Vec<f64>,
    pub warnings: Vec<ChainWarning>,
}

impl Chain {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.draws.first().map_or(0, Vec::len)
    }

    pub fn coordinate(&self, j: usize) -> Vec<f64> {
        self.draws.iter().map(|d| d[j]).collect()
    }

    /// Writes `draw,theta0,...,energy` rows. Floats use the shortest
    /// round-trip representation, so reading back is lossless.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), McmcError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["draw".to_string()];
        header.extend((0..self.dim()).map(|j| format!("theta{j}")));
        header.push("energy".into());
        w.write_record(&header)?;
        for (i, (d, u)) in self.draws.iter().zip(&self.energies).enumerate() {
            let mut row = vec![i.to_string()];
            row.extend(d.iter().map(|v| v.to_string()));
            row.push(u.to_string());
            w.write_record(&row)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Reads draws and energies written by [`Chain::write_csv`]. Run metadata
    /// (timing, acceptance) is not stored in the file and comes back zeroed.
    pub fn read_csv<R: Read>(reader: R) -> Result<Chain, McmcError> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        if headers.len() < 3 || &headers[0] != "draw" || &headers[headers.len() - 1] != "energy" {
            return Err(McmcError::Format("expected header draw,theta...,energy".into()));
        }
        let dim = headers.len() - 2;
        let mut draws = Vec::new();
        let mut energies = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| McmcError::Format(format!("row {}: {e}", line + 2)))
            };
            let draw = (1..=dim).map(|j| parse(&rec[j])).collect::<Result<Vec<_>, _>>()?;
            energies.push(parse(&rec[dim + 1])?);
            draws.push(draw);
        }
        Ok(Chain {
            draws,
            energies,
            accept_rate: 0.0,
            wall_clock_seconds: 0.0,
            seed: 0,
            final_scales: Vec::new(),
            warnings: Vec::new(),
        })
    }
}

/// Runs `n_iter` iterations, the first `burn_in` of which are discarded and
/// used for proposal adaptation. Each iteration evaluates the target exactly
/// once; the current point's log density is cached.
pub fn mh_run<T: LogDensity + ?Sized>(
    target: &T,
    init: &[f64],
    proposal: &ProposalConfig,
    n_iter: usize,
    burn_in: usize,
    seed: u64,
) -> Result<Chain, McmcError> {
    let dim = target.dim();
    if init.len() != dim {
        return Err(McmcError::DimensionMismatch { expected: dim, got: init.len() });
    }
    if n_iter <= burn_in {
        return Err(McmcError::NoDraws { n_iter, burn_in });
    }
    proposal.validate(dim)?;

    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut current = init.to_vec();
    let mut current_lp = target.log_density(&current);
    if !current_lp.is_finite() {
        return Err(McmcError::Initialization(current_lp));
    }

    let mut scales = proposal.step_scales.clone();
    let mut log_gain = 0.0f64;
    let mut window: Vec<Vec<f64>> = Vec::with_capacity(proposal.adapt_window);
    let n_keep = n_iter - burn_in;
    let mut draws = Vec::with_capacity(n_keep);
    let mut energies = Vec::with_capacity(n_keep);
    let mut accepted = 0usize;
    let mut candidate = vec![0.0; dim];

    for iter in 0..n_iter {
        let gain = log_gain.exp();
        for j in 0..dim {
            let z: f64 = rng.sample(StandardNormal);
            candidate[j] = current[j] + gain * scales[j] * z;
        }
        let cand_lp = target.log_density(&candidate);
        let log_ratio = if cand_lp.is_nan() { f64::NEG_INFINITY } else { cand_lp - current_lp };
        let u: f64 = rng.random();
        let accept = log_ratio >= 0.0 || u < log_ratio.exp();
        if accept {
            current.copy_from_slice(&candidate);
            current_lp = cand_lp;
        }

        if iter < burn_in {
            if proposal.adapt {
                // Robbins–Monro on the log of a global scale multiplier.
                let alpha = log_ratio.min(0.0).exp();
                let step = (1.0 + iter as f64 / proposal.adapt_window as f64).powf(-0.6);
                log_gain += step * (alpha - proposal.target_accept);
                log_gain = log_gain.clamp(-30.0, 30.0);
                window.push(current.clone());
                if window.len() == proposal.adapt_window {
                    if dim > 1 {
                        rescale_from_window(&mut scales, &mut log_gain, &window);
                    }
                    window.clear();
                }
            }
        } else {
            if accept {
                accepted += 1;
            }
            draws.push(current.clone());
            energies.push(-current_lp);
        }
    }

    let final_scales: Vec<f64> = scales.iter().map(|s| s * log_gain.exp()).collect();
    let accept_rate = accepted as f64 / n_keep as f64;
    let mut warnings = Vec::new();
    if accept_rate < STUCK_ACCEPT_RATE {
        log::warn!("chain (seed {seed}) accepted only {:.2}% of proposals", 100.0 * accept_rate);
        warnings.push(ChainWarning::StuckChain { accept_rate });
    }
    Ok(Chain {
        draws,
        energies,
        accept_rate,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        seed,
        final_scales,
        warnings,
    })
}

/// Matches per-coordinate scales to the spread seen in the last window,
/// folding the current global multiplier into the new scales.
fn rescale_from_window(scales: &mut [f64], log_gain: &mut f64, window: &[Vec<f64>]) {
    let dim = scales.len();
    let gain = log_gain.exp();
    let sds: Vec<f64> = (0..dim)
        .map(|j| {
            let col: Vec<f64> = window.iter().map(|w| w[j]).collect();
            stats::variance(&col).sqrt()
        })
        .collect();
    if sds.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return;
    }
    let current: Vec<f64> = scales.iter().map(|s| s * gain).collect();
    // keep the geometric mean of the effective scales, reshape by the window sds
    let log_mean_cur = current.iter().map(|s| s.ln()).sum::<f64>() / dim as f64;
    let log_mean_sd = sds.iter().map(|s| s.ln()).sum::<f64>() / dim as f64;
    for j in 0..dim {
        scales[j] = (sds[j].ln() - log_mean_sd + log_mean_cur).exp();
    }
    *log_gain = 0.0;
}

/// Initial-positive-sequence effective sample size of one coordinate.
pub fn effective_sample_size(chain: &Chain, coordinate: usize) -> f64 {
    ess(&chain.coordinate(coordinate))
}

/// Geyer's initial positive sequence estimator on a scalar series. Returns a
/// value in `(0, n]`; a constant series has ESS 1.
pub fn ess(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return n as f64;
    }
    let m = stats::mean(xs);
    let centered: Vec<f64> = xs.iter().map(|x| x - m).collect();
    let c0 = centered.iter().map(|x| x * x).sum::<f64>() / n as f64;
    if !(c0 > 0.0) {
        return 1.0;
    }
    let autocov = |lag: usize| -> f64 {
        centered[..n - lag]
            .iter()
            .zip(&centered[lag..])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / n as f64
    };
    let mut sum_pairs = 0.0;
    let mut prev_pair = f64::INFINITY;
    let mut k = 0;
    while 2 * k + 1 < n {
        let gamma0 = if k == 0 { c0 } else { autocov(2 * k) };
        let pair = (gamma0 + autocov(2 * k + 1)) / c0;
        if pair <= 0.0 {
            break;
        }
        // enforce monotone decrease of the pair sums
        let pair = pair.min(prev_pair);
        sum_pairs += pair;
        prev_pair = pair;
        k += 1;
    }
    let tau = (2.0 * sum_pairs - 1.0).max(1.0 / n as f64);
    (n as f64 / tau).min(n as f64)
}
