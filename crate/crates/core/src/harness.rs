//! Experiment orchestration: specifications, synthetic data, observation
//! files, step-size sweeps and report files.

use crate::bayes::{DataError, Dataset, ForwardMap, NoiseModel, Posterior, Prior};
use crate::evidence::{
    gelfand_dey_kde, mode_and_scale_1d, quadrature_marginal, EvidenceEstimate, EvidenceError, GridSpec,
    KdeConfig,
};
use crate::mcmc::{effective_sample_size, mh_run, Chain, McmcError, ProposalConfig};
use crate::models::{
    logistic_exact, GlucoseParams, GlucoseSystem, LogisticParams, LogisticSystem, ModelKind,
    DEFAULT_GLUCOSE_LOAD,
};
use crate::ode::{observe_at, Method, SolverConfig, SolverError};
use crate::regress::{
    bf_report, posterior_discrepancy, select_smallest, write_bf_rows, BfReport, EvidenceCurve, EvidencePoint,
    RegressError, Statistic, SweepPoint, JEFFREYS_THRESHOLD,
};
use crate::stats;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Step of the fine RK4 reference used to synthesize data for models
/// without a closed-form solution.
pub const REFERENCE_STEP: f64 = 1.0 / 4096.0;

#[derive(Error, Debug)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Mcmc(#[from] McmcError),
    #[error(transparent)]
    Evidence(#[from] EvidenceError),
    #[error(transparent)]
    Regress(#[from] RegressError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

/// Forward model and its true (or fixed) parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    /// `lambda` is the true growth rate used for synthetic data; `K` and
    /// `X0` are fixed during inference.
    Logistic(LogisticParams),
    Glucose(GlucoseSetup),
}

/// Glucose model setup. `params.theta0` is the true value for synthetic
/// data; `g0` is the true initial glucose. During inference `G(0)` is taken
/// from the first observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlucoseSetup {
    #[serde(flatten)]
    pub params: GlucoseParams,
    #[serde(default = "default_g0")]
    pub g0: f64,
    #[serde(default = "default_d0")]
    pub d0: f64,
}

fn default_g0() -> f64 {
    90.0
}
fn default_d0() -> f64 {
    DEFAULT_GLUCOSE_LOAD
}

impl Default for GlucoseSetup {
    fn default() -> Self {
        Self { params: GlucoseParams::default(), g0: default_g0(), d0: default_d0() }
    }
}

impl ModelSpec {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelSpec::Logistic(_) => ModelKind::Logistic,
            ModelSpec::Glucose(_) => ModelKind::Glucose,
        }
    }

    pub fn default_for(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Logistic => ModelSpec::Logistic(LogisticParams::default()),
            ModelKind::Glucose => ModelSpec::Glucose(GlucoseSetup::default()),
        }
    }

    pub fn has_exact_solution(&self) -> bool {
        matches!(self, ModelSpec::Logistic(_))
    }

    /// Noise-free observations at `times` under the true parameters.
    pub fn true_observations(&self, times: &[f64]) -> Result<Vec<f64>, HarnessError> {
        match self {
            ModelSpec::Logistic(p) => Ok(times.iter().map(|&t| logistic_exact(t, p)).collect()),
            ModelSpec::Glucose(g) => {
                let system = GlucoseSystem::new(g.params, g.g0, g.d0);
                let config = SolverConfig::new(Method::Rk4, REFERENCE_STEP)?;
                Ok(observe_at(&system, &[g.params.theta0], &config, times)?)
            }
        }
    }

    fn validate(&self) -> Result<(), HarnessError> {
        let ok = match self {
            ModelSpec::Logistic(p) => p.is_valid(),
            ModelSpec::Glucose(g) => g.params.is_valid() && g.g0 > 0.0 && g.d0 >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(HarnessError::Spec(format!("model parameters must be positive: {self:?}")))
        }
    }
}

/// Equally spaced observation times `start, ..., end` (`count` points).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub start: f64,
    pub end: f64,
    pub count: usize,
}

impl TimeGrid {
    pub fn times(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![self.start];
        }
        let step = (self.end - self.start) / (self.count - 1) as f64;
        (0..self.count).map(|i| self.start + step * i as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataSpec {
    Synthetic { seed: u64, times: TimeGrid },
    /// Observation file with a header and columns `t,y`; relative paths are
    /// resolved against the spec file's directory.
    Csv { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcSettings {
    /// Total iterations including burn-in.
    pub n_iter: usize,
    pub burn_in: usize,
    /// Base seed; each step size gets a seed derived from it and its index.
    pub seed: u64,
    /// Starting point; located at the posterior mode when absent (1-D only).
    pub init: Option<Vec<f64>>,
    /// Initial proposal scales; 2.4 local posterior sds when absent.
    pub step_scales: Option<Vec<f64>>,
    pub adapt: bool,
    pub adapt_window: usize,
    pub target_accept: f64,
}

impl Default for McmcSettings {
    fn default() -> Self {
        Self {
            n_iter: 12_500,
            burn_in: 2_500,
            seed: 1,
            init: None,
            step_scales: None,
            adapt: true,
            adapt_window: 100,
            target_accept: 0.30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuadratureSettings {
    /// Compute deterministic reference marginals and posterior discrepancies
    /// (one- and two-dimensional problems).
    pub enabled: bool,
    pub grid: GridSpec,
    /// Relative tolerance of grid refinement for posterior discrepancies.
    pub discrepancy_rel_tol: f64,
}

impl Default for QuadratureSettings {
    fn default() -> Self {
        Self { enabled: true, grid: GridSpec { rel_tol: 1e-8, ..GridSpec::default() }, discrepancy_rel_tol: 1e-3 }
    }
}

/// A complete, reproducible experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub model: ModelSpec,
    /// One component per inferred parameter.
    pub prior: Prior,
    /// Known observation noise standard deviation.
    pub sigma: f64,
    pub data: DataSpec,
    pub solver: Method,
    pub h_grid: Vec<f64>,
    /// Number of smallest step sizes used in the evidence regression.
    #[serde(default = "default_fit_points")]
    pub fit_points: usize,
    #[serde(default)]
    pub mcmc: McmcSettings,
    #[serde(default)]
    pub kde: KdeConfig,
    #[serde(default)]
    pub quadrature: QuadratureSettings,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
}

fn default_fit_points() -> usize {
    4
}
fn default_threshold() -> f64 {
    JEFFREYS_THRESHOLD
}
fn default_bins() -> usize {
    40
}

impl ExperimentSpec {
    /// Built-in experiment for a model: logistic growth with σ = 1 observed
    /// 26 times on [0, 10], or the glucose model observed every half hour
    /// for two hours with σ = 5.
    pub fn default_for(kind: ModelKind) -> Self {
        use crate::bayes::PriorComponent::Gamma;
        match kind {
            ModelKind::Logistic => Self {
                name: "logistic".into(),
                model: ModelSpec::default_for(kind),
                prior: Prior::new(vec![Gamma { shape: 2.0, rate: 2.0 }]),
                sigma: 1.0,
                data: DataSpec::Synthetic { seed: 2024, times: TimeGrid { start: 0.0, end: 10.0, count: 26 } },
                solver: Method::Rk4,
                h_grid: vec![0.2, 0.1, 0.05, 0.025],
                fit_points: default_fit_points(),
                mcmc: McmcSettings::default(),
                kde: KdeConfig::default(),
                quadrature: QuadratureSettings::default(),
                threshold: default_threshold(),
                histogram_bins: default_bins(),
            },
            ModelKind::Glucose => Self {
                name: "glucose".into(),
                model: ModelSpec::default_for(kind),
                prior: Prior::new(vec![Gamma { shape: 5.0, rate: 0.4 }]),
                sigma: 5.0,
                data: DataSpec::Synthetic { seed: 7, times: TimeGrid { start: 0.0, end: 2.0, count: 5 } },
                solver: Method::Rk4,
                h_grid: (0..8).map(|k| 0.25 * 0.5f64.powi(k)).collect(),
                fit_points: default_fit_points(),
                mcmc: McmcSettings::default(),
                kde: KdeConfig::default(),
                quadrature: QuadratureSettings::default(),
                threshold: default_threshold(),
                histogram_bins: default_bins(),
            },
        }
    }

    /// Reads a spec from `.toml` or `.json` (by extension; JSON otherwise).
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let spec: ExperimentSpec = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text)?,
            _ => serde_json::from_str(&text)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |m: String| Err(HarnessError::Spec(m));
        self.model.validate()?;
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return fail(format!("sigma must be positive, got {}", self.sigma));
        }
        if self.prior.dim() != 1 {
            return fail(format!("both models infer one parameter; prior has {}", self.prior.dim()));
        }
        if let Some(c) = self.prior.components.iter().find(|c| !c.is_valid()) {
            return fail(format!("invalid prior component {c:?}"));
        }
        if self.h_grid.is_empty() {
            return fail("h_grid is empty".into());
        }
        for (i, &h) in self.h_grid.iter().enumerate() {
            if !(h > 0.0 && h.is_finite()) {
                return fail(format!("step size {h} must be positive"));
            }
            if self.h_grid[..i].contains(&h) {
                return fail(format!("step size {h} appears twice"));
            }
        }
        if self.mcmc.n_iter <= self.mcmc.burn_in {
            return fail("mcmc.n_iter must exceed mcmc.burn_in".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return fail(format!("threshold must lie in (0, 1), got {}", self.threshold));
        }
        if self.fit_points < 3 {
            return fail("fit_points must be at least 3".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Observations described by the spec.
    pub fn dataset(&self, base_dir: &Path) -> Result<Dataset, HarnessError> {
        let data = match &self.data {
            DataSpec::Synthetic { seed, times } => generate_synthetic(&self.model, &times.times(), self.sigma, *seed)?,
            DataSpec::Csv { path } => load_observations(&base_dir.join(path))?,
        };
        Ok(Dataset { sigma_fixed: Some(self.sigma), ..data })
    }

    /// Posterior for `dataset` under the exact forward map (`solver = None`)
    /// or a numerical one.
    pub fn posterior(&self, dataset: &Dataset, solver: Option<SolverConfig>) -> Result<Posterior, HarnessError> {
        let noise = NoiseModel::Fixed(self.sigma);
        match (&self.model, solver) {
            (ModelSpec::Logistic(p), None) => {
                Ok(Posterior::new(dataset.clone(), self.prior.clone(), ForwardMap::exact(LogisticSystem::from(*p)), noise))
            }
            (ModelSpec::Logistic(p), Some(cfg)) => Ok(Posterior::new(
                dataset.clone(),
                self.prior.clone(),
                ForwardMap::numerical(LogisticSystem::from(*p), cfg),
                noise,
            )),
            (ModelSpec::Glucose(_), None) => {
                Err(HarnessError::Spec("the glucose model has no closed-form solution".into()))
            }
            (ModelSpec::Glucose(g), Some(cfg)) => {
                // the first observation fixes G(0) and is not part of the likelihood
                if dataset.len() < 2 {
                    return Err(HarnessError::Spec("glucose data needs at least two observations".into()));
                }
                let system = GlucoseSystem::new(g.params, dataset.values[0], g.d0);
                Ok(Posterior::new(dataset.skip(1)?, self.prior.clone(), ForwardMap::numerical(system, cfg), noise))
            }
        }
    }
}

/// `y_i = f(X_θ(t_i)) + ε_i` with `ε_i ~ N(0, σ²)` drawn from a ChaCha8
/// stream seeded by `seed`. `sigma = 0` returns the noise-free values.
pub fn generate_synthetic(model: &ModelSpec, times: &[f64], sigma: f64, seed: u64) -> Result<Dataset, HarnessError> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(HarnessError::Spec(format!("sigma must be nonnegative, got {sigma}")));
    }
    let truth = model.true_observations(times)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = truth
        .iter()
        .map(|f| {
            let z: f64 = rng.sample(StandardNormal);
            f + sigma * z
        })
        .collect();
    let sigma_fixed = (sigma > 0.0).then_some(sigma);
    Ok(Dataset::new(times.to_vec(), values, sigma_fixed)?)
}

/// Reads a two-column observation file with a header row (`t,y`).
pub fn load_observations(path: &Path) -> Result<Dataset, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_observations(&text)
}

pub fn parse_observations(text: &str) -> Result<Dataset, HarnessError> {
    if text.trim().is_empty() {
        return Err(HarnessError::Parse { line: 1, message: "file is empty".into() });
    }
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    if headers.len() != 2 {
        return Err(HarnessError::Parse { line: 1, message: format!("expected 2 columns, found {}", headers.len()) });
    }
    let (mut times, mut values) = (Vec::new(), Vec::new());
    for record in reader.records() {
        let record = record.map_err(|e| HarnessError::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| {
            record[i]
                .parse::<f64>()
                .map_err(|e| HarnessError::Parse { line, message: format!("'{}': {e}", &record[i]) })
        };
        if record.len() != 2 {
            return Err(HarnessError::Parse { line, message: format!("expected 2 fields, found {}", record.len()) });
        }
        times.push(field(0)?);
        values.push(field(1)?);
    }
    if times.is_empty() {
        return Err(HarnessError::Parse { line: 2, message: "no observations".into() });
    }
    Ok(Dataset::new(times, values, None)?)
}

/// Writes `t,y` rows using shortest round-trip float formatting.
pub fn write_observations(dataset: &Dataset, path: &Path) -> Result<(), HarnessError> {
    let mut out = String::from("t,y\n");
    for (t, y) in dataset.times.iter().zip(&dataset.values) {
        let _ = writeln!(out, "{t},{y}");
    }
    write_text(path, &out)
}

fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

/// Seed of the run at position `index` of the step-size grid (SplitMix64
/// finalizer over the base seed and index).
pub fn derive_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Result of one step size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRun {
    pub h: f64,
    pub seed: u64,
    /// MCMC wall clock, covering every posterior evaluation.
    pub cpu_seconds: f64,
    pub accept_rate: f64,
    pub ess: f64,
    pub posterior_mean: Option<f64>,
    pub evidence: Option<EvidenceEstimate>,
    pub quadrature: Option<EvidenceEstimate>,
    pub chain_file: Option<PathBuf>,
    pub error: Option<String>,
}

/// Posterior discrepancies of one step size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Discrepancy {
    pub h: f64,
    pub tv_vs_finest: Option<f64>,
    pub tv_vs_exact: Option<f64>,
    pub mean_vs_exact: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub h: f64,
    pub edges: Vec<f64>,
    pub density: Vec<f64>,
}

/// Everything a sweep produced, bound to its spec by hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub spec_hash: String,
    pub software_version: String,
    pub spec: ExperimentSpec,
    pub dataset: Dataset,
    /// Quadrature marginal under the exact forward map, when one exists.
    pub exact: Option<EvidenceEstimate>,
    /// Step runs in grid order.
    pub steps: Vec<StepRun>,
    pub curve: Option<EvidenceCurve>,
    pub fit_error: Option<String>,
    pub bf: Option<BfReport>,
    pub discrepancies: Vec<Discrepancy>,
    pub histograms: Vec<Histogram>,
}

impl RunRecord {
    pub fn recommended_h(&self) -> Option<f64> {
        self.bf.as_ref()?.recommended.as_ref().map(|r| r.h)
    }

    pub fn step(&self, h: f64) -> Option<&StepRun> {
        self.steps.iter().find(|s| s.h == h)
    }

    pub fn discrepancy(&self, h: f64) -> Option<&Discrepancy> {
        self.discrepancies.iter().find(|d| d.h == h)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Where and how a sweep runs.
#[derive(Debug, Clone, Default)]
pub struct SweepOptions {
    /// Directory for the run record, chains and report; nothing is written
    /// when absent.
    pub out_dir: Option<PathBuf>,
    /// Directory against which relative data paths are resolved.
    pub base_dir: PathBuf,
    /// Worker threads; step sizes run in parallel when above 1.
    pub jobs: usize,
}

/// Runs MCMC and evidence estimation for every step size, then the
/// regression, Bayes factors, recommendation and posterior discrepancies.
/// A failing step size is recorded and skipped.
pub fn run_sweep(spec: &ExperimentSpec, options: &SweepOptions) -> Result<RunRecord, HarnessError> {
    spec.validate()?;
    let dataset = spec.dataset(&options.base_dir)?;
    let solver = |h: f64| SolverConfig::new(spec.solver, h);
    let configs: Vec<SolverConfig> = spec.h_grid.iter().map(|&h| solver(h)).collect::<Result<_, _>>()?;
    let t0 = match spec.model {
        ModelSpec::Logistic(_) => 0.0,
        ModelSpec::Glucose(_) => dataset.times[0],
    };
    for cfg in &configs {
        cfg.align(t0, &dataset.times)
            .map_err(|e| HarnessError::Spec(format!("step size {} does not fit the observation times: {e}", cfg.h)))?;
    }

    let jobs = options.jobs.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| HarnessError::Spec(format!("thread pool: {e}")))?;
    pool.install(|| sweep_in_pool(spec, options, dataset, configs))
}

fn sweep_in_pool(
    spec: &ExperimentSpec,
    options: &SweepOptions,
    dataset: Dataset,
    configs: Vec<SolverConfig>,
) -> Result<RunRecord, HarnessError> {
    let exact_post = if spec.model.has_exact_solution() { Some(spec.posterior(&dataset, None)?) } else { None };
    let exact = match (&exact_post, spec.quadrature.enabled) {
        (Some(post), true) => Some(quadrature_marginal(post, &spec.quadrature.grid)?),
        _ => None,
    };

    let finest = configs.iter().copied().min_by(|a, b| a.h.total_cmp(&b.h)).expect("validated non-empty grid");
    let reference = match &exact_post {
        Some(p) => p.clone(),
        None => spec.posterior(&dataset, Some(finest))?,
    };
    let (init, scales) = mcmc_start(spec, &reference)?;
    let proposal = ProposalConfig {
        step_scales: scales,
        adapt: spec.mcmc.adapt,
        adapt_window: spec.mcmc.adapt_window,
        target_accept: spec.mcmc.target_accept,
    };

    let chain_dir = options.out_dir.as_ref().map(|d| d.join("chains"));
    if let Some(dir) = &chain_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let outcomes: Vec<(StepRun, Option<Chain>)> = configs
        .par_iter()
        .enumerate()
        .map(|(i, cfg)| run_step(spec, &dataset, *cfg, derive_seed(spec.mcmc.seed, i), &init, &proposal, chain_dir.as_deref()))
        .collect();
    let (steps, chains): (Vec<StepRun>, Vec<Option<Chain>>) = outcomes.into_iter().unzip();

    let order = spec.solver.order();
    let sweep_points: Vec<SweepPoint> = steps
        .iter()
        .filter_map(|s| {
            let ev = s.evidence.as_ref()?;
            Some(SweepPoint {
                point: EvidencePoint { h: s.h, log_marginal: ev.log_marginal, se: ev.mc_standard_error, order },
                cpu_seconds: s.cpu_seconds,
            })
        })
        .collect();
    let (curve, bf, fit_error) = if sweep_points.len() < 3 {
        let msg = (spec.h_grid.len() > 1).then(|| format!("{} usable step sizes, need 3", sweep_points.len()));
        (None, None, msg)
    } else {
        let all: Vec<EvidencePoint> = sweep_points.iter().map(|p| p.point).collect();
        let fit = select_smallest(&all, spec.fit_points);
        match bf_report(&sweep_points, &fit, spec.threshold) {
            Ok((c, r)) => (Some(c), Some(r), None),
            Err(e) => {
                log::warn!("evidence regression failed: {e}");
                (None, None, Some(e.to_string()))
            }
        }
    };

    let discrepancies = if spec.quadrature.enabled {
        discrepancies(spec, &dataset, &configs, exact_post.as_ref())
    } else {
        Vec::new()
    };
    let histograms = histograms(&steps, &chains, spec.histogram_bins);

    let record = RunRecord {
        spec_hash: spec.hash(),
        software_version: env!("CARGO_PKG_VERSION").to_string(),
        spec: spec.clone(),
        dataset,
        exact,
        steps,
        curve,
        fit_error,
        bf,
        discrepancies,
        histograms,
    };
    if let Some(dir) = &options.out_dir {
        write_text(&dir.join("run.json"), &serde_json::to_string_pretty(&record)?)?;
        report(&record, dir)?;
    }
    Ok(record)
}

fn mcmc_start(spec: &ExperimentSpec, reference: &Posterior) -> Result<(Vec<f64>, Vec<f64>), HarnessError> {
    if let (Some(init), Some(scales)) = (&spec.mcmc.init, &spec.mcmc.step_scales) {
        return Ok((init.clone(), scales.clone()));
    }
    let prior = &reference.prior.components[0];
    let (mode, scale) = mode_and_scale_1d(reference, prior.bounds(), prior.support(), spec.quadrature.grid.scan_points)?;
    let init = spec.mcmc.init.clone().unwrap_or_else(|| vec![mode]);
    let scales = spec.mcmc.step_scales.clone().unwrap_or_else(|| vec![2.4 * scale]);
    Ok((init, scales))
}

fn run_step(
    spec: &ExperimentSpec,
    dataset: &Dataset,
    config: SolverConfig,
    seed: u64,
    init: &[f64],
    proposal: &ProposalConfig,
    chain_dir: Option<&Path>,
) -> (StepRun, Option<Chain>) {
    let mut run = StepRun {
        h: config.h,
        seed,
        cpu_seconds: 0.0,
        accept_rate: 0.0,
        ess: 0.0,
        posterior_mean: None,
        evidence: None,
        quadrature: None,
        chain_file: None,
        error: None,
    };
    let result = (|| -> Result<Chain, HarnessError> {
        let post = spec.posterior(dataset, Some(config))?;
        let chain = mh_run(&post, init, proposal, spec.mcmc.n_iter, spec.mcmc.burn_in, seed)?;
        run.cpu_seconds = chain.wall_clock_seconds;
        run.accept_rate = chain.accept_rate;
        run.ess = effective_sample_size(&chain, 0);
        run.posterior_mean = Some(stats::mean(&chain.coordinate(0)));
        if let Some(dir) = chain_dir {
            let path = dir.join(format!("chain_h{}.csv", config.h));
            let file = fs::File::create(&path).map_err(io_err(&path))?;
            chain.write_csv(std::io::BufWriter::new(file))?;
            run.chain_file = Some(PathBuf::from("chains").join(path.file_name().expect("file name")));
        }
        if spec.quadrature.enabled {
            match quadrature_marginal(&post, &spec.quadrature.grid) {
                Ok(q) => run.quadrature = Some(q),
                Err(e) => log::warn!("quadrature at h={}: {e}", config.h),
            }
        }
        run.evidence = Some(gelfand_dey_kde(&chain, &spec.kde)?);
        Ok(chain)
    })();
    match result {
        Ok(chain) => (run, Some(chain)),
        Err(e) => {
            log::warn!("step size {} failed: {e}", config.h);
            run.error = Some(e.to_string());
            (run, None)
        }
    }
}

fn discrepancies(
    spec: &ExperimentSpec,
    dataset: &Dataset,
    configs: &[SolverConfig],
    exact: Option<&Posterior>,
) -> Vec<Discrepancy> {
    let grid = GridSpec { rel_tol: spec.quadrature.discrepancy_rel_tol, ..spec.quadrature.grid.clone() };
    let finest = configs.iter().copied().min_by(|a, b| a.h.total_cmp(&b.h)).expect("non-empty grid");
    let Ok(finest_post) = spec.posterior(dataset, Some(finest)) else {
        return Vec::new();
    };
    configs
        .iter()
        .filter_map(|cfg| {
            let post = spec.posterior(dataset, Some(*cfg)).ok()?;
            let ok = |r: Result<f64, RegressError>| match r {
                Ok(v) => Some(v),
                Err(e) => {
                    log::warn!("posterior discrepancy at h={}: {e}", cfg.h);
                    None
                }
            };
            Some(Discrepancy {
                h: cfg.h,
                tv_vs_finest: ok(posterior_discrepancy(&post, &finest_post, Statistic::TotalVariation, &grid)),
                tv_vs_exact: exact.and_then(|e| ok(posterior_discrepancy(&post, e, Statistic::TotalVariation, &grid))),
                mean_vs_exact: exact
                    .and_then(|e| ok(posterior_discrepancy(&post, e, Statistic::Mean { coordinate: 0 }, &grid))),
            })
        })
        .collect()
}

fn histograms(steps: &[StepRun], chains: &[Option<Chain>], bins: usize) -> Vec<Histogram> {
    let bins = bins.max(1);
    let all: Vec<f64> = chains.iter().flatten().flat_map(|c| c.coordinate(0)).collect();
    if all.is_empty() {
        return Vec::new();
    }
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    steps
        .iter()
        .zip(chains)
        .filter_map(|(s, c)| {
            let c = c.as_ref()?;
            let mut counts = vec![0usize; bins];
            for x in c.coordinate(0) {
                let k = (((x - lo) / width) as usize).min(bins - 1);
                counts[k] += 1;
            }
            let n = c.len() as f64;
            Some(Histogram {
                h: s.h,
                edges: edges.clone(),
                density: counts.iter().map(|&k| k as f64 / (n * width)).collect(),
            })
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn sci(log_value: Option<f64>) -> String {
    log_value.map_or_else(String::new, |l| format!("{:.6e}", l.exp()))
}

/// Writes the report files into `dir`:
///
/// - `table.csv`: σ, exact and extrapolated marginals
/// - `curve.csv`: evidence against step size, with fit and references
/// - `bf_report.csv`: Bayes factors, flags and timings
/// - `discrepancy.csv`: posterior total-variation and mean discrepancies
/// - `posterior_hist.csv`: histogram of draws per step size
/// - `timings.csv`: MCMC cost per step size
/// - `summary.txt`: recommendation and speedup
///
/// Everything except `bf_report.csv`, `timings.csv` and `summary.txt` is
/// free of timing data and reproducible byte for byte.
pub fn report(record: &RunRecord, dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let spec = &record.spec;
    let log_a = record.curve.as_ref().map(|c| c.log_a);
    let exact_log = record.exact.as_ref().map(|e| e.log_marginal);

    let mut table = String::from("sigma,exact_marginal,extrapolated_marginal,ratio,log_exact,log_extrapolated\n");
    if !record.steps.is_empty() {
        let ratio = match (log_a, exact_log) {
            (Some(a), Some(e)) => Some((a - e).exp()),
            _ => None,
        };
        let _ = writeln!(
            table,
            "{},{},{},{},{},{}",
            spec.sigma,
            sci(exact_log),
            sci(log_a),
            opt(ratio),
            opt(exact_log),
            opt(log_a)
        );
    }
    write_text(&dir.join("table.csv"), &table)?;

    let mut curve = String::from("h,h_pow_p,log_marginal,se,quadrature_log_marginal,fitted_log_marginal,exact_log_marginal\n");
    let p = spec.solver.order() as i32;
    let mut steps: Vec<&StepRun> = record.steps.iter().collect();
    steps.sort_by(|a, b| b.h.total_cmp(&a.h));
    for s in &steps {
        let fitted = record.curve.as_ref().and_then(|c| c.log_predict(s.h));
        let _ = writeln!(
            curve,
            "{},{},{},{},{},{},{}",
            s.h,
            s.h.powi(p),
            opt(s.evidence.as_ref().map(|e| e.log_marginal)),
            opt(s.evidence.as_ref().map(|e| e.mc_standard_error)),
            opt(s.quadrature.as_ref().map(|q| q.log_marginal)),
            opt(fitted),
            opt(exact_log)
        );
    }
    write_text(&dir.join("curve.csv"), &curve)?;

    let rows = record.bf.as_ref().map(|b| b.rows.as_slice()).unwrap_or(&[]);
    let mut buf = Vec::new();
    write_bf_rows(rows, &mut buf)?;
    fs::write(dir.join("bf_report.csv"), buf).map_err(io_err(dir))?;

    let mut disc = String::from("h,tv_vs_finest,tv_vs_exact,mean_vs_exact\n");
    for d in &record.discrepancies {
        let _ = writeln!(disc, "{},{},{},{}", d.h, opt(d.tv_vs_finest), opt(d.tv_vs_exact), opt(d.mean_vs_exact));
    }
    write_text(&dir.join("discrepancy.csv"), &disc)?;

    let mut hist = String::from("h,bin_lower,bin_upper,density\n");
    for hg in &record.histograms {
        for (k, d) in hg.density.iter().enumerate() {
            let _ = writeln!(hist, "{},{},{},{}", hg.h, hg.edges[k], hg.edges[k + 1], d);
        }
    }
    write_text(&dir.join("posterior_hist.csv"), &hist)?;

    let mut timings = String::from("h,cpu_seconds,accept_rate,ess\n");
    for s in &steps {
        let _ = writeln!(timings, "{},{},{},{}", s.h, s.cpu_seconds, s.accept_rate, s.ess);
    }
    write_text(&dir.join("timings.csv"), &timings)?;

    write_text(&dir.join("summary.txt"), &summary(record))
}

/// Human-readable digest of a run.
pub fn summary(record: &RunRecord) -> String {
    let spec = &record.spec;
    let mut s = String::new();
    let _ = writeln!(s, "experiment:   {}", spec.name);
    let _ = writeln!(s, "spec sha256:  {}", record.spec_hash);
    let _ = writeln!(s, "version:      {}", record.software_version);
    let _ = writeln!(s, "model:        {} ({} solver, sigma = {})", spec.model.kind(), spec.solver, spec.sigma);
    let _ = writeln!(s, "observations: {}", record.dataset.len());
    let _ = writeln!(s);
    let _ = writeln!(s, "{:>12} {:>14} {:>10} {:>14} {:>10} {:>10}", "h", "log P^h", "se", "BF vs fit", "cpu [s]", "accept");
    let mut steps: Vec<&StepRun> = record.steps.iter().collect();
    steps.sort_by(|a, b| b.h.total_cmp(&a.h));
    for st in steps {
        let bf = record
            .bf
            .as_ref()
            .and_then(|b| b.rows.iter().find(|r| r.h == st.h))
            .map_or_else(|| "-".to_string(), |r| format!("{:.5}{}", r.bayes_factor, if r.indistinguishable { "*" } else { "" }));
        match (&st.evidence, &st.error) {
            (Some(ev), _) => {
                let _ = writeln!(
                    s,
                    "{:>12} {:>14.6} {:>10.5} {:>14} {:>10.3} {:>10.3}",
                    st.h, ev.log_marginal, ev.mc_standard_error, bf, st.cpu_seconds, st.accept_rate
                );
            }
            (None, err) => {
                let _ = writeln!(s, "{:>12} failed: {}", st.h, err.as_deref().unwrap_or("unknown error"));
            }
        }
    }
    let _ = writeln!(s, "(* = Bayes factor inside [{}, 1/{}])", spec.threshold, spec.threshold);
    let _ = writeln!(s);
    if let Some(e) = &record.exact {
        let _ = writeln!(s, "exact marginal (quadrature):  {:.6e}", e.log_marginal.exp());
    }
    match (&record.curve, &record.fit_error) {
        (Some(c), _) => {
            let _ = writeln!(
                s,
                "extrapolated marginal:        {:.6e} (log se {:.4}, B(y) = {:.4e}, R^2 = {:.4})",
                c.log_a.exp(),
                c.log_a_se,
                c.b_y,
                c.r_squared
            );
        }
        (None, Some(e)) => {
            let _ = writeln!(s, "no evidence regression: {e}");
        }
        (None, None) => {}
    }
    match record.bf.as_ref().and_then(|b| b.recommended.as_ref()) {
        Some(r) => {
            let _ = writeln!(s, "recommended h:                {} (BF {:.5}, speedup {:.1}x over finest h)", r.h, r.bayes_factor, r.speedup);
            if let Some(tv) = record.discrepancy(r.h).and_then(|d| d.tv_vs_finest) {
                let _ = writeln!(s, "TV(recommended, finest):      {tv:.3e}");
            }
        }
        None if record.bf.is_some() => {
            let _ = writeln!(s, "recommended h:                none (no step size is indistinguishable from the extrapolated model)");
        }
        None => {}
    }
    s
}

/// Posterior draws of one step size, for callers running a single chain.
pub fn run_chain(spec: &ExperimentSpec, dataset: &Dataset, h: f64, seed: u64) -> Result<Chain, HarnessError> {
    let config = SolverConfig::new(spec.solver, h)?;
    let post = spec.posterior(dataset, Some(config))?;
    let (init, scales) = mcmc_start(spec, &post)?;
    let proposal = ProposalConfig {
        step_scales: scales,
        adapt: spec.mcmc.adapt,
        adapt_window: spec.mcmc.adapt_window,
        target_accept: spec.mcmc.target_accept,
    };
    Ok(mh_run(&post, &init, &proposal, spec.mcmc.n_iter, spec.mcmc.burn_in, seed)?)
}

/// Writes a JSON value with a trailing newline.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}
