use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use odebayes::evidence::{gelfand_dey_kde, harmonic_mean, quadrature_marginal};
use odebayes::harness::{
    generate_synthetic, report, run_chain, run_sweep, summary, write_json, write_observations, DataSpec,
    ExperimentSpec, RunRecord, SweepOptions,
};
use odebayes::models::ModelKind;
use odebayes::ode::{Method, SolverConfig};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "odebayes", version, about = "Step-size selection for ODE models by Bayes factors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic observations of an experiment to a CSV file.
    Gen {
        #[command(flatten)]
        experiment: ExperimentArgs,
        /// Noise seed; overrides the spec.
        #[arg(long)]
        seed: Option<u64>,
        /// Output file (`t,y` columns).
        #[arg(long)]
        out: PathBuf,
    },
    /// Run MCMC and evidence estimation over the step-size grid, then fit,
    /// compare and recommend a step size.
    Sweep {
        #[command(flatten)]
        experiment: ExperimentArgs,
        /// Step sizes; overrides the spec grid.
        #[arg(long = "h", value_delimiter = ',')]
        h_grid: Vec<f64>,
        /// MCMC base seed; overrides the spec.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Output directory for run.json, chains and report files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the marginal likelihood at a single step size and print it
    /// as JSON.
    Evidence {
        #[command(flatten)]
        experiment: ExperimentArgs,
        /// Step size; omit to use the exact solution (quadrature only).
        #[arg(long)]
        h: Option<f64>,
        #[arg(long, value_enum, default_value_t = Estimator::GelfandDey)]
        method: Estimator,
        /// MCMC seed; overrides the spec.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the JSON here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rewrite the report files of a finished sweep from its run.json.
    Report {
        /// Sweep output directory.
        #[arg(long)]
        run: PathBuf,
        /// Where to write the report; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment file (.toml or .json).
    #[arg(long, conflicts_with = "model")]
    spec: Option<PathBuf>,
    /// Built-in experiment.
    #[arg(long, value_parser = parse_model)]
    model: Option<ModelKind>,
    /// Solver; overrides the spec.
    #[arg(long, value_parser = parse_method)]
    solver: Option<Method>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Estimator {
    GelfandDey,
    HarmonicMean,
    Quadrature,
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    s.parse()
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse()
}

impl ExperimentArgs {
    /// The experiment and the directory its relative paths resolve against.
    fn load(&self) -> Result<(ExperimentSpec, PathBuf)> {
        let (mut spec, base) = match (&self.spec, self.model) {
            (Some(path), _) => {
                let spec = ExperimentSpec::load(path).with_context(|| format!("loading {}", path.display()))?;
                let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
                (spec, base)
            }
            (None, Some(kind)) => (ExperimentSpec::default_for(kind), PathBuf::from(".")),
            (None, None) => bail!("pass --spec FILE or --model logistic|glucose"),
        };
        if let Some(method) = self.solver {
            spec.solver = method;
        }
        Ok((spec, base))
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Gen { experiment, seed, out } => {
            let (spec, _) = experiment.load()?;
            let DataSpec::Synthetic { seed: spec_seed, times } = spec.data else {
                bail!("experiment '{}' reads its data from a file; nothing to generate", spec.name);
            };
            let data = generate_synthetic(&spec.model, &times.times(), spec.sigma, seed.unwrap_or(spec_seed))?;
            write_observations(&data, &out)?;
            log::info!("wrote {} observations to {}", data.len(), out.display());
        }
        Command::Sweep { experiment, h_grid, seed, jobs, out } => {
            let (mut spec, base_dir) = experiment.load()?;
            if !h_grid.is_empty() {
                spec.h_grid = h_grid;
            }
            if let Some(seed) = seed {
                spec.mcmc.seed = seed;
            }
            let options = SweepOptions { out_dir: Some(out.clone()), base_dir, jobs };
            let record = run_sweep(&spec, &options)?;
            print!("{}", summary(&record));
            println!("\nreport written to {}", out.display());
        }
        Command::Evidence { experiment, h, method, seed, out } => {
            let (spec, base_dir) = experiment.load()?;
            let dataset = spec.dataset(&base_dir)?;
            let config = h.map(|h| SolverConfig::new(spec.solver, h)).transpose()?;
            let estimate = match (method, config) {
                (Estimator::Quadrature, _) => {
                    quadrature_marginal(&spec.posterior(&dataset, config)?, &spec.quadrature.grid)?
                }
                (_, None) => bail!("--h is required for MCMC-based estimators"),
                (estimator, Some(cfg)) => {
                    let chain = run_chain(&spec, &dataset, cfg.h, seed.unwrap_or(spec.mcmc.seed))?;
                    match estimator {
                        Estimator::HarmonicMean => harmonic_mean(&chain, &spec.prior)?,
                        _ => gelfand_dey_kde(&chain, &spec.kde)?,
                    }
                }
            };
            for w in &estimate.warnings {
                log::warn!("{w:?}");
            }
            let record = estimate.record(config.as_ref());
            match out {
                Some(path) => write_json(&record, &path)?,
                None => println!("{}", serde_json::to_string_pretty(&record)?),
            }
        }
        Command::Report { run, out } => {
            let record = RunRecord::load(&run.join("run.json"))?;
            let dir = out.unwrap_or(run);
            report(&record, &dir)?;
            print!("{}", summary(&record));
        }
    }
    Ok(())
}
