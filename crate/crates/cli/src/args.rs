//! Flag definitions. Each subcommand's flags map onto an [`ExperimentConfig`]
//! so flag-driven and config-driven runs share validation and execution.

use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use iwvi::optimizer::{GradNormStop, StepSchedule, UpdateScope};
use iwvi::svol::{Observation, SvPrior};

use crate::config::{
    default_ladder, parse_config, AnnealOptions, Command, ConfigError, Experiment, ExperimentConfig, ModelSpec, NGrid,
    OptimizeOptions, SimulateSpec, VerifyOptions,
};
use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "iwvi", version, about = "Gradient-estimator experiments for importance weighted variational bounds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Sub,
}

#[derive(Debug, Subcommand)]
pub enum Sub {
    /// Empirical SNR of each estimator over an N grid (snr.csv).
    SnrSweep(SweepArgs),
    /// Empirical variance and fitted log-log slopes (variance.csv, slopes.csv).
    VarianceSweep(SweepArgs),
    /// Stochastic gradient ascent on the Gaussian model (trajectory-<estimator>.csv).
    Optimize(OptimizeArgs),
    /// Empirical vs analytic SNR and variance on the Gaussian model.
    GaussianVerify(VerifyArgs),
    /// Fit a Gaussian q over the stochastic volatility parameters.
    SsmFit(SsmFitArgs),
    /// Run an experiment described by a TOML config file.
    Run(RunArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; must not exist. Default: runs/<command>-seed<seed>.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModelKind {
    Gaussian,
    Svol,
}

#[derive(Debug, Args)]
pub struct GaussianArgs {
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "0")]
    pub theta: Vec<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "1")]
    pub phi: Vec<f64>,
    /// Latent dimension; one-element theta/phi are broadcast to it.
    #[arg(long)]
    pub d: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SvolArgs {
    /// CSV series (`t,x` or one value per line). Without it a series is simulated.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Length of the simulated series.
    #[arg(long)]
    pub simulate_length: Option<usize>,
    #[arg(long, default_value_t = 100)]
    pub particles: usize,
    /// Initial q mean over (beta0, -2 atanh(beta1), log sigma2).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "0,-2,-2")]
    pub q_mean: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.3,0.3,0.3")]
    pub q_sd: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_enum, default_value_t = ModelKind::Gaussian)]
    pub model: ModelKind,
    #[command(flatten)]
    pub gaussian: GaussianArgs,
    #[command(flatten)]
    pub svol: SvolArgs,
    #[arg(long, value_delimiter = ',', default_value = "am,gm,star")]
    pub estimators: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub alphas: Vec<f64>,
    /// `a x b^i..j` or a comma list.
    #[arg(long, default_value = "5x2^0..8")]
    pub ngrid: String,
    #[arg(long, default_value_t = 1000)]
    pub reps: usize,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub gaussian: GaussianArgs,
    #[arg(long, value_delimiter = ',', default_value = "am,gm,star")]
    pub estimators: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.5")]
    pub alphas: Vec<f64>,
    #[arg(long, default_value = "5x2^4..8")]
    pub ngrid: String,
    #[arg(long, default_value_t = 2000)]
    pub reps: usize,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 0.25)]
    pub tolerance: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StepKind {
    Constant,
    InvSqrt,
    InverseTime,
}

#[derive(Debug, Args)]
pub struct OptArgs {
    /// One trajectory is run per estimator.
    #[arg(long, value_delimiter = ',', default_value = "star")]
    pub estimators: Vec<String>,
    /// Fixed alpha (ignored with --ladder or --anneal).
    #[arg(long, default_value_t = 0.0)]
    pub alpha: f64,
    /// Strictly decreasing alpha ladder.
    #[arg(long, value_delimiter = ',')]
    pub ladder: Option<Vec<f64>>,
    /// Use the default ladder 0.99, 0.9, 0.7, 0.5, 0.3, 0.1, 0.
    #[arg(long, conflicts_with = "ladder")]
    pub anneal: bool,
    #[arg(long, default_value_t = 0.5)]
    pub ess_threshold: f64,
    /// Temper the likelihood with beta_t = min(1, 0.001 + t/100000).
    #[arg(long)]
    pub tempering: bool,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 1000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0.01)]
    pub step: f64,
    #[arg(long, value_enum, default_value_t = StepKind::Constant)]
    pub schedule: StepKind,
    /// Decay constant of the inverse-time schedule.
    #[arg(long, default_value_t = 1000.0)]
    pub step_decay: f64,
    /// Hold theta fixed and update only the variational parameters.
    #[arg(long)]
    pub phi_only: bool,
    /// Stop once the norm of the windowed mean gradient falls below this.
    #[arg(long)]
    pub stop_threshold: Option<f64>,
    #[arg(long, default_value_t = 100)]
    pub stop_window: usize,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub gaussian: GaussianArgs,
    #[command(flatten)]
    pub opt: OptArgs,
}

#[derive(Debug, Args)]
pub struct SsmFitArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub svol: SvolArgs,
    #[command(flatten)]
    pub opt: OptArgs,
    /// Draws for the posterior summary.
    #[arg(long, default_value_t = 20_000)]
    pub posterior_draws: usize,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `output` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `workers` from the config.
    #[arg(long)]
    pub workers: Option<usize>,
}

fn n_grid(text: &str) -> NGrid {
    if text.contains(['x', '*', '^']) {
        return NGrid::Shorthand(text.to_string());
    }
    text.split(',')
        .map(|v| v.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map(NGrid::List)
        .unwrap_or_else(|_| NGrid::Shorthand(text.to_string()))
}

impl GaussianArgs {
    fn spec(&self) -> ModelSpec {
        ModelSpec::Gaussian { theta: self.theta.clone(), phi: self.phi.clone(), d: self.d }
    }
}

impl SvolArgs {
    fn spec(&self) -> ModelSpec {
        let simulate = match (&self.data, self.simulate_length) {
            (Some(_), None) => None,
            (_, length) => {
                let default = SimulateSpec::default();
                Some(SimulateSpec { length: length.unwrap_or(default.length), ..default })
            }
        };
        ModelSpec::Svol {
            data: self.data.clone(),
            simulate,
            particles: self.particles,
            prior: SvPrior::default(),
            observation: Observation::default(),
            q_mean: self.q_mean.clone(),
            q_sd: self.q_sd.clone(),
        }
    }
}

impl OptArgs {
    fn options(&self, posterior_draws: usize) -> OptimizeOptions {
        OptimizeOptions {
            n: self.n,
            iterations: self.iterations,
            step: match self.schedule {
                StepKind::Constant => StepSchedule::Constant { size: self.step },
                StepKind::InvSqrt => StepSchedule::InvSqrt { size: self.step },
                StepKind::InverseTime => StepSchedule::InverseTime { size: self.step, decay: self.step_decay },
            },
            scope: if self.phi_only { UpdateScope::PhiOnly } else { UpdateScope::All },
            grad_norm_stop: self.stop_threshold.map(|threshold| GradNormStop { threshold, window: self.stop_window }),
            star_subsample: None,
            posterior_draws,
        }
    }

    fn anneal(&self) -> AnnealOptions {
        let ladder = if self.anneal { Some(default_ladder()) } else { self.ladder.clone() };
        AnnealOptions { ladder, ess_threshold: self.ess_threshold, tempering: self.tempering }
    }
}

fn base(command: Command, common: &CommonArgs, model: ModelSpec) -> ExperimentConfig {
    ExperimentConfig {
        command,
        seed: common.seed,
        output: common.out.clone(),
        workers: common.workers,
        model,
        estimators: vec![],
        alphas: vec![0.0],
        n_grid: NGrid::default(),
        replicates: 1000,
        anneal: AnnealOptions::default(),
        optimize: OptimizeOptions::default(),
        verify: VerifyOptions::default(),
    }
}

impl Cli {
    /// Builds and validates the experiment the flags describe.
    pub fn into_experiment(self) -> Result<Experiment, CliError> {
        let config = match self.command {
            Sub::SnrSweep(a) => sweep_config(Command::SnrSweep, a),
            Sub::VarianceSweep(a) => sweep_config(Command::VarianceSweep, a),
            Sub::GaussianVerify(a) => ExperimentConfig {
                estimators: a.estimators,
                alphas: a.alphas,
                n_grid: n_grid(&a.ngrid),
                replicates: a.reps,
                verify: VerifyOptions { tolerance: a.tolerance },
                ..base(Command::GaussianVerify, &a.common, a.gaussian.spec())
            },
            Sub::Optimize(a) => ExperimentConfig {
                estimators: a.opt.estimators.clone(),
                alphas: vec![a.opt.alpha],
                anneal: a.opt.anneal(),
                optimize: a.opt.options(OptimizeOptions::default().posterior_draws),
                ..base(Command::Optimize, &a.common, a.gaussian.spec())
            },
            Sub::SsmFit(a) => ExperimentConfig {
                estimators: a.opt.estimators.clone(),
                alphas: vec![a.opt.alpha],
                anneal: a.opt.anneal(),
                optimize: a.opt.options(a.posterior_draws),
                ..base(Command::SsmFit, &a.common, a.svol.spec())
            },
            Sub::Run(a) => {
                let text = fs::read_to_string(&a.config).map_err(|e| {
                    CliError::Config(vec![ConfigError {
                        field: "config".into(),
                        reason: format!("cannot read `{}`: {e}", a.config.display()),
                    }])
                })?;
                let mut config = parse_config(&text)?;
                if a.out.is_some() {
                    config.output = a.out;
                }
                if a.workers.is_some() {
                    config.workers = a.workers;
                }
                config
            }
        };
        Ok(config.validate()?)
    }
}

fn sweep_config(command: Command, a: SweepArgs) -> ExperimentConfig {
    let model = match a.model {
        ModelKind::Gaussian => a.gaussian.spec(),
        ModelKind::Svol => a.svol.spec(),
    };
    ExperimentConfig {
        estimators: a.estimators,
        alphas: a.alphas,
        n_grid: n_grid(&a.ngrid),
        replicates: a.reps,
        ..base(command, &a.common, model)
    }
}
