//! Experiment configuration: the TOML schema, the `a x b^i..j` grid shorthand
//! and validation that reports every problem at once.
//!
//! ```toml
//! command = "snr-sweep"          # snr-sweep | variance-sweep | optimize | gaussian-verify | ssm-fit
//! seed = 7
//! output = "runs/fig1"           # default: runs/<command>-seed<seed>
//! estimators = ["am", "gm", "star"]
//! alphas = [0.0, 0.5]
//! n_grid = "5x2^0..8"            # or an explicit list
//! replicates = 1000
//!
//! [model]
//! kind = "gaussian"
//! theta = [0.0]
//! phi = [1.0]
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use iwvi::optimizer::{GradNormStop, StepSchedule, UpdateScope, DEFAULT_ALPHA_LADDER};
use iwvi::svol::{Observation, SvParams, SvPrior};
use iwvi::EstimatorKind;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    SnrSweep,
    VarianceSweep,
    Optimize,
    GaussianVerify,
    SsmFit,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::SnrSweep => "snr-sweep",
            Command::VarianceSweep => "variance-sweep",
            Command::Optimize => "optimize",
            Command::GaussianVerify => "gaussian-verify",
            Command::SsmFit => "ssm-fit",
        }
    }
}

/// Batch-size grid: an explicit list or the `a x b^i..j` shorthand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NGrid {
    List(Vec<usize>),
    Shorthand(String),
}

impl Default for NGrid {
    fn default() -> Self {
        NGrid::Shorthand("5x2^0..8".into())
    }
}

/// Expands `a x b^i..j` (spaces and `*` allowed in place of `x`) to `a*b^i, ..., a*b^j`.
pub fn parse_n_grid(text: &str) -> Result<Vec<usize>, String> {
    let compact: String = text.chars().filter(|c| !c.is_whitespace()).collect();
    let bad = || format!("`{text}` is not of the form a x b^i..j");
    let (a, rest) = compact.split_once(['x', '*']).ok_or_else(bad)?;
    let (b, range) = rest.split_once('^').ok_or_else(bad)?;
    let (i, j) = range.split_once("..").ok_or_else(bad)?;
    let a: usize = a.parse().map_err(|_| bad())?;
    let b: usize = b.parse().map_err(|_| bad())?;
    let i: u32 = i.parse().map_err(|_| bad())?;
    let j: u32 = j.parse().map_err(|_| bad())?;
    if i > j {
        return Err(format!("`{text}`: exponent range {i}..{j} is empty"));
    }
    (i..=j)
        .map(|e| b.checked_pow(e).and_then(|p| p.checked_mul(a)).ok_or_else(|| format!("`{text}` overflows")))
        .collect()
}

/// Parameters for simulating a volatility series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSpec {
    #[serde(default = "defaults::beta0")]
    pub beta0: f64,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::sigma2")]
    pub sigma2: f64,
    #[serde(default = "defaults::length")]
    pub length: usize,
    /// Defaults to the experiment seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for SimulateSpec {
    fn default() -> Self {
        Self {
            beta0: defaults::beta0(),
            beta1: defaults::beta1(),
            sigma2: defaults::sigma2(),
            length: defaults::length(),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelSpec {
    /// Isotropic Gaussian model; a one-element `theta` or `phi` is broadcast to `d`.
    Gaussian {
        theta: Vec<f64>,
        phi: Vec<f64>,
        #[serde(default)]
        d: Option<usize>,
    },
    /// Stochastic volatility with a particle-filter likelihood. Exactly one of
    /// `data` (CSV path) and `simulate` must be given.
    Svol {
        #[serde(default)]
        data: Option<PathBuf>,
        #[serde(default)]
        simulate: Option<SimulateSpec>,
        #[serde(default = "defaults::particles")]
        particles: usize,
        #[serde(default)]
        prior: SvPrior,
        #[serde(default)]
        observation: Observation,
        /// Mean and marginal sd of the (diagonal) starting `q` over the unconstrained parameters.
        #[serde(default = "defaults::q_mean")]
        q_mean: Vec<f64>,
        #[serde(default = "defaults::q_sd")]
        q_sd: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnealOptions {
    /// Strictly decreasing alpha ladder; when absent the first entry of `alphas` is used as a fixed alpha.
    #[serde(default)]
    pub ladder: Option<Vec<f64>>,
    #[serde(default = "defaults::ess_threshold")]
    pub ess_threshold: f64,
    #[serde(default)]
    pub tempering: bool,
}

impl Default for AnnealOptions {
    fn default() -> Self {
        Self { ladder: None, ess_threshold: defaults::ess_threshold(), tempering: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeOptions {
    #[serde(default = "defaults::batch")]
    pub n: usize,
    #[serde(default = "defaults::iterations")]
    pub iterations: usize,
    #[serde(default = "defaults::step")]
    pub step: StepSchedule,
    #[serde(default)]
    pub scope: UpdateScope,
    #[serde(default)]
    pub grad_norm_stop: Option<GradNormStop>,
    #[serde(default)]
    pub star_subsample: Option<usize>,
    /// Draws used for the posterior summary of `ssm-fit`.
    #[serde(default = "defaults::posterior_draws")]
    pub posterior_draws: usize,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        Self {
            n: defaults::batch(),
            iterations: defaults::iterations(),
            step: defaults::step(),
            scope: UpdateScope::All,
            grad_norm_stop: None,
            star_subsample: None,
            posterior_draws: defaults::posterior_draws(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyOptions {
    /// Largest accepted relative error of the empirical SNR and variance.
    #[serde(default = "defaults::tolerance")]
    pub tolerance: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { tolerance: defaults::tolerance() }
    }
}

/// One experiment, as written in a config file or assembled from flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub command: Command,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Worker threads; defaults to the available parallelism.
    #[serde(default)]
    pub workers: Option<usize>,
    pub model: ModelSpec,
    #[serde(default = "defaults::estimators")]
    pub estimators: Vec<String>,
    #[serde(default = "defaults::alphas")]
    pub alphas: Vec<f64>,
    #[serde(default)]
    pub n_grid: NGrid,
    #[serde(default = "defaults::replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub anneal: AnnealOptions,
    #[serde(default)]
    pub optimize: OptimizeOptions,
    #[serde(default)]
    pub verify: VerifyOptions,
}

mod defaults {
    use super::*;

    pub fn beta0() -> f64 {
        SvParams::synthetic_default().beta0
    }
    pub fn beta1() -> f64 {
        SvParams::synthetic_default().beta1
    }
    pub fn sigma2() -> f64 {
        SvParams::synthetic_default().sigma2
    }
    pub fn length() -> usize {
        200
    }
    pub fn particles() -> usize {
        100
    }
    pub fn q_mean() -> Vec<f64> {
        vec![0.0, -2.0, -2.0]
    }
    pub fn q_sd() -> Vec<f64> {
        vec![0.3; 3]
    }
    pub fn ess_threshold() -> f64 {
        0.5
    }
    pub fn batch() -> usize {
        100
    }
    pub fn iterations() -> usize {
        1000
    }
    pub fn step() -> StepSchedule {
        StepSchedule::Constant { size: 0.01 }
    }
    pub fn posterior_draws() -> usize {
        20_000
    }
    pub fn tolerance() -> f64 {
        0.25
    }
    pub fn estimators() -> Vec<String> {
        vec!["am".into(), "gm".into(), "star".into()]
    }
    pub fn alphas() -> Vec<f64> {
        vec![0.0]
    }
    pub fn replicates() -> usize {
        1000
    }
}

/// One validation failure: the dotted path of the offending field and why.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub field: String,
    pub reason: String,
}

impl ConfigError {
    fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self { field: field.into(), reason: reason.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.reason)
    }
}

/// The model after broadcasting and file checks.
#[derive(Debug, Clone, PartialEq)]
pub enum ResolvedModel {
    Gaussian { theta: Vec<f64>, phi: Vec<f64> },
    Svol { series: SeriesSource, particles: usize, prior: SvPrior, observation: Observation, q_mean: Vec<f64>, q_sd: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum SeriesSource {
    File(PathBuf),
    Simulate { params: SvParams, length: usize, seed: u64 },
}

/// A validated config with every shorthand expanded.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub output: PathBuf,
    pub model: ResolvedModel,
    pub estimators: Vec<EstimatorKind>,
    pub n_grid: Vec<usize>,
}

/// Parses and validates a TOML config.
pub fn validate_config(text: &str) -> Result<Experiment, Vec<ConfigError>> {
    parse_config(text)?.validate()
}

/// Parses TOML into the raw config without the semantic checks.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, Vec<ConfigError>> {
    toml::from_str(text).map_err(|e| {
        let span = e.span().map(|s| format!(" (bytes {}..{})", s.start, s.end)).unwrap_or_default();
        vec![ConfigError::new("config", format!("{}{span}", e.message()))]
    })
}

fn check_alpha(field: String, a: f64, errors: &mut Vec<ConfigError>) {
    if !(a.is_finite() && (0.0..1.0).contains(&a)) {
        errors.push(ConfigError::new(field, format!("alpha must lie in [0,1), got {a}")));
    }
}

impl ExperimentConfig {
    /// Structural validation; every failure is collected before returning.
    pub fn validate(self) -> Result<Experiment, Vec<ConfigError>> {
        let mut errors = Vec::new();

        if self.alphas.is_empty() {
            errors.push(ConfigError::new("alphas", "at least one alpha is required"));
        }
        for (i, &a) in self.alphas.iter().enumerate() {
            check_alpha(format!("alphas[{i}]"), a, &mut errors);
        }

        let n_grid = match &self.n_grid {
            NGrid::List(v) => v.clone(),
            NGrid::Shorthand(s) => parse_n_grid(s).unwrap_or_else(|e| {
                errors.push(ConfigError::new("n_grid", e));
                Vec::new()
            }),
        };
        if n_grid.is_empty() && !errors.iter().any(|e| e.field == "n_grid") {
            errors.push(ConfigError::new("n_grid", "grid is empty"));
        }
        if n_grid.first() == Some(&0) {
            errors.push(ConfigError::new("n_grid[0]", "batch sizes must be >= 1"));
        }
        if n_grid.windows(2).any(|w| w[1] <= w[0]) {
            errors.push(ConfigError::new("n_grid", "values must be strictly increasing"));
        }

        let mut estimators = Vec::new();
        if self.estimators.is_empty() {
            errors.push(ConfigError::new("estimators", "at least one estimator is required"));
        }
        for (i, name) in self.estimators.iter().enumerate() {
            match name.parse::<EstimatorKind>() {
                Ok(k) => estimators.push(k),
                Err(e) => errors.push(ConfigError::new(format!("estimators[{i}]"), e.to_string())),
            }
        }
        if self.command == Command::GaussianVerify {
            for (i, k) in estimators.iter().enumerate() {
                if iwvi::analytic::VarianceKind::try_from(*k).is_err() {
                    errors.push(ConfigError::new(format!("estimators[{i}]"), format!("no analytic prediction for `{k}`")));
                }
            }
        }

        if self.replicates < 2 {
            errors.push(ConfigError::new("replicates", format!("must be >= 2, got {}", self.replicates)));
        }
        if self.workers == Some(0) {
            errors.push(ConfigError::new("workers", "must be >= 1"));
        }

        if let Some(ladder) = &self.anneal.ladder {
            if ladder.is_empty() {
                errors.push(ConfigError::new("anneal.ladder", "ladder is empty"));
            }
            for (i, &a) in ladder.iter().enumerate() {
                check_alpha(format!("anneal.ladder[{i}]"), a, &mut errors);
            }
            if ladder.windows(2).any(|w| w[1] >= w[0]) {
                errors.push(ConfigError::new("anneal.ladder", "values must be strictly decreasing"));
            }
        }
        let tau = self.anneal.ess_threshold;
        if !(tau > 0.0 && tau <= 1.0) {
            errors.push(ConfigError::new("anneal.ess_threshold", format!("must lie in (0,1], got {tau}")));
        }

        let opt = &self.optimize;
        if opt.n == 0 {
            errors.push(ConfigError::new("optimize.n", "batch size must be >= 1"));
        }
        if let Err(e) = opt.step.validate() {
            errors.push(ConfigError::new("optimize.step", e.to_string()));
        }
        if let Some(stop) = opt.grad_norm_stop {
            if stop.window == 0 || !(stop.threshold > 0.0) {
                errors.push(ConfigError::new("optimize.grad_norm_stop", "needs window >= 1 and threshold > 0"));
            }
        }
        if opt.star_subsample == Some(0) {
            errors.push(ConfigError::new("optimize.star_subsample", "must be >= 1"));
        }
        if opt.posterior_draws < 2 {
            errors.push(ConfigError::new("optimize.posterior_draws", "must be >= 2"));
        }
        if !(self.verify.tolerance > 0.0) {
            errors.push(ConfigError::new("verify.tolerance", "must be > 0"));
        }

        let model = self.resolve_model(&mut errors);
        let needs = match self.command {
            Command::Optimize | Command::GaussianVerify => Some("gaussian"),
            Command::SsmFit => Some("svol"),
            _ => None,
        };
        let is_gaussian = matches!(self.model, ModelSpec::Gaussian { .. });
        match needs {
            Some("gaussian") if !is_gaussian => errors.push(ConfigError::new(
                "model.kind",
                format!("`{}` needs a gaussian model", self.command.name()),
            )),
            Some("svol") if is_gaussian => {
                errors.push(ConfigError::new("model.kind", "`ssm-fit` needs an svol model"))
            }
            _ => {}
        }

        let output = self
            .output
            .clone()
            .unwrap_or_else(|| PathBuf::from(format!("runs/{}-seed{}", self.command.name(), self.seed)));
        if output.exists() {
            errors.push(ConfigError::new(
                "output",
                format!("`{}` already exists; refusing to overwrite", output.display()),
            ));
        }

        if !errors.is_empty() {
            return Err(errors);
        }
        Ok(Experiment { model: model.expect("no errors"), config: self, output, estimators, n_grid })
    }

    fn resolve_model(&self, errors: &mut Vec<ConfigError>) -> Option<ResolvedModel> {
        let before = errors.len();
        let model = match &self.model {
            ModelSpec::Gaussian { theta, phi, d } => {
                let d = d.unwrap_or(theta.len().max(phi.len()));
                if d == 0 {
                    errors.push(ConfigError::new("model.d", "dimension must be >= 1"));
                }
                let mut broadcast = |name: &str, v: &[f64]| -> Vec<f64> {
                    if v.iter().any(|x| !x.is_finite()) {
                        errors.push(ConfigError::new(format!("model.{name}"), "values must be finite"));
                    }
                    match v.len() {
                        1 => vec![v[0]; d],
                        n if n == d => v.to_vec(),
                        n => {
                            errors.push(ConfigError::new(format!("model.{name}"), format!("has {n} values, expected 1 or {d}")));
                            Vec::new()
                        }
                    }
                };
                let theta = broadcast("theta", theta);
                let phi = broadcast("phi", phi);
                ResolvedModel::Gaussian { theta, phi }
            }
            ModelSpec::Svol { data, simulate, particles, prior, observation, q_mean, q_sd } => {
                let series = match (data, simulate) {
                    (Some(_), Some(_)) => {
                        errors.push(ConfigError::new("model", "give either `data` or `simulate`, not both"));
                        None
                    }
                    (None, None) => {
                        errors.push(ConfigError::new("model", "one of `data` or `simulate` is required"));
                        None
                    }
                    (Some(path), None) => {
                        if !Path::new(path).is_file() {
                            errors.push(ConfigError::new("model.data", format!("file `{}` does not exist", path.display())));
                        }
                        Some(SeriesSource::File(path.clone()))
                    }
                    (None, Some(sim)) => {
                        let params = SvParams::new(sim.beta0, sim.beta1, sim.sigma2).map_err(|e| {
                            errors.push(ConfigError::new("model.simulate", e.to_string()));
                        });
                        if sim.length == 0 {
                            errors.push(ConfigError::new("model.simulate.length", "must be >= 1"));
                        }
                        params.ok().map(|params| SeriesSource::Simulate {
                            params,
                            length: sim.length,
                            seed: sim.seed.unwrap_or(self.seed),
                        })
                    }
                };
                if *particles < 2 {
                    errors.push(ConfigError::new("model.particles", format!("must be >= 2, got {particles}")));
                }
                if let SvPrior::Gaussian { sd, mean } = prior {
                    if sd.iter().any(|s| !(s.is_finite() && *s > 0.0)) || mean.iter().any(|m| !m.is_finite()) {
                        errors.push(ConfigError::new("model.prior", "needs finite means and positive sds"));
                    }
                }
                if q_mean.len() != 3 || q_mean.iter().any(|m| !m.is_finite()) {
                    errors.push(ConfigError::new("model.q_mean", "needs 3 finite values"));
                }
                if q_sd.len() != 3 || q_sd.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                    errors.push(ConfigError::new("model.q_sd", "needs 3 positive values"));
                }
                series.map(|series| ResolvedModel::Svol {
                    series,
                    particles: *particles,
                    prior: *prior,
                    observation: *observation,
                    q_mean: q_mean.clone(),
                    q_sd: q_sd.clone(),
                })?
            }
        };
        (errors.len() == before).then_some(model)
    }
}

impl Experiment {
    /// Ladder used by the optimizer: `anneal.ladder`, or the first alpha held fixed.
    pub fn alpha_ladder(&self) -> Vec<f64> {
        self.config.anneal.ladder.clone().unwrap_or_else(|| vec![self.config.alphas[0]])
    }
}

/// The default ladder, for flag parsing.
pub fn default_ladder() -> Vec<f64> {
    DEFAULT_ALPHA_LADDER.to_vec()
}
