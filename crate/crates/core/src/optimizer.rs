//! Stochastic gradient ascent on the VR-IWAE bound.
//!
//! Each iteration draws a fresh batch on its own derived stream, evaluates the
//! (optionally tempered) log weights, asks the estimator for a gradient and
//! takes an ascent step. `alpha` walks down a ladder whenever the effective
//! sample size of the current batch exceeds `tau * N`; the likelihood
//! temperature `beta` follows `min(1, 0.001 + t / 100000)` when enabled.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bounds::{ess, vr_iwae_estimate};
use crate::error::{Error, Result};
use crate::estimators::{Estimator, EstimatorKind, GradientEstimate};
use crate::model::{
    draw_batch, eval_log_weights_tempered, eval_scores_tempered, Alpha, LogWeightBatch, Model, ParamVector,
    ScoreMatrix,
};
use crate::rng::{Purpose, SeedRecord};

/// Default descent ladder for `alpha`.
pub const DEFAULT_ALPHA_LADDER: [f64; 7] = [0.99, 0.9, 0.7, 0.5, 0.3, 0.1, 0.0];

/// Likelihood temperature at iteration `t`.
pub fn beta_schedule(t: usize) -> f64 {
    (0.001 + t as f64 / 100_000.0).min(1.0)
}

/// Annealing state carried between iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnealState {
    pub alpha: Alpha,
    pub beta: f64,
    pub ess_threshold_frac: f64,
    pub alpha_ladder: Vec<Alpha>,
    /// Index of `alpha` in the ladder.
    pub rung: usize,
    pub step_index: usize,
    pub tempering: bool,
}

impl AnnealState {
    /// A fixed `alpha`, no tempering.
    pub fn fixed(alpha: Alpha) -> Self {
        Self {
            alpha,
            beta: 1.0,
            ess_threshold_frac: 0.5,
            alpha_ladder: vec![alpha],
            rung: 0,
            step_index: 0,
            tempering: false,
        }
    }

    /// Starts at the top of `ladder`, which must be strictly decreasing.
    pub fn with_ladder(ladder: &[f64], ess_threshold_frac: f64) -> Result<Self> {
        if ladder.is_empty() {
            return Err(Error::InvalidArgument("alpha ladder is empty".into()));
        }
        if !(ess_threshold_frac > 0.0 && ess_threshold_frac < 1.0) {
            return Err(Error::InvalidArgument(format!("ESS threshold must lie in (0,1), got {ess_threshold_frac}")));
        }
        if ladder.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidArgument("alpha ladder must be strictly decreasing".into()));
        }
        let alpha_ladder = ladder.iter().map(|&a| Alpha::new(a)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            alpha: alpha_ladder[0],
            beta: 1.0,
            ess_threshold_frac,
            alpha_ladder,
            rung: 0,
            step_index: 0,
            tempering: false,
        })
    }

    /// Turns the likelihood-temperature schedule on or off.
    pub fn with_tempering(mut self, on: bool) -> Self {
        self.tempering = on;
        self.beta = if on { beta_schedule(self.step_index) } else { 1.0 };
        self
    }

    /// Advances the iteration counter and the temperature.
    pub fn tick(&self) -> Self {
        let mut next = self.clone();
        next.step_index += 1;
        if next.tempering {
            next.beta = beta_schedule(next.step_index);
        }
        next
    }

    pub fn at_final_rung(&self) -> bool {
        self.rung + 1 >= self.alpha_ladder.len()
    }
}

/// Moves `alpha` one rung down when `ess_value > tau * n`. Never moves up.
pub fn alpha_anneal_step(ess_value: f64, n: usize, anneal: &AnnealState) -> AnnealState {
    let mut next = anneal.clone();
    if ess_value > anneal.ess_threshold_frac * n as f64 && !anneal.at_final_rung() {
        next.rung += 1;
        next.alpha = next.alpha_ladder[next.rung];
    }
    next
}

/// Step-size schedules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StepSchedule {
    Constant { size: f64 },
    /// `size / sqrt(t + 1)`
    InvSqrt { size: f64 },
    /// `size / (1 + t / decay)`
    InverseTime { size: f64, decay: f64 },
}

impl StepSchedule {
    pub fn at(&self, t: usize) -> f64 {
        let t = t as f64;
        match *self {
            StepSchedule::Constant { size } => size,
            StepSchedule::InvSqrt { size } => size / (t + 1.0).sqrt(),
            StepSchedule::InverseTime { size, decay } => size / (1.0 + t / decay),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (size, decay) = match *self {
            StepSchedule::Constant { size } | StepSchedule::InvSqrt { size } => (size, 1.0),
            StepSchedule::InverseTime { size, decay } => (size, decay),
        };
        if !(size.is_finite() && size >= 0.0) {
            return Err(Error::InvalidArgument(format!("step size must be finite and >= 0, got {size}")));
        }
        if !(decay.is_finite() && decay > 0.0) {
            return Err(Error::InvalidArgument(format!("step decay must be finite and > 0, got {decay}")));
        }
        Ok(())
    }
}

/// Anything that turns a batch into a gradient. [`Estimator`] is the real
/// implementation; tests plug in stubs.
pub trait GradientSource {
    fn estimate(&mut self, logw: &LogWeightBatch, scores: &ScoreMatrix, log_mean_weight: Option<f64>)
        -> Result<GradientEstimate>;

    /// Whether an independent earlier batch must be supplied before the next call.
    fn needs_previous_batch(&self) -> bool {
        false
    }

    fn prime(&mut self, _logw: LogWeightBatch, _scores: ScoreMatrix) {}
}

impl GradientSource for Estimator {
    fn estimate(
        &mut self,
        logw: &LogWeightBatch,
        scores: &ScoreMatrix,
        log_mean_weight: Option<f64>,
    ) -> Result<GradientEstimate> {
        Estimator::estimate(self, logw, scores, log_mean_weight)
    }

    fn needs_previous_batch(&self) -> bool {
        Estimator::needs_previous_batch(self)
    }

    fn prime(&mut self, logw: LogWeightBatch, scores: ScoreMatrix) {
        Estimator::prime(self, logw, scores)
    }
}

/// One row of a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub iter: usize,
    /// Parameters after this iteration's update (before any update for the initial record).
    pub params: Vec<f64>,
    pub grad_norm: f64,
    pub ess: f64,
    pub bound: f64,
    /// The alpha and beta the gradient was computed at.
    pub alpha: f64,
    pub beta: f64,
    pub step_size: f64,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "kebab-case")]
pub enum StopReason {
    Completed,
    GradientNorm { threshold: f64, window: usize },
    Failed { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub names: Vec<String>,
    /// Record 0 is the initial state; record `t` follows iteration `t`.
    pub records: Vec<TrajectoryRecord>,
    pub stop: StopReason,
    pub terminal_alpha: f64,
}

/// Which coordinates move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateScope {
    /// Every coordinate.
    #[default]
    All,
    /// Only the variational parameters; theta stays at its initial value.
    PhiOnly,
}

/// Stop when the norm of the gradient averaged over the last `window` iterations falls below `threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradNormStop {
    pub threshold: f64,
    pub window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgaConfig {
    pub estimator: EstimatorKind,
    pub n: usize,
    pub iterations: usize,
    pub step: StepSchedule,
    pub seed: u64,
    /// Ladder of alpha values; a single entry means fixed alpha.
    pub alpha_ladder: Vec<f64>,
    pub ess_threshold_frac: f64,
    pub tempering: bool,
    pub scope: UpdateScope,
    pub grad_norm_stop: Option<GradNormStop>,
    pub star_subsample: Option<usize>,
}

impl SgaConfig {
    /// Fixed alpha, constant step, every coordinate updated.
    pub fn new(estimator: EstimatorKind, n: usize, alpha: f64, iterations: usize, step: f64, seed: u64) -> Self {
        Self {
            estimator,
            n,
            iterations,
            step: StepSchedule::Constant { size: step },
            seed,
            alpha_ladder: vec![alpha],
            ess_threshold_frac: 0.5,
            tempering: false,
            scope: UpdateScope::All,
            grad_norm_stop: None,
            star_subsample: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::BatchTooSmall { min: 1, got: 0 });
        }
        self.step.validate()?;
        if let Some(stop) = self.grad_norm_stop {
            if stop.window == 0 || !(stop.threshold > 0.0) {
                return Err(Error::InvalidArgument("gradient-norm stop needs window >= 1 and threshold > 0".into()));
            }
        }
        AnnealState::with_ladder(&self.alpha_ladder, self.ess_threshold_frac).map(|_| ())
    }

    pub fn anneal_state(&self) -> Result<AnnealState> {
        Ok(AnnealState::with_ladder(&self.alpha_ladder, self.ess_threshold_frac)?.with_tempering(self.tempering))
    }
}

/// Latent stream of iteration `t`.
pub fn iteration_seed(root: u64, t: usize) -> SeedRecord {
    SeedRecord::new(root, t as u64, Purpose::Latents)
}

/// One ascent step at iteration `anneal.step_index`.
#[allow(clippy::too_many_arguments)]
pub fn sga_step<M: Model, G: GradientSource>(
    model: &M,
    params: &ParamVector,
    estimator: &mut G,
    n: usize,
    anneal: &AnnealState,
    step_size: f64,
    seed: SeedRecord,
    scope: UpdateScope,
) -> Result<(ParamVector, AnnealState, TrajectoryRecord, GradientEstimate)> {
    if !(step_size.is_finite() && step_size >= 0.0) {
        return Err(Error::InvalidArgument(format!("step size must be finite and >= 0, got {step_size}")));
    }
    let start = Instant::now();
    let t = anneal.step_index;
    let (alpha, beta) = (anneal.alpha, anneal.beta);
    if estimator.needs_previous_batch() {
        let prev = draw_batch(model, params, n, seed.child(0, Purpose::PreviousBatch))?;
        let lw = eval_log_weights_tempered(model, params, &prev, alpha, beta)?;
        estimator.prime(lw, eval_scores_tempered(model, params, &prev, beta));
    }
    let batch = draw_batch(model, params, n, seed)?;
    let logw = eval_log_weights_tempered(model, params, &batch, alpha, beta)?;
    let scores = eval_scores_tempered(model, params, &batch, beta);
    let log_mean = if beta == 1.0 { model.log_mean_weight(params, alpha) } else { None };
    let grad = estimator.estimate(&logw, &scores, log_mean).map_err(|e| match e {
        Error::NonFiniteEstimate { coordinate } => Error::NonFiniteGradient { iteration: t, coordinate },
        other => other,
    })?;
    if let Some(coordinate) = grad.grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { iteration: t, coordinate });
    }
    let first = match scope {
        UpdateScope::All => 0,
        UpdateScope::PhiOnly => params.layout().theta_dim(),
    };
    let mut values = params.values().to_vec();
    for (v, g) in values.iter_mut().zip(&grad.grad).skip(first) {
        *v += step_size * g;
    }
    let next = params.with_values(values)?;
    let ess_value = ess(&logw);
    let record = TrajectoryRecord {
        iter: t + 1,
        params: next.values().to_vec(),
        grad_norm: grad.norm(),
        ess: ess_value,
        bound: vr_iwae_estimate(&logw),
        alpha: alpha.get(),
        beta,
        step_size,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    let anneal_next = alpha_anneal_step(ess_value, n, anneal).tick();
    Ok((next, anneal_next, record, grad))
}

/// Runs `config.iterations` ascent steps (or fewer with a gradient-norm stop).
/// A failing step ends the run; the trajectory up to that point is returned
/// with [`StopReason::Failed`].
pub fn run_sga<M: Model>(model: &M, init: &ParamVector, config: &SgaConfig) -> Result<Trajectory> {
    let estimator = Estimator::new(config.estimator).with_star_subsample(config.star_subsample);
    run_sga_with(model, init, config, estimator)
}

/// [`run_sga`] with a caller-supplied gradient source.
pub fn run_sga_with<M: Model, G: GradientSource>(
    model: &M,
    init: &ParamVector,
    config: &SgaConfig,
    mut estimator: G,
) -> Result<Trajectory> {
    config.validate()?;
    init.validate()?;
    let start = Instant::now();
    let mut anneal = config.anneal_state()?;
    let mut params = init.clone();
    let mut records = vec![TrajectoryRecord {
        iter: 0,
        params: params.values().to_vec(),
        grad_norm: f64::NAN,
        ess: f64::NAN,
        bound: f64::NAN,
        alpha: anneal.alpha.get(),
        beta: anneal.beta,
        step_size: 0.0,
        elapsed_ms: 0.0,
    }];
    let mut window: VecDeque<Vec<f64>> = VecDeque::new();
    let mut stop = StopReason::Completed;
    for t in 0..config.iterations {
        let step = config.step.at(t);
        match sga_step(model, &params, &mut estimator, config.n, &anneal, step, iteration_seed(config.seed, t), config.scope) {
            Ok((p, a, mut rec, grad)) => {
                rec.elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
                params = p;
                anneal = a;
                records.push(rec);
                if let Some(rule) = config.grad_norm_stop {
                    window.push_back(grad.grad);
                    if window.len() > rule.window {
                        window.pop_front();
                    }
                    if window.len() == rule.window && averaged_norm(&window) < rule.threshold {
                        stop = StopReason::GradientNorm { threshold: rule.threshold, window: rule.window };
                        break;
                    }
                }
            }
            Err(e) => {
                stop = StopReason::Failed { message: e.to_string() };
                break;
            }
        }
    }
    Ok(Trajectory { names: init.layout().names().to_vec(), records, stop, terminal_alpha: anneal.alpha.get() })
}

fn averaged_norm(window: &VecDeque<Vec<f64>>) -> f64 {
    let m = window.len() as f64;
    let dim = window[0].len();
    (0..dim)
        .map(|k| {
            let mean = window.iter().map(|g| g[k]).sum::<f64>() / m;
            mean * mean
        })
        .sum::<f64>()
        .sqrt()
}

impl Trajectory {
    /// Number of ascent steps taken.
    pub fn iterations(&self) -> usize {
        self.records.len() - 1
    }

    pub fn last(&self) -> &TrajectoryRecord {
        self.records.last().expect("trajectory always holds the initial record")
    }

    pub fn final_params(&self) -> &[f64] {
        &self.last().params
    }

    pub fn failed(&self) -> bool {
        matches!(self.stop, StopReason::Failed { .. })
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "iter")?;
        for name in &self.names {
            write!(out, ",{name}")?;
        }
        writeln!(out, ",grad_norm,ess,bound,alpha,beta,step_size,elapsed_ms")?;
        for r in &self.records {
            write!(out, "{}", r.iter)?;
            for v in &r.params {
                write!(out, ",{v}")?;
            }
            writeln!(
                out,
                ",{},{},{},{},{},{},{}",
                r.grad_norm, r.ess, r.bound, r.alpha, r.beta, r.step_size, r.elapsed_ms
            )?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(csv_path)?);
        self.write_csv(&mut f)?;
        f.flush()?;
        std::fs::write(json_path, self.to_json()?)?;
        Ok(())
    }
}
