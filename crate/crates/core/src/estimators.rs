//! REINFORCE gradient estimators of the VR-IWAE bound.
//!
//! Every estimator here has the form
//!
//! ```text
//! sum_j wbar_j d log w(z_j)  -  1/(1-alpha) sum_i d log q(z_i) * L_i
//! ```
//!
//! and they only differ in the per-sample multiplier `L_i`. For the VIMCO
//! family `L_i = log(1 - wbar_i + f_{-i} / sum_j w_j^{1-alpha})` where `f_{-i}`
//! is a nonnegative control variate that does not depend on `z_i`. The naive
//! estimator uses minus the bound sample instead, with no baseline at all.
//!
//! All multipliers are evaluated in the log domain:
//! `1 - wbar_i + f/S = (S_{-i} + f) / S`, with `log S_{-i}` taken from
//! prefix/suffix log-sum-exps, so a batch dominated by a single weight does not
//! lose the leave-one-out sums to cancellation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bounds::{leave_one_out_logsumexp, log_add_exp, logsumexp, powered_log_weights};
use crate::error::{Error, Result};
use crate::model::{Alpha, LogWeightBatch, ScoreMatrix};

/// Below this centered second moment of the scores the optimal baseline falls back to zero.
pub const SCORE_VARIANCE_FLOOR: f64 = 1e-12;

/// The control variate plugged into the score term.
#[derive(Debug, Clone, PartialEq)]
pub enum BaselineKind {
    /// No baseline: the naive REINFORCE estimator.
    None,
    /// Global baseline from the exact `log E[w^{1-alpha}]`.
    Inter { log_mean_weight: f64 },
    /// Leave-one-out arithmetic mean of `w^{1-alpha}`.
    Am,
    /// Leave-one-out geometric mean of `w^{1-alpha}`.
    Gm,
    /// A constant `eta >= 0`.
    ConstEta(f64),
    /// Leave-one-out plug-in of the variance-optimal constant, per coordinate.
    /// `subsample` restricts the statistics to the first `N0` samples.
    StarLeaveOneOut { subsample: Option<usize> },
    /// Optimal constant estimated on an earlier, independent batch; one
    /// `log eta` per phi coordinate (`-inf` for zero).
    StarPrevBatch { log_eta: Vec<f64> },
    /// The `alpha = 0` form where the optimal constant is exactly zero.
    StarAlphaZero,
}

/// User-facing estimator names, as they appear in configs and reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum EstimatorKind {
    Naive,
    Inter,
    Am,
    Gm,
    ConstEta(f64),
    Star,
    StarPrev,
    StarAlpha0,
    /// Leave-one-out ELBO estimator (the `alpha -> 1` limit); ignores alpha.
    Elbo,
}

impl EstimatorKind {
    /// The VIMCO kinds whose baseline is built from the batch itself.
    pub const SNR_KINDS: [EstimatorKind; 3] = [EstimatorKind::Am, EstimatorKind::Gm, EstimatorKind::Star];

    pub fn is_star(self) -> bool {
        matches!(self, EstimatorKind::Star | EstimatorKind::StarPrev | EstimatorKind::StarAlpha0)
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EstimatorKind::Naive => f.write_str("naive"),
            EstimatorKind::Inter => f.write_str("inter"),
            EstimatorKind::Am => f.write_str("am"),
            EstimatorKind::Gm => f.write_str("gm"),
            EstimatorKind::ConstEta(eta) => write!(f, "const-eta:{eta}"),
            EstimatorKind::Star => f.write_str("star"),
            EstimatorKind::StarPrev => f.write_str("star-prev"),
            EstimatorKind::StarAlpha0 => f.write_str("star-alpha0"),
            EstimatorKind::Elbo => f.write_str("elbo"),
        }
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let kind = match s.trim().to_ascii_lowercase().as_str() {
            "naive" => EstimatorKind::Naive,
            "inter" => EstimatorKind::Inter,
            "am" | "vimco-am" => EstimatorKind::Am,
            "gm" | "vimco-gm" => EstimatorKind::Gm,
            "star" | "vimco-star" => EstimatorKind::Star,
            "star-prev" => EstimatorKind::StarPrev,
            "star-alpha0" => EstimatorKind::StarAlpha0,
            "elbo" => EstimatorKind::Elbo,
            other => {
                let eta = other
                    .strip_prefix("const-eta:")
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown estimator `{s}`")))?;
                if !(eta.is_finite() && eta >= 0.0) {
                    return Err(Error::InvalidArgument(format!("const-eta needs a finite eta >= 0, got {eta}")));
                }
                EstimatorKind::ConstEta(eta)
            }
        };
        Ok(kind)
    }
}

impl TryFrom<String> for EstimatorKind {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<EstimatorKind> for String {
    fn from(k: EstimatorKind) -> String {
        k.to_string()
    }
}

/// One gradient estimate over every parameter coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub grad: Vec<f64>,
    pub kind: EstimatorKind,
    pub n: usize,
    pub alpha: Alpha,
    /// Per phi coordinate, the optimal-baseline value used (mean over `i` for
    /// the leave-one-out version). Only set for the star kinds.
    pub aux: Option<Vec<f64>>,
}

impl GradientEstimate {
    pub fn norm(&self) -> f64 {
        self.grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

fn kind_of(baseline: &BaselineKind) -> EstimatorKind {
    match baseline {
        BaselineKind::None => EstimatorKind::Naive,
        BaselineKind::Inter { .. } => EstimatorKind::Inter,
        BaselineKind::Am => EstimatorKind::Am,
        BaselineKind::Gm => EstimatorKind::Gm,
        BaselineKind::ConstEta(eta) => EstimatorKind::ConstEta(*eta),
        BaselineKind::StarLeaveOneOut { .. } => EstimatorKind::Star,
        BaselineKind::StarPrevBatch { .. } => EstimatorKind::StarPrev,
        BaselineKind::StarAlphaZero => EstimatorKind::StarAlpha0,
    }
}

/// Log-domain summaries of a batch shared by all estimators.
struct WeightStats {
    /// `(1-alpha) log w_i`
    u: Vec<f64>,
    max_u: f64,
    /// `log S`, `S = sum_j w_j^{1-alpha}`
    log_s: f64,
    /// `log S_{-i}`
    log_s_loo: Vec<f64>,
    wbar: Vec<f64>,
}

impl WeightStats {
    fn new(logw: &LogWeightBatch) -> Self {
        let u = powered_log_weights(logw);
        let max_u = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_s = logsumexp(&u);
        let log_s_loo = leave_one_out_logsumexp(&u);
        let wbar = u.iter().map(|&v| (v - log_s).exp()).collect();
        Self { u, max_u, log_s, log_s_loo, wbar }
    }

    /// `w_i^{1-alpha} / max_j w_j^{1-alpha}`
    fn scaled_weights(&self) -> Vec<f64> {
        self.u.iter().map(|&v| (v - self.max_u).exp()).collect()
    }

    /// `log(1 - wbar_i + f_{-i}/S)` from `log f_{-i}`.
    fn log_argument(&self, i: usize, log_f: f64) -> Result<f64> {
        let v = log_add_exp(self.log_s_loo[i], log_f) - self.log_s;
        if v == f64::NEG_INFINITY || v.is_nan() {
            return Err(Error::NonPositiveBaselineArgument { index: i, value: 0.0 });
        }
        Ok(v)
    }
}

fn check_shapes(logw: &LogWeightBatch, scores: &ScoreMatrix) -> Result<()> {
    if logw.n() != scores.n() {
        return Err(Error::DimensionMismatch { expected: logw.n(), got: scores.n() });
    }
    Ok(())
}

/// `sum_j wbar_j d log w_j` for every coordinate.
fn weighted_score_term(wbar: &[f64], scores: &ScoreMatrix) -> Vec<f64> {
    let mut g = vec![0.0; scores.dim()];
    for (j, &wj) in wbar.iter().enumerate() {
        for (psi, gp) in g.iter_mut().enumerate() {
            *gp += wj * scores.w(j, psi);
        }
    }
    g
}

/// Subtracts `1/(1-alpha) sum_i d log q_i * mult(i)` on the phi block.
fn subtract_score_term(g: &mut [f64], scores: &ScoreMatrix, power: f64, mut mult: impl FnMut(usize, usize) -> f64) {
    let a = scores.theta_dim();
    for k in 0..scores.phi_dim() {
        let s: f64 = (0..scores.n()).map(|i| scores.q(i, k) * mult(i, k)).sum();
        g[a + k] -= s / power;
    }
}

fn finish(grad: Vec<f64>, kind: EstimatorKind, logw: &LogWeightBatch, aux: Option<Vec<f64>>) -> Result<GradientEstimate> {
    if let Some(coordinate) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteEstimate { coordinate });
    }
    Ok(GradientEstimate { grad, kind, n: logw.n(), alpha: logw.alpha(), aux })
}

/// Naive REINFORCE: the score term is weighted by the bound sample itself.
pub fn naive_grad(logw: &LogWeightBatch, scores: &ScoreMatrix) -> Result<GradientEstimate> {
    vimco_grad(logw, scores, &BaselineKind::None)
}

/// Naive REINFORCE with the exact global baseline `log E[w^{1-alpha}] / (1-alpha)`.
pub fn inter_grad(logw: &LogWeightBatch, scores: &ScoreMatrix, log_norm_const: f64) -> Result<GradientEstimate> {
    vimco_grad(logw, scores, &BaselineKind::Inter { log_mean_weight: log_norm_const })
}

/// The `alpha = 0` optimal-baseline estimator
/// `sum_j [wbar_j d log w_j - log(1 - wbar_j) d log q_j]`.
pub fn vimco_star_alpha0(logw: &LogWeightBatch, scores: &ScoreMatrix) -> Result<GradientEstimate> {
    vimco_grad(logw, scores, &BaselineKind::StarAlphaZero)
}

/// The generalized VIMCO estimator for any baseline kind.
pub fn vimco_grad(logw: &LogWeightBatch, scores: &ScoreMatrix, kind: &BaselineKind) -> Result<GradientEstimate> {
    check_shapes(logw, scores)?;
    let n = logw.n();
    let power = logw.alpha().power();
    let stats = WeightStats::new(logw);
    let mut g = weighted_score_term(&stats.wbar, scores);
    let mut aux = None;

    match kind {
        BaselineKind::None | BaselineKind::Inter { .. } => {
            // log((1/N) sum w^{1-alpha}); the 1/(1-alpha) is applied by the score term
            let log_mean = stats.log_s - (n as f64).ln();
            let residual = match kind {
                BaselineKind::Inter { log_mean_weight } => log_mean - log_mean_weight,
                _ => log_mean,
            };
            subtract_score_term(&mut g, scores, power, |_, _| -residual);
        }
        BaselineKind::Am => {
            require_n(n, 2)?;
            let log_ratio = (n as f64 / (n - 1) as f64).ln();
            let mult: Vec<f64> = stats.log_s_loo.iter().map(|l| l + log_ratio - stats.log_s).collect();
            subtract_score_term(&mut g, scores, power, |i, _| mult[i]);
        }
        BaselineKind::Gm => {
            require_n(n, 2)?;
            let total: f64 = stats.u.iter().sum();
            let mult = (0..n)
                .map(|i| stats.log_argument(i, (total - stats.u[i]) / (n - 1) as f64))
                .collect::<Result<Vec<_>>>()?;
            subtract_score_term(&mut g, scores, power, |i, _| mult[i]);
        }
        BaselineKind::ConstEta(eta) => {
            if !(eta.is_finite() && *eta >= 0.0) {
                return Err(Error::InvalidArgument(format!("eta must be finite and >= 0, got {eta}")));
            }
            let log_eta = eta.ln();
            let mult = (0..n).map(|i| stats.log_argument(i, log_eta)).collect::<Result<Vec<_>>>()?;
            subtract_score_term(&mut g, scores, power, |i, _| mult[i]);
        }
        BaselineKind::StarAlphaZero => {
            if !logw.alpha().is_zero() {
                return Err(Error::AlphaMismatch { kind: "star-alpha0", required: 0.0, got: logw.alpha().get() });
            }
            require_n(n, 2)?;
            let mult: Vec<f64> = stats.log_s_loo.iter().map(|l| l - stats.log_s).collect();
            subtract_score_term(&mut g, scores, power, |i, _| mult[i]);
            aux = Some(vec![0.0; scores.phi_dim()]);
        }
        BaselineKind::StarLeaveOneOut { subsample } => {
            require_n(n, 2)?;
            let alpha = logw.alpha().get();
            let m = subsample.unwrap_or(n);
            if alpha > 0.0 && !(3..=n).contains(&m) {
                return Err(Error::InvalidArgument(format!("star subsample must lie in [3, {n}], got {m}")));
            }
            let v = stats.scaled_weights();
            let mut means = Vec::with_capacity(scores.phi_dim());
            let mut mult = vec![0.0; n * scores.phi_dim()];
            for k in 0..scores.phi_dim() {
                let f_scaled = if alpha > 0.0 {
                    star_leave_one_out_scaled(&v, &column(scores, k), alpha, m)
                } else {
                    vec![0.0; n]
                };
                means.push(f_scaled.iter().map(|f| (f.ln() + stats.max_u).exp()).sum::<f64>() / n as f64);
                for i in 0..n {
                    mult[i * scores.phi_dim() + k] = stats.log_argument(i, f_scaled[i].ln() + stats.max_u)?;
                }
            }
            let b = scores.phi_dim();
            subtract_score_term(&mut g, scores, power, |i, k| mult[i * b + k]);
            aux = Some(means);
        }
        BaselineKind::StarPrevBatch { log_eta } => {
            if log_eta.len() != scores.phi_dim() {
                return Err(Error::DimensionMismatch { expected: scores.phi_dim(), got: log_eta.len() });
            }
            let b = scores.phi_dim();
            let mut mult = vec![0.0; n * b];
            for (k, &le) in log_eta.iter().enumerate() {
                for i in 0..n {
                    mult[i * b + k] = stats.log_argument(i, le)?;
                }
            }
            subtract_score_term(&mut g, scores, power, |i, k| mult[i * b + k]);
            aux = Some(log_eta.iter().map(|l| l.exp()).collect());
        }
    }
    finish(g, kind_of(kind), logw, aux)
}

fn require_n(n: usize, min: usize) -> Result<()> {
    if n < min {
        Err(Error::BatchTooSmall { min, got: n })
    } else {
        Ok(())
    }
}

fn column(scores: &ScoreMatrix, k: usize) -> Vec<f64> {
    (0..scores.n()).map(|i| scores.q(i, k)).collect()
}

/// Running sums `[v s^2, v s, v, s^2, s]`.
type StarSums = [f64; 5];

fn star_terms(v: f64, s: f64) -> StarSums {
    [v * s * s, v * s, v, s * s, s]
}

fn add(a: StarSums, b: StarSums) -> StarSums {
    std::array::from_fn(|t| a[t] + b[t])
}

/// `alpha [a12 - a11^2/a10] / [a02 - a01^2]` from sums over `count` samples, clamped at zero.
fn star_ratio(sums: StarSums, count: usize, alpha: f64) -> f64 {
    let c = count as f64;
    let [a12, a11, a10, a02, a01] = sums.map(|x| x / c);
    let den = a02 - a01 * a01;
    if !(den >= SCORE_VARIANCE_FLOOR) || !(a10 > 0.0) {
        return 0.0;
    }
    let val = alpha * (a12 - a11 * a11 / a10) / den;
    if val.is_finite() {
        val.max(0.0)
    } else {
        0.0
    }
}

/// Leave-one-out optimal baselines on the scale of `v` (weights divided by the
/// largest one). Statistics use the first `m` samples; samples outside that
/// subsample see all `m`, those inside see the other `m - 1`.
fn star_leave_one_out_scaled(v: &[f64], s: &[f64], alpha: f64, m: usize) -> Vec<f64> {
    let n = v.len();
    let mut prefix = vec![[0.0; 5]; m + 1];
    for j in 0..m {
        prefix[j + 1] = add(prefix[j], star_terms(v[j], s[j]));
    }
    let mut suffix = vec![[0.0; 5]; m + 1];
    for j in (0..m).rev() {
        suffix[j] = add(suffix[j + 1], star_terms(v[j], s[j]));
    }
    (0..n)
        .map(|i| {
            if i < m {
                star_ratio(add(prefix[i], suffix[i + 1]), m - 1, alpha)
            } else {
                star_ratio(prefix[m], m, alpha)
            }
        })
        .collect()
}

/// `f_{-i}` of the leave-one-out optimal baseline for coordinate `psi`, on the
/// absolute weight scale. Theta coordinates have no `q` score and give zeros.
pub fn f_star_leave_one_out(logw: &LogWeightBatch, scores: &ScoreMatrix, psi: usize) -> Result<Vec<f64>> {
    check_shapes(logw, scores)?;
    require_n(logw.n(), 3)?;
    let alpha = logw.alpha().get();
    let stats = WeightStats::new(logw);
    let s = scores.q_column(psi);
    let scaled = star_leave_one_out_scaled(&stats.scaled_weights(), &s, alpha, logw.n());
    Ok(scaled.into_iter().map(|f| (f.ln() + stats.max_u).exp()).collect())
}

/// `log` of the plug-in optimal constant for coordinate `psi`, estimated on a
/// whole batch; `-inf` when the estimate is zero.
pub fn log_eta_star_estimate(logw: &LogWeightBatch, scores: &ScoreMatrix, psi: usize) -> Result<f64> {
    check_shapes(logw, scores)?;
    let stats = WeightStats::new(logw);
    let v = stats.scaled_weights();
    let s = scores.q_column(psi);
    let sums = v.iter().zip(&s).fold([0.0; 5], |acc, (&vi, &si)| add(acc, star_terms(vi, si)));
    Ok(star_ratio(sums, logw.n(), logw.alpha().get()).ln() + stats.max_u)
}

/// Plug-in optimal constant for coordinate `psi`, estimated on a whole batch.
pub fn eta_star_estimate(prev_logw: &LogWeightBatch, prev_scores: &ScoreMatrix, psi: usize) -> Result<f64> {
    Ok(log_eta_star_estimate(prev_logw, prev_scores, psi)?.exp())
}

/// Baseline built from an earlier batch, evaluated at `alpha`.
pub fn star_prev_baseline(prev_logw: &LogWeightBatch, prev_scores: &ScoreMatrix, alpha: Alpha) -> Result<BaselineKind> {
    let prev = prev_logw.with_alpha(alpha);
    let a = prev_scores.theta_dim();
    let log_eta = (0..prev_scores.phi_dim())
        .map(|k| log_eta_star_estimate(&prev, prev_scores, a + k))
        .collect::<Result<Vec<_>>>()?;
    Ok(BaselineKind::StarPrevBatch { log_eta })
}

/// Leave-one-out ELBO gradient
/// `1/N sum_j [d log w_j + d log q_j (log w_j - mean_{l != j} log w_l)]`.
/// The batch's alpha is ignored.
pub fn elbo_grad(logw: &LogWeightBatch, scores: &ScoreMatrix) -> Result<GradientEstimate> {
    check_shapes(logw, scores)?;
    let n = logw.n();
    require_n(n, 2)?;
    let lw = logw.log_w();
    let total: f64 = lw.iter().sum();
    let uniform = vec![1.0 / n as f64; n];
    let mut g = weighted_score_term(&uniform, scores);
    let centered: Vec<f64> = lw.iter().map(|&l| l - (total - l) / (n - 1) as f64).collect();
    subtract_score_term(&mut g, scores, 1.0, |i, _| -centered[i] / n as f64);
    finish(g, EstimatorKind::Elbo, logw, None)
}

/// Runs one estimator kind, keeping the previous batch around for
/// [`EstimatorKind::StarPrev`].
#[derive(Debug, Clone)]
pub struct Estimator {
    kind: EstimatorKind,
    star_subsample: Option<usize>,
    previous: Option<(LogWeightBatch, ScoreMatrix)>,
}

impl Estimator {
    pub fn new(kind: EstimatorKind) -> Self {
        Self { kind, star_subsample: None, previous: None }
    }

    /// Estimate the optimal baseline on the first `n0` samples only.
    pub fn with_star_subsample(mut self, n0: Option<usize>) -> Self {
        self.star_subsample = n0;
        self
    }

    pub fn kind(&self) -> EstimatorKind {
        self.kind
    }

    /// True when the next call needs an independent earlier batch first (see [`Estimator::prime`]).
    pub fn needs_previous_batch(&self) -> bool {
        self.kind == EstimatorKind::StarPrev && self.previous.is_none()
    }

    /// Stores a batch to estimate the next baseline from.
    pub fn prime(&mut self, logw: LogWeightBatch, scores: ScoreMatrix) {
        self.previous = Some((logw, scores));
    }

    /// One estimate. `log_mean_weight` is only consulted by INTER.
    pub fn estimate(
        &mut self,
        logw: &LogWeightBatch,
        scores: &ScoreMatrix,
        log_mean_weight: Option<f64>,
    ) -> Result<GradientEstimate> {
        let baseline = match self.kind {
            EstimatorKind::Naive => BaselineKind::None,
            EstimatorKind::Inter => BaselineKind::Inter {
                log_mean_weight: log_mean_weight.ok_or_else(|| {
                    Error::InvalidArgument("inter needs a closed-form log E[w^(1-alpha)]".into())
                })?,
            },
            EstimatorKind::Am => BaselineKind::Am,
            EstimatorKind::Gm => BaselineKind::Gm,
            EstimatorKind::ConstEta(eta) => BaselineKind::ConstEta(eta),
            EstimatorKind::Star => BaselineKind::StarLeaveOneOut { subsample: self.star_subsample },
            EstimatorKind::StarAlpha0 => BaselineKind::StarAlphaZero,
            EstimatorKind::Elbo => return elbo_grad(logw, scores),
            EstimatorKind::StarPrev => {
                let (prev_w, prev_s) = self
                    .previous
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("star-prev has no previous batch".into()))?;
                let baseline = star_prev_baseline(prev_w, prev_s, logw.alpha())?;
                self.previous = Some((logw.clone(), scores.clone()));
                baseline
            }
        };
        vimco_grad(logw, scores, &baseline)
    }
}
