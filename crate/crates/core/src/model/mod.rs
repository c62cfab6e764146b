//! The probabilistic-model interface consumed by the estimators.
//!
//! A model owns its observation `x` and knows how to sample latents from the
//! variational family `q_phi(.|x)`, how to evaluate the pieces of the log
//! importance weight `log w(z;x) = log p_theta(x,z) - log q_phi(z|x)`, and how
//! to evaluate the closed-form scores. Estimators only ever see the resulting
//! [`LogWeightBatch`] and [`ScoreMatrix`].

pub mod gaussian;

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Purpose, SeedRecord};

pub use gaussian::GaussianModel;

/// The `alpha` of the VR-IWAE bound, validated to lie in `[0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Alpha(f64);

impl Alpha {
    pub const ZERO: Alpha = Alpha(0.0);

    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && (0.0..1.0).contains(&value) {
            Ok(Alpha(value))
        } else {
            Err(Error::InvalidAlpha(value))
        }
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }

    /// `1 - alpha`, the exponent applied to the weights.
    #[inline]
    pub fn power(self) -> f64 {
        1.0 - self.0
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0.0
    }
}

impl TryFrom<f64> for Alpha {
    type Error = Error;
    fn try_from(value: f64) -> Result<Self> {
        Alpha::new(value)
    }
}

impl From<Alpha> for f64 {
    fn from(a: Alpha) -> f64 {
        a.0
    }
}

/// Names of the parameter coordinates. The first `theta_dim` belong to the
/// generative model, the remaining ones to the variational family.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    names: Vec<String>,
    theta_dim: usize,
}

impl ParamLayout {
    pub fn new(names: Vec<String>, theta_dim: usize) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::InvalidArgument("parameter layout is empty".into()));
        }
        if theta_dim > names.len() {
            return Err(Error::DimensionMismatch { expected: names.len(), got: theta_dim });
        }
        Ok(Self { names, theta_dim })
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn theta_dim(&self) -> usize {
        self.theta_dim
    }

    pub fn phi_dim(&self) -> usize {
        self.names.len() - self.theta_dim
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn is_phi(&self, index: usize) -> bool {
        index >= self.theta_dim
    }
}

/// A full parameter vector `(theta, phi)`. Every coordinate is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    layout: Arc<ParamLayout>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(layout: Arc<ParamLayout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.dim() {
            return Err(Error::DimensionMismatch { expected: layout.dim(), got: values.len() });
        }
        check_finite(&layout, &values)?;
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn theta(&self) -> &[f64] {
        &self.values[..self.layout.theta_dim()]
    }

    pub fn phi(&self) -> &[f64] {
        &self.values[self.layout.theta_dim()..]
    }

    pub fn get(&self, index: usize) -> f64 {
        self.values[index]
    }

    /// Returns a copy with new values on the same layout.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        ParamVector::new(self.layout.clone(), values)
    }

    /// Sets one coordinate; rejects non-finite values.
    pub fn set(&mut self, index: usize, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFiniteParam { name: self.layout.name(index).to_string(), value });
        }
        self.values[index] = value;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        check_finite(&self.layout, &self.values)
    }
}

fn check_finite(layout: &ParamLayout, values: &[f64]) -> Result<()> {
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFiniteParam { name: layout.name(i).to_string(), value: v });
        }
    }
    Ok(())
}

/// The three log-density pieces entering a log weight at one latent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogParts {
    /// `log p(x|z)` (or an estimate of it); the term multiplied by the likelihood temperature.
    pub log_lik: f64,
    /// `log p(z)`; zero for models that put everything in `log_lik`.
    pub log_prior: f64,
    /// `log q_phi(z|x)`.
    pub log_q: f64,
}

impl LogParts {
    /// `beta * log_lik + log_prior - log_q`.
    #[inline]
    pub fn log_weight(&self, beta: f64) -> f64 {
        beta * self.log_lik + self.log_prior - self.log_q
    }
}

/// A probabilistic model with its observation folded in.
pub trait Model: Sync {
    type Latent: Clone + Send + Sync + std::fmt::Debug;

    fn layout(&self) -> Arc<ParamLayout>;

    /// One draw from `q_phi(.|x)`.
    fn sample_latent<R: Rng + ?Sized>(&self, params: &ParamVector, rng: &mut R) -> Self::Latent;

    /// Log-density pieces at `z`. `rng` feeds models whose likelihood is itself
    /// a Monte Carlo estimate; deterministic models ignore it.
    fn log_parts<R: Rng + ?Sized>(
        &self,
        params: &ParamVector,
        z: &Self::Latent,
        rng: &mut R,
    ) -> Result<LogParts>;

    /// Whether [`Model::log_parts`] consumes randomness.
    fn stochastic_weights(&self) -> bool {
        false
    }

    /// `d/d phi_k log q_phi(z|x)` for every phi coordinate, written to `out` (length `phi_dim`).
    fn q_score(&self, params: &ParamVector, z: &Self::Latent, out: &mut [f64]);

    /// `d/d psi [beta log p(x|z) + log p(z)]` over every coordinate (length `dim`).
    /// Defaults to zero, which is right whenever the joint does not depend on the parameters.
    fn joint_score(&self, params: &ParamVector, z: &Self::Latent, beta: f64, out: &mut [f64]) {
        let _ = (params, z, beta);
        out.iter_mut().for_each(|o| *o = 0.0);
    }

    /// `log E_q[w^{1-alpha}]` when it is known in closed form (at unit temperature).
    fn log_mean_weight(&self, params: &ParamVector, alpha: Alpha) -> Option<f64> {
        let _ = (params, alpha);
        None
    }
}

/// `n` i.i.d. latents drawn from `q_phi` together with the stream that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch<L> {
    pub latents: Vec<L>,
    pub seed: SeedRecord,
}

impl<L> SampleBatch<L> {
    pub fn n(&self) -> usize {
        self.latents.len()
    }
}

/// Log importance weights `log w(z_i;x)` of one batch, all finite, tagged with alpha.
#[derive(Debug, Clone, PartialEq)]
pub struct LogWeightBatch {
    log_w: Vec<f64>,
    alpha: Alpha,
}

impl LogWeightBatch {
    pub fn new(log_w: Vec<f64>, alpha: Alpha) -> Result<Self> {
        if log_w.is_empty() {
            return Err(Error::BatchTooSmall { min: 1, got: 0 });
        }
        if let Some((index, &value)) = log_w.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFiniteLogWeight { index, value });
        }
        Ok(Self { log_w, alpha })
    }

    pub fn log_w(&self) -> &[f64] {
        &self.log_w
    }

    pub fn alpha(&self) -> Alpha {
        self.alpha
    }

    pub fn n(&self) -> usize {
        self.log_w.len()
    }

    pub fn with_alpha(&self, alpha: Alpha) -> Self {
        Self { log_w: self.log_w.clone(), alpha }
    }

    /// The first `n` entries as their own batch.
    pub fn head(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.n() {
            return Err(Error::InvalidArgument(format!("head({n}) of a batch of {}", self.n())));
        }
        Ok(Self { log_w: self.log_w[..n].to_vec(), alpha: self.alpha })
    }
}

/// Per-sample scores. `q` is `n x phi_dim` with entry `(i, k) = d/d phi_k log q(z_i)`;
/// `w` is `n x dim` with entry `(i, psi) = d/d psi log w(z_i)`. Row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    n: usize,
    theta_dim: usize,
    phi_dim: usize,
    q: Vec<f64>,
    w: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(n: usize, theta_dim: usize, phi_dim: usize, q: Vec<f64>, w: Vec<f64>) -> Result<Self> {
        if q.len() != n * phi_dim {
            return Err(Error::DimensionMismatch { expected: n * phi_dim, got: q.len() });
        }
        if w.len() != n * (theta_dim + phi_dim) {
            return Err(Error::DimensionMismatch { expected: n * (theta_dim + phi_dim), got: w.len() });
        }
        Ok(Self { n, theta_dim, phi_dim, q, w })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.theta_dim + self.phi_dim
    }

    pub fn theta_dim(&self) -> usize {
        self.theta_dim
    }

    pub fn phi_dim(&self) -> usize {
        self.phi_dim
    }

    #[inline]
    pub fn q(&self, i: usize, k: usize) -> f64 {
        self.q[i * self.phi_dim + k]
    }

    #[inline]
    pub fn w(&self, i: usize, psi: usize) -> f64 {
        self.w[i * self.dim() + psi]
    }

    /// `d/d psi log q(z_i)` for a full-vector coordinate; zero on theta coordinates.
    #[inline]
    pub fn q_at(&self, i: usize, psi: usize) -> f64 {
        if psi < self.theta_dim {
            0.0
        } else {
            self.q(i, psi - self.theta_dim)
        }
    }

    /// Column of `q_at` for one coordinate.
    pub fn q_column(&self, psi: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.q_at(i, psi)).collect()
    }

    pub fn w_column(&self, psi: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.w(i, psi)).collect()
    }

    /// The first `n` rows.
    pub fn head(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.n {
            return Err(Error::InvalidArgument(format!("head({n}) of a batch of {}", self.n)));
        }
        ScoreMatrix::new(
            n,
            self.theta_dim,
            self.phi_dim,
            self.q[..n * self.phi_dim].to_vec(),
            self.w[..n * self.dim()].to_vec(),
        )
    }
}

/// Draws `n` latents from `q_phi` on the stream identified by `seed`.
pub fn draw_batch<M: Model>(
    model: &M,
    params: &ParamVector,
    n: usize,
    seed: SeedRecord,
) -> Result<SampleBatch<M::Latent>> {
    if n == 0 {
        return Err(Error::BatchTooSmall { min: 1, got: 0 });
    }
    params.validate()?;
    let mut rng = seed.rng();
    let latents = (0..n).map(|_| model.sample_latent(params, &mut rng)).collect();
    Ok(SampleBatch { latents, seed })
}

/// Log weights at unit likelihood temperature.
pub fn eval_log_weights<M: Model>(
    model: &M,
    params: &ParamVector,
    batch: &SampleBatch<M::Latent>,
    alpha: Alpha,
) -> Result<LogWeightBatch> {
    eval_log_weights_tempered(model, params, batch, alpha, 1.0)
}

/// Log weights `beta * log p(x|z) + log p(z) - log q(z)`.
///
/// Stochastic likelihoods get one derived stream per sample and are evaluated
/// in parallel; the result depends only on the batch's seed record.
pub fn eval_log_weights_tempered<M: Model>(
    model: &M,
    params: &ParamVector,
    batch: &SampleBatch<M::Latent>,
    alpha: Alpha,
    beta: f64,
) -> Result<LogWeightBatch> {
    if model.stochastic_weights() {
        let log_w = batch
            .latents
            .par_iter()
            .enumerate()
            .map(|(i, z)| {
                let mut rng = batch.seed.child(i as u64, Purpose::Weights).rng();
                let parts = model.log_parts(params, z, &mut rng)?;
                checked_log_weight(parts.log_weight(beta), i)
            })
            .collect::<Result<Vec<_>>>()?;
        return LogWeightBatch::new(log_w, alpha);
    }
    let mut log_w = Vec::with_capacity(batch.n());
    {
        let mut rng = batch.seed.child(0, Purpose::Weights).rng();
        for (i, z) in batch.latents.iter().enumerate() {
            let parts = model.log_parts(params, z, &mut rng)?;
            log_w.push(checked_log_weight(parts.log_weight(beta), i)?);
        }
    }
    LogWeightBatch::new(log_w, alpha)
}

fn checked_log_weight(value: f64, index: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLogWeight { index, value })
    }
}

/// Closed-form scores at unit temperature.
pub fn eval_scores<M: Model>(model: &M, params: &ParamVector, batch: &SampleBatch<M::Latent>) -> ScoreMatrix {
    eval_scores_tempered(model, params, batch, 1.0)
}

/// Scores of `log q` and of the tempered log weight.
pub fn eval_scores_tempered<M: Model>(
    model: &M,
    params: &ParamVector,
    batch: &SampleBatch<M::Latent>,
    beta: f64,
) -> ScoreMatrix {
    let layout = params.layout();
    let (a, b) = (layout.theta_dim(), layout.phi_dim());
    let n = batch.n();
    let mut q = vec![0.0; n * b];
    let mut w = vec![0.0; n * (a + b)];
    for (i, z) in batch.latents.iter().enumerate() {
        let q_row = &mut q[i * b..(i + 1) * b];
        model.q_score(params, z, q_row);
        let w_row = &mut w[i * (a + b)..(i + 1) * (a + b)];
        model.joint_score(params, z, beta, w_row);
        for k in 0..b {
            w_row[a + k] -= q_row[k];
        }
    }
    ScoreMatrix { n, theta_dim: a, phi_dim: b, q, w }
}
