//! Pseudo-marginal importance weights for the static parameters of a
//! state-space model.
//!
//! The latent is `z` (the unconstrained static parameters), `q` is a
//! full-covariance Gaussian, and the log weight is
//! `log p_hat(x|z) + log p(z) - log q(z)` with `p_hat` a particle-filter estimate.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::filter::{particle_filter, LinearGaussianSsm, SvSsm};
use super::variational::{self, FullCovGaussian};
use super::{SvParams, SvPrior};
use crate::error::{Error, Result};
use crate::model::{LogParts, Model, ParamLayout, ParamVector};

/// Something that returns `log p_hat(x|z)` for a parameter vector `z`.
pub trait LikelihoodEstimator: Sync {
    fn dim(&self) -> usize;
    fn log_likelihood<R: Rng + ?Sized>(&self, z: &[f64], rng: &mut R) -> Result<f64>;
    /// Whether the estimate consumes randomness.
    fn is_stochastic(&self) -> bool {
        true
    }
}

/// Which observation density the filter uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Observation {
    /// `x_t ~ N(0, exp(y_t))`.
    #[default]
    Volatility,
    /// `x_t ~ N(y_t, 1)`.
    LinearGaussian,
}

/// Particle-filter likelihood on a fixed observation series.
#[derive(Debug, Clone, PartialEq)]
pub struct SvLikelihood {
    pub data: Arc<Vec<f64>>,
    pub particles: usize,
    pub observation: Observation,
}

impl SvLikelihood {
    pub fn new(data: Vec<f64>, particles: usize) -> Result<Self> {
        Self::with_observation(data, particles, Observation::Volatility)
    }

    pub fn with_observation(data: Vec<f64>, particles: usize, observation: Observation) -> Result<Self> {
        if particles < 2 {
            return Err(Error::InvalidArgument(format!("particle filter needs P >= 2, got {particles}")));
        }
        if data.is_empty() {
            return Err(Error::InvalidArgument("observation series is empty".into()));
        }
        Ok(Self { data: Arc::new(data), particles, observation })
    }
}

impl LikelihoodEstimator for SvLikelihood {
    fn dim(&self) -> usize {
        3
    }

    fn log_likelihood<R: Rng + ?Sized>(&self, z: &[f64], rng: &mut R) -> Result<f64> {
        let params = SvParams::from_unconstrained(z);
        // |beta1| rounds to 1 or sigma2 over/underflows far out in z; the likelihood is then zero
        if params.validate().is_err() || !params.stationary_variance().is_finite() {
            return Ok(f64::NEG_INFINITY);
        }
        let est = match self.observation {
            Observation::Volatility => particle_filter(&SvSsm(params), &self.data, self.particles, rng)?,
            Observation::LinearGaussian => {
                particle_filter(&LinearGaussianSsm(params), &self.data, self.particles, rng)?
            }
        };
        Ok(est.log_lik_hat)
    }
}

/// [`Model`] over `z` with a Gaussian `q` and a plug-in likelihood estimate.
/// All parameters belong to `q`; there is no generative parameter to learn.
#[derive(Debug, Clone)]
pub struct PseudoMarginalModel<L> {
    likelihood: L,
    prior: SvPrior,
    layout: Arc<ParamLayout>,
}

impl<L: LikelihoodEstimator> PseudoMarginalModel<L> {
    pub fn new(likelihood: L, prior: SvPrior) -> Result<Self> {
        let d = likelihood.dim();
        let layout = Arc::new(ParamLayout::new(variational::param_names(d), 0)?);
        Ok(Self { likelihood, prior, layout })
    }

    pub fn likelihood(&self) -> &L {
        &self.likelihood
    }

    pub fn prior(&self) -> &SvPrior {
        &self.prior
    }

    pub fn latent_dim(&self) -> usize {
        self.likelihood.dim()
    }

    pub fn params(&self, q: &FullCovGaussian) -> Result<ParamVector> {
        if q.dim() != self.latent_dim() {
            return Err(Error::DimensionMismatch { expected: self.latent_dim(), got: q.dim() });
        }
        ParamVector::new(self.layout.clone(), q.to_params())
    }

    pub fn family(&self, params: &ParamVector) -> FullCovGaussian {
        FullCovGaussian::from_params(self.latent_dim(), params.values()).expect("layout matches family")
    }
}

impl<L: LikelihoodEstimator> Model for PseudoMarginalModel<L> {
    type Latent = Vec<f64>;

    fn layout(&self) -> Arc<ParamLayout> {
        self.layout.clone()
    }

    fn sample_latent<R: Rng + ?Sized>(&self, params: &ParamVector, rng: &mut R) -> Vec<f64> {
        self.family(params).sample(rng)
    }

    fn log_parts<R: Rng + ?Sized>(&self, params: &ParamVector, z: &Vec<f64>, rng: &mut R) -> Result<LogParts> {
        Ok(LogParts {
            log_lik: self.likelihood.log_likelihood(z, rng)?,
            log_prior: self.prior.logpdf(z),
            log_q: self.family(params).logpdf(z),
        })
    }

    fn stochastic_weights(&self) -> bool {
        self.likelihood.is_stochastic()
    }

    fn q_score(&self, params: &ParamVector, z: &Vec<f64>, out: &mut [f64]) {
        self.family(params).score(z, out);
    }
}

/// Mean and standard deviation of one quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub sd: f64,
}

/// Summary of a fitted variational posterior over the volatility parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    /// Moments of `z` read off `q` directly.
    pub z: Vec<Moments>,
    /// Monte Carlo moments of `beta0`, `beta1`, `sigma2` under `q`.
    pub beta0: Moments,
    pub beta1: Moments,
    pub sigma2: Moments,
    pub draws: usize,
}

pub fn posterior_summary<R: Rng + ?Sized>(q: &FullCovGaussian, draws: usize, rng: &mut R) -> Result<PosteriorSummary> {
    if q.dim() != 3 {
        return Err(Error::DimensionMismatch { expected: 3, got: q.dim() });
    }
    if draws < 2 {
        return Err(Error::InvalidArgument("posterior summary needs at least 2 draws".into()));
    }
    let mut cols = [Vec::with_capacity(draws), Vec::with_capacity(draws), Vec::with_capacity(draws)];
    for _ in 0..draws {
        let p = SvParams::from_unconstrained(&q.sample(rng));
        cols[0].push(p.beta0);
        cols[1].push(p.beta1);
        cols[2].push(p.sigma2);
    }
    let moments = |xs: &[f64]| {
        let (mean, sd) = crate::diagnostics::mean_std(xs);
        Moments { mean, sd }
    };
    let sd = q.marginal_sd();
    Ok(PosteriorSummary {
        z: q.mu.iter().zip(&sd).map(|(&mean, &sd)| Moments { mean, sd }).collect(),
        beta0: moments(&cols[0]),
        beta1: moments(&cols[1]),
        sigma2: moments(&cols[2]),
        draws,
    })
}
