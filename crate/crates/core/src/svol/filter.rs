//! Bootstrap particle filter for scalar-state state-space models.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::SvParams;
use crate::bounds::logsumexp;
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// A state-space model with scalar latent state.
pub trait StateSpaceModel: Sync {
    fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> f64;
    fn sample_transition<R: Rng + ?Sized>(&self, prev: f64, rng: &mut R) -> f64;
    /// `log g(x_t | y_t)`; may be `-inf`, never `+inf` or NaN for finite input.
    fn log_observation(&self, x: f64, y: f64) -> f64;
}

/// The AR(1) latent dynamics shared by the volatility model and its linear surrogate.
fn ar1_initial<R: Rng + ?Sized>(p: &SvParams, rng: &mut R) -> f64 {
    p.beta0 + p.stationary_variance().sqrt() * rng.sample::<f64, _>(StandardNormal)
}

fn ar1_transition<R: Rng + ?Sized>(p: &SvParams, prev: f64, rng: &mut R) -> f64 {
    p.beta0 + p.beta1 * (prev - p.beta0) + p.sigma2.sqrt() * rng.sample::<f64, _>(StandardNormal)
}

/// The stochastic volatility model: `x_t ~ N(0, exp(y_t))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvSsm(pub SvParams);

impl StateSpaceModel for SvSsm {
    fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        ar1_initial(&self.0, rng)
    }

    fn sample_transition<R: Rng + ?Sized>(&self, prev: f64, rng: &mut R) -> f64 {
        ar1_transition(&self.0, prev, rng)
    }

    fn log_observation(&self, x: f64, y: f64) -> f64 {
        // x^2 e^{-y} = exp(2 ln|x| - y); past exp(700) the density is zero to working precision
        let ratio = if x == 0.0 {
            0.0
        } else {
            let e = 2.0 * x.abs().ln() - y;
            if e > 700.0 {
                return f64::NEG_INFINITY;
            }
            e.exp()
        };
        -0.5 * (LN_2PI + y + ratio)
    }
}

/// Same latent dynamics with `x_t ~ N(y_t, 1)`; its likelihood is available
/// exactly from a Kalman filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearGaussianSsm(pub SvParams);

impl StateSpaceModel for LinearGaussianSsm {
    fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        ar1_initial(&self.0, rng)
    }

    fn sample_transition<R: Rng + ?Sized>(&self, prev: f64, rng: &mut R) -> f64 {
        ar1_transition(&self.0, prev, rng)
    }

    fn log_observation(&self, x: f64, y: f64) -> f64 {
        -0.5 * (LN_2PI + (x - y) * (x - y))
    }
}

/// Wraps another model but replaces its observation density by a constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantObservation<S> {
    pub inner: S,
    pub log_density: f64,
}

impl<S: StateSpaceModel> StateSpaceModel for ConstantObservation<S> {
    fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.inner.sample_initial(rng)
    }

    fn sample_transition<R: Rng + ?Sized>(&self, prev: f64, rng: &mut R) -> f64 {
        self.inner.sample_transition(prev, rng)
    }

    fn log_observation(&self, _x: f64, _y: f64) -> f64 {
        self.log_density
    }
}

/// Output of one filter run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PfEstimate {
    /// `log p_hat(x_{1:T})`; `exp` of it is unbiased for the likelihood.
    pub log_lik_hat: f64,
    pub particles: usize,
}

/// Bootstrap filter with multinomial resampling at every step.
///
/// `log_lik_hat = sum_t log((1/P) sum_p g(x_t | y_{t,p}))`, accumulated in
/// the log domain. Returns `-inf` if every particle has zero weight at some step.
pub fn particle_filter<S: StateSpaceModel, R: Rng + ?Sized>(
    ssm: &S,
    data: &[f64],
    particles: usize,
    rng: &mut R,
) -> Result<PfEstimate> {
    if particles < 2 {
        return Err(Error::InvalidArgument(format!("particle filter needs P >= 2, got {particles}")));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("particle filter needs at least one observation".into()));
    }
    if let Some(t) = data.iter().position(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument(format!("observation {} is not finite", t + 1)));
    }
    let log_p = (particles as f64).ln();
    let mut states: Vec<f64> = (0..particles).map(|_| ssm.sample_initial(rng)).collect();
    let mut next = vec![0.0; particles];
    let mut log_w = vec![0.0; particles];
    let mut weights = vec![0.0; particles];
    let mut total = 0.0;
    for (t, &x) in data.iter().enumerate() {
        if t > 0 {
            let dist = WeightedIndex::new(&weights).expect("weights are finite, nonnegative, not all zero");
            for slot in next.iter_mut() {
                *slot = ssm.sample_transition(states[dist.sample(rng)], rng);
            }
            std::mem::swap(&mut states, &mut next);
        }
        for (lw, &y) in log_w.iter_mut().zip(&states) {
            *lw = ssm.log_observation(x, y);
        }
        let lse = logsumexp(&log_w);
        if lse == f64::NEG_INFINITY {
            return Ok(PfEstimate { log_lik_hat: f64::NEG_INFINITY, particles });
        }
        total += lse - log_p;
        for (w, &lw) in weights.iter_mut().zip(&log_w) {
            *w = (lw - lse).exp();
        }
    }
    Ok(PfEstimate { log_lik_hat: total, particles })
}
