//! Isotropic Gaussian target and variational family:
//! `p_theta(z|x) = N(z; theta, I_d)` and `q_phi(z|x) = N(z; phi, I_d)`.
//!
//! The marginal `p_theta(x)` is one, so `log w = log N(z;theta,I) - log N(z;phi,I)`.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use smallvec::SmallVec;

use super::{Alpha, LogParts, Model, ParamLayout, ParamVector};
use crate::error::{Error, Result};

pub type GaussianLatent = SmallVec<[f64; 4]>;

#[derive(Debug, Clone)]
pub struct GaussianModel {
    layout: Arc<ParamLayout>,
}

impl GaussianModel {
    pub fn new(d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidArgument("Gaussian model needs d >= 1".into()));
        }
        let names = (0..d)
            .map(|k| format!("theta[{k}]"))
            .chain((0..d).map(|k| format!("phi[{k}]")))
            .collect();
        Ok(Self { layout: Arc::new(ParamLayout::new(names, d)?) })
    }

    pub fn dim(&self) -> usize {
        self.layout.theta_dim()
    }

    /// Packs `(theta, phi)` into a parameter vector.
    pub fn params(&self, theta: &[f64], phi: &[f64]) -> Result<ParamVector> {
        let d = self.dim();
        if theta.len() != d || phi.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: theta.len().max(phi.len()) });
        }
        ParamVector::new(self.layout.clone(), theta.iter().chain(phi).copied().collect())
    }

    /// Scalar convenience for `d = 1`.
    pub fn params_1d(&self, theta: f64, phi: f64) -> Result<ParamVector> {
        self.params(&[theta], &[phi])
    }
}

fn log_std_normal(z: &[f64], mean: &[f64]) -> f64 {
    let sq: f64 = z.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * sq - 0.5 * z.len() as f64 * (2.0 * PI).ln()
}

impl Model for GaussianModel {
    type Latent = GaussianLatent;

    fn layout(&self) -> Arc<ParamLayout> {
        self.layout.clone()
    }

    fn sample_latent<R: Rng + ?Sized>(&self, params: &ParamVector, rng: &mut R) -> GaussianLatent {
        params
            .phi()
            .iter()
            .map(|&m| {
                let e: f64 = rng.sample(StandardNormal);
                m + e
            })
            .collect()
    }

    fn log_parts<R: Rng + ?Sized>(&self, params: &ParamVector, z: &GaussianLatent, _rng: &mut R) -> Result<LogParts> {
        Ok(LogParts {
            log_lik: log_std_normal(z, params.theta()),
            log_prior: 0.0,
            log_q: log_std_normal(z, params.phi()),
        })
    }

    fn q_score(&self, params: &ParamVector, z: &GaussianLatent, out: &mut [f64]) {
        for ((o, &zk), &pk) in out.iter_mut().zip(z.iter()).zip(params.phi()) {
            *o = zk - pk;
        }
    }

    fn joint_score(&self, params: &ParamVector, z: &GaussianLatent, beta: f64, out: &mut [f64]) {
        let d = self.dim();
        for k in 0..d {
            out[k] = beta * (z[k] - params.theta()[k]);
        }
        out[d..].iter_mut().for_each(|o| *o = 0.0);
    }

    fn log_mean_weight(&self, params: &ParamVector, alpha: Alpha) -> Option<f64> {
        let a = alpha.get();
        let sq: f64 = params.theta().iter().zip(params.phi()).map(|(t, p)| (t - p) * (t - p)).sum();
        Some(-0.5 * a * (1.0 - a) * sq)
    }
}
