//! Stochastic volatility model fitted by pseudo-marginal variational inference.
//!
//! ```text
//! x_t | y_t     ~ N(0, exp(y_t))
//! y_t | y_{t-1} ~ N(beta0 + beta1 (y_{t-1} - beta0), sigma^2)
//! y_1           ~ N(beta0, sigma^2 / (1 - beta1^2))
//! ```
//!
//! Inference targets the static parameters through the unconstrained vector
//! `z = (beta0, log((1 - beta1)/(1 + beta1)), log sigma^2)`. The likelihood is
//! replaced by a bootstrap particle filter estimate, which has no usable
//! gradient, so only score-function estimators apply.

pub mod filter;
pub mod model;
pub mod variational;

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use filter::{particle_filter, ConstantObservation, LinearGaussianSsm, PfEstimate, StateSpaceModel, SvSsm};
pub use model::{posterior_summary, LikelihoodEstimator, Observation, PosteriorSummary, PseudoMarginalModel, SvLikelihood};
pub use variational::FullCovGaussian;

/// Static parameters on their natural scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvParams {
    pub beta0: f64,
    pub beta1: f64,
    pub sigma2: f64,
}

impl SvParams {
    pub fn new(beta0: f64, beta1: f64, sigma2: f64) -> Result<Self> {
        let p = Self { beta0, beta1, sigma2 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.beta0.is_finite() {
            return Err(Error::NonFiniteParam { name: "beta0".into(), value: self.beta0 });
        }
        if !(self.beta1.abs() < 1.0) {
            return Err(Error::InvalidArgument(format!("beta1 must lie in (-1,1), got {}", self.beta1)));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma2 must be positive, got {}", self.sigma2)));
        }
        Ok(())
    }

    /// Maps the unconstrained vector `z` back to the natural scale.
    pub fn from_unconstrained(z: &[f64]) -> Self {
        // (1 - e^u)/(1 + e^u) = -tanh(u/2), which stays accurate for large |u|
        Self { beta0: z[0], beta1: -(0.5 * z[1]).tanh(), sigma2: z[2].exp() }
    }

    pub fn to_unconstrained(&self) -> [f64; 3] {
        [self.beta0, ((1.0 - self.beta1) / (1.0 + self.beta1)).ln(), self.sigma2.ln()]
    }

    /// Variance of the stationary law of `y`.
    pub fn stationary_variance(&self) -> f64 {
        self.sigma2 / (1.0 - self.beta1 * self.beta1)
    }

    /// The parameters used to simulate the synthetic data set.
    pub fn synthetic_default() -> Self {
        Self { beta0: -0.3, beta1: 0.95, sigma2: 0.05 }
    }
}

/// Prior on the unconstrained vector `z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SvPrior {
    /// Independent normals on the three coordinates of `z`.
    Gaussian { mean: [f64; 3], sd: [f64; 3] },
    /// Improper flat prior (log density 0); for tests.
    Flat,
}

impl Default for SvPrior {
    /// `N(0, 10^2)` on beta0, `N(0, 1)` on the beta1 transform, `N(0, 2^2)` on `log sigma^2`.
    fn default() -> Self {
        SvPrior::Gaussian { mean: [0.0; 3], sd: [10.0, 1.0, 2.0] }
    }
}

impl SvPrior {
    /// Log density on `z`. The prior is placed on `z` directly, so no
    /// change-of-variables term enters.
    pub fn logpdf(&self, z: &[f64]) -> f64 {
        match self {
            SvPrior::Flat => 0.0,
            SvPrior::Gaussian { mean, sd } => z
                .iter()
                .zip(mean.iter().zip(sd))
                .map(|(&zi, (&m, &s))| {
                    let e = (zi - m) / s;
                    -0.5 * e * e - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
                })
                .sum(),
        }
    }
}

/// Forward-simulates `(x_{1:T}, y_{1:T})`.
pub fn simulate_sv_with_states<R: Rng + ?Sized>(params: &SvParams, t_len: usize, rng: &mut R) -> Result<(Vec<f64>, Vec<f64>)> {
    params.validate()?;
    if t_len == 0 {
        return Err(Error::InvalidArgument("series length must be >= 1".into()));
    }
    let sd = params.sigma2.sqrt();
    let mut y = Vec::with_capacity(t_len);
    let mut x = Vec::with_capacity(t_len);
    let mut state = params.beta0 + params.stationary_variance().sqrt() * rng.sample::<f64, _>(StandardNormal);
    for t in 0..t_len {
        if t > 0 {
            state = params.beta0 + params.beta1 * (state - params.beta0) + sd * rng.sample::<f64, _>(StandardNormal);
        }
        y.push(state);
        x.push((0.5 * state).exp() * rng.sample::<f64, _>(StandardNormal));
    }
    Ok((x, y))
}

/// Forward-simulates an observation series.
pub fn simulate_sv<R: Rng + ?Sized>(params: &SvParams, t_len: usize, rng: &mut R) -> Result<Vec<f64>> {
    Ok(simulate_sv_with_states(params, t_len, rng)?.0)
}

/// Writes `t,x` rows (t starting at 1).
pub fn write_series<W: Write>(mut out: W, x: &[f64]) -> Result<()> {
    writeln!(out, "t,x")?;
    for (t, v) in x.iter().enumerate() {
        writeln!(out, "{},{}", t + 1, v)?;
    }
    Ok(())
}

pub fn save_series(path: &Path, x: &[f64]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_series(&mut f, x)?;
    f.flush()?;
    Ok(())
}

/// Reads a `t,x` CSV. The header is optional; the `t` column is ignored
/// apart from being present.
pub fn read_series<R: BufRead>(input: R) -> Result<Vec<f64>> {
    let mut x = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.starts_with(|c: char| c.is_ascii_alphabetic())) {
            continue;
        }
        let value = line
            .split(',')
            .nth(1)
            .ok_or_else(|| Error::InvalidArgument(format!("line {}: expected `t,x`", lineno + 1)))?;
        let v: f64 = value
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("line {}: `{value}` is not a number", lineno + 1)))?;
        if !v.is_finite() {
            return Err(Error::InvalidArgument(format!("line {}: observation is not finite", lineno + 1)));
        }
        x.push(v);
    }
    if x.is_empty() {
        return Err(Error::InvalidArgument("observation series is empty".into()));
    }
    Ok(x)
}

pub fn load_series(path: &Path) -> Result<Vec<f64>> {
    read_series(std::io::BufReader::new(std::fs::File::open(path)?))
}
