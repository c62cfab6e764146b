//! Closed forms for the isotropic Gaussian example, used as test oracles.
//!
//! With `p_theta(z|x) = N(theta, I)` and `q_phi(z|x) = N(phi, I)` the log weight
//! is Gaussian, so the VR bound, its gradient and the leading-order variance
//! constants of every VIMCO baseline are available in closed form. Throughout,
//! `delta = phi - theta`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::EstimatorKind;
use crate::model::Alpha;

/// One point `(theta, phi, alpha)` and the phi coordinate under study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSetting {
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    pub alpha: Alpha,
    pub coordinate: usize,
}

/// Baselines with a known leading-order variance constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum VarianceKind {
    Am,
    Gm,
    /// A constant baseline given through `rho = eta / E[w^{1-alpha}]`.
    ConstEtaRatio(f64),
    Star,
}

impl TryFrom<EstimatorKind> for VarianceKind {
    type Error = Error;
    fn try_from(kind: EstimatorKind) -> Result<Self> {
        match kind {
            EstimatorKind::Am => Ok(VarianceKind::Am),
            EstimatorKind::Gm => Ok(VarianceKind::Gm),
            EstimatorKind::Star | EstimatorKind::StarPrev | EstimatorKind::StarAlpha0 => Ok(VarianceKind::Star),
            other => Err(Error::InvalidArgument(format!("no closed-form variance for `{other}`"))),
        }
    }
}

impl GaussianSetting {
    pub fn new(theta: Vec<f64>, phi: Vec<f64>, alpha: Alpha, coordinate: usize) -> Result<Self> {
        if theta.is_empty() {
            return Err(Error::InvalidArgument("Gaussian setting needs d >= 1".into()));
        }
        if theta.len() != phi.len() {
            return Err(Error::DimensionMismatch { expected: theta.len(), got: phi.len() });
        }
        if coordinate >= theta.len() {
            return Err(Error::InvalidArgument(format!("coordinate {coordinate} out of range for d = {}", theta.len())));
        }
        if let Some(v) = theta.iter().chain(&phi).find(|v| !v.is_finite()) {
            return Err(Error::NonFiniteParam { name: "theta/phi".into(), value: *v });
        }
        Ok(Self { theta, phi, alpha, coordinate })
    }

    /// `d = 1` shorthand.
    pub fn scalar(theta: f64, phi: f64, alpha: f64) -> Result<Self> {
        Self::new(vec![theta], vec![phi], Alpha::new(alpha)?, 0)
    }

    /// `||phi - theta||^2`
    pub fn sq_dist(&self) -> f64 {
        self.theta.iter().zip(&self.phi).map(|(t, p)| (p - t) * (p - t)).sum()
    }

    /// `phi_k - theta_k`
    pub fn delta_k(&self) -> f64 {
        self.phi[self.coordinate] - self.theta[self.coordinate]
    }

    fn a(&self) -> f64 {
        self.alpha.get()
    }

    /// `log E_q[w^{1-alpha}] = -alpha (1-alpha) ||delta||^2 / 2`.
    pub fn log_mean_weight(&self) -> f64 {
        -0.5 * self.a() * (1.0 - self.a()) * self.sq_dist()
    }

    /// The VR bound `log E[w^{1-alpha}] / (1-alpha) = -alpha ||delta||^2 / 2`.
    pub fn vr_bound(&self) -> f64 {
        -0.5 * self.a() * self.sq_dist()
    }

    /// `d/d phi_k` of the VR bound.
    pub fn grad_vr(&self) -> f64 {
        -self.a() * self.delta_k()
    }

    /// `gamma^2 = (exp((1-alpha)^2 ||delta||^2) - 1) / (1-alpha)`.
    pub fn gamma_sq(&self) -> f64 {
        let p = 1.0 - self.a();
        (p * p * self.sq_dist()).exp_m1() / p
    }

    /// `d/d phi_k gamma^2 = 2 (1-alpha) delta_k exp((1-alpha)^2 ||delta||^2)`.
    pub fn grad_gamma_sq(&self) -> f64 {
        let p = 1.0 - self.a();
        2.0 * p * self.delta_k() * (p * p * self.sq_dist()).exp()
    }

    /// Leading-order gradient of the `N`-sample bound, `grad_vr - grad_gamma_sq / (2N)`.
    pub fn expected_gradient(&self, n: usize) -> f64 {
        self.grad_vr() - self.grad_gamma_sq() / (2.0 * n as f64)
    }

    /// `rho = eta / E[w^{1-alpha}]` of each baseline's limiting constant.
    pub fn eta_ratio(&self, kind: VarianceKind) -> f64 {
        let p = 1.0 - self.a();
        match kind {
            VarianceKind::Am => 1.0,
            VarianceKind::Gm => (-0.5 * p * p * self.sq_dist()).exp(),
            VarianceKind::ConstEtaRatio(rho) => rho,
            VarianceKind::Star => self.a(),
        }
    }

    /// `A_eta` for a constant baseline with ratio `rho`: the `1/N` variance constant.
    pub fn variance_constant(&self, rho: f64) -> f64 {
        let a = self.a();
        let p = 1.0 - a;
        let dk = self.delta_k();
        a * a / (p * p) * (p * p * self.sq_dist()).exp() * (1.0 + p * p * dk * dk) + rho * (rho - 2.0 * a) / (p * p)
    }

    /// The `1/N^3` variance constant of the optimal baseline at `alpha = 0`.
    pub fn star_alpha0_variance_constant(&self) -> f64 {
        let d2 = self.sq_dist();
        let dk2 = self.delta_k().powi(2);
        (0.25 + 4.0 * dk2) * (6.0 * d2).exp() - 6.0 * dk2 * (4.0 * d2).exp()
            + (d2.exp() - 0.25) * 4.0 * dk2 * (2.0 * d2).exp()
    }

    /// Leading-order variance constant of `kind`. Star at `alpha = 0` gives the
    /// `1/N^3`-scale constant, everything else the `1/N`-scale one.
    pub fn asymptotic_variance(&self, kind: VarianceKind) -> f64 {
        if kind == VarianceKind::Star && self.alpha.is_zero() {
            self.star_alpha0_variance_constant()
        } else {
            self.variance_constant(self.eta_ratio(kind))
        }
    }

    /// Predicted variance of the estimator at batch size `n`.
    pub fn predicted_variance(&self, kind: VarianceKind, n: usize) -> f64 {
        let n = n as f64;
        if kind == VarianceKind::Star && self.alpha.is_zero() {
            self.asymptotic_variance(kind) / (n * n * n)
        } else {
            self.asymptotic_variance(kind) / n
        }
    }

    /// Leading-order SNR `|grad_vr - grad_gamma_sq/(2n)| / sqrt(variance / n^r)`.
    pub fn snr_prediction(&self, kind: VarianceKind, n: usize) -> Result<f64> {
        if n == 0 {
            return Err(Error::BatchTooSmall { min: 1, got: 0 });
        }
        Ok(self.expected_gradient(n).abs() / self.predicted_variance(kind, n).sqrt())
    }
}

/// Variance of one phi coordinate of the estimator when `q = p`, where the
/// score has unit variance.
pub fn optimality_variance(n: usize, alpha: Alpha, kind: VarianceKind) -> Result<f64> {
    if n == 0 {
        return Err(Error::BatchTooSmall { min: 1, got: 0 });
    }
    let nf = n as f64;
    match kind {
        VarianceKind::Am | VarianceKind::Gm => Ok(1.0 / nf),
        VarianceKind::Star => {
            let p = alpha.power();
            if p / nf >= 1.0 {
                return Err(Error::InvalidArgument(format!(
                    "(1-alpha)/n must be below 1 for the optimal baseline, got {}",
                    p / nf
                )));
            }
            let c = 1.0 + nf / p * (-p / nf).ln_1p();
            Ok(c * c / nf)
        }
        VarianceKind::ConstEtaRatio(_) => {
            Err(Error::InvalidArgument("no optimality variance for a constant baseline".into()))
        }
    }
}
