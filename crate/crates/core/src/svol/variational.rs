//! Full-covariance Gaussian variational family `N(mu, L L^T)`.
//!
//! The factor `L` is lower triangular with positive diagonal, parameterized by
//! the log of its diagonal and its strictly-lower entries. The flat parameter
//! vector is `[mu (d), log diag (d), lower (d(d-1)/2, row-major)]`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullCovGaussian {
    pub mu: Vec<f64>,
    pub log_diag: Vec<f64>,
    /// Strictly-lower entries `L[i][j]`, `i > j`, row by row.
    pub lower: Vec<f64>,
}

/// Number of flat parameters for dimension `d`.
pub fn param_count(d: usize) -> usize {
    2 * d + d * (d - 1) / 2
}

/// Names of the flat parameters.
pub fn param_names(d: usize) -> Vec<String> {
    let mut names: Vec<String> = (0..d).map(|i| format!("mu[{i}]")).collect();
    names.extend((0..d).map(|i| format!("log_l[{i},{i}]")));
    for i in 1..d {
        for j in 0..i {
            names.push(format!("l[{i},{j}]"));
        }
    }
    names
}

#[inline]
fn lower_index(i: usize, j: usize) -> usize {
    i * (i - 1) / 2 + j
}

impl FullCovGaussian {
    /// `N(mu, diag(sd^2))`.
    pub fn diagonal(mu: Vec<f64>, sd: &[f64]) -> Result<Self> {
        if mu.len() != sd.len() {
            return Err(Error::DimensionMismatch { expected: mu.len(), got: sd.len() });
        }
        if let Some(s) = sd.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!("standard deviations must be positive, got {s}")));
        }
        let d = mu.len();
        Ok(Self { mu, log_diag: sd.iter().map(|s| s.ln()).collect(), lower: vec![0.0; d * (d - 1) / 2] })
    }

    pub fn from_params(d: usize, params: &[f64]) -> Result<Self> {
        if params.len() != param_count(d) {
            return Err(Error::DimensionMismatch { expected: param_count(d), got: params.len() });
        }
        Ok(Self {
            mu: params[..d].to_vec(),
            log_diag: params[d..2 * d].to_vec(),
            lower: params[2 * d..].to_vec(),
        })
    }

    pub fn to_params(&self) -> Vec<f64> {
        self.mu.iter().chain(&self.log_diag).chain(&self.lower).copied().collect()
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `L[i][j]`.
    pub fn chol(&self, i: usize, j: usize) -> f64 {
        match i.cmp(&j) {
            std::cmp::Ordering::Less => 0.0,
            std::cmp::Ordering::Equal => self.log_diag[i].exp(),
            std::cmp::Ordering::Greater => self.lower[lower_index(i, j)],
        }
    }

    /// `Sigma = L L^T`, row-major.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.dim();
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] = (0..=i.min(j)).map(|k| self.chol(i, k) * self.chol(j, k)).sum();
            }
        }
        cov
    }

    /// Marginal standard deviations.
    pub fn marginal_sd(&self) -> Vec<f64> {
        let d = self.dim();
        let cov = self.covariance();
        (0..d).map(|i| cov[i * d + i].sqrt()).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let d = self.dim();
        let e: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        (0..d).map(|i| self.mu[i] + (0..=i).map(|j| self.chol(i, j) * e[j]).sum::<f64>()).collect()
    }

    /// `e = L^{-1} (z - mu)` by forward substitution.
    fn whiten(&self, z: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut e = vec![0.0; d];
        for i in 0..d {
            let s: f64 = (0..i).map(|j| self.chol(i, j) * e[j]).sum();
            e[i] = (z[i] - self.mu[i] - s) / self.chol(i, i);
        }
        e
    }

    pub fn logpdf(&self, z: &[f64]) -> f64 {
        let e = self.whiten(z);
        let quad: f64 = e.iter().map(|v| v * v).sum();
        -0.5 * quad - self.log_diag.iter().sum::<f64>() - 0.5 * self.dim() as f64 * LN_2PI
    }

    /// Gradient of `log q(z)` with respect to the flat parameters, written to `out`.
    ///
    /// With `e = L^{-1}(z - mu)` and `v = L^{-T} e`:
    /// `d/d mu = v`, `d/d L_ij = v_i e_j` (i > j), `d/d log L_ii = L_ii v_i e_i - 1`.
    pub fn score(&self, z: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let e = self.whiten(z);
        let mut v = vec![0.0; d];
        for i in (0..d).rev() {
            let s: f64 = (i + 1..d).map(|k| self.chol(k, i) * v[k]).sum();
            v[i] = (e[i] - s) / self.chol(i, i);
        }
        out[..d].copy_from_slice(&v);
        for i in 0..d {
            out[d + i] = self.chol(i, i) * v[i] * e[i] - 1.0;
        }
        for i in 1..d {
            for j in 0..i {
                out[2 * d + lower_index(i, j)] = v[i] * e[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    fn example() -> FullCovGaussian {
        FullCovGaussian { mu: vec![0.3, -1.0, 2.0], log_diag: vec![-0.2, 0.4, 0.1], lower: vec![0.5, -0.3, 0.8] }
    }

    #[test]
    fn names_and_counts() {
        assert_eq!(param_count(3), 9);
        assert_eq!(
            param_names(3),
            ["mu[0]", "mu[1]", "mu[2]", "log_l[0,0]", "log_l[1,1]", "log_l[2,2]", "l[1,0]", "l[2,0]", "l[2,1]"]
        );
        let q = example();
        assert_eq!(FullCovGaussian::from_params(3, &q.to_params()).unwrap(), q);
    }

    #[test]
    fn covariance_is_spd_and_logpdf_matches_direct_formula() {
        let q = example();
        let cov = q.covariance();
        for i in 0..3 {
            for j in 0..3 {
                assert!((cov[i * 3 + j] - cov[j * 3 + i]).abs() < 1e-15);
            }
        }
        // log det Sigma = 2 sum log L_ii; check against the explicit 3x3 determinant
        let det = cov[0] * (cov[4] * cov[8] - cov[5] * cov[7]) - cov[1] * (cov[3] * cov[8] - cov[5] * cov[6])
            + cov[2] * (cov[3] * cov[7] - cov[4] * cov[6]);
        assert!(det > 0.0);
        assert!((det.ln() - 2.0 * q.log_diag.iter().sum::<f64>()).abs() < 1e-12);
        let z = q.sample(&mut stream(1, 0, Purpose::Latents));
        assert!(q.logpdf(&z).is_finite());
    }

    #[test]
    fn score_at_mean_has_zero_location_block() {
        let q = example();
        let mut out = vec![0.0; 9];
        q.score(&q.mu.clone(), &mut out);
        assert!(out[..3].iter().all(|v| *v == 0.0));
        assert!(out[3..6].iter().all(|v| *v == -1.0));
    }

    #[test]
    fn score_in_one_dimension() {
        let q = FullCovGaussian { mu: vec![0.5], log_diag: vec![0.0], lower: vec![] };
        let mut out = vec![0.0; 2];
        q.score(&[1.5], &mut out);
        assert_eq!(out, vec![1.0, 0.0]);
    }

    #[test]
    fn score_matches_finite_differences() {
        let mut rng = stream(2, 0, Purpose::Custom(7));
        for _ in 0..20 {
            let params: Vec<f64> = (0..9).map(|_| rng.random::<f64>() - 0.5).collect();
            let q = FullCovGaussian::from_params(3, &params).unwrap();
            let z: Vec<f64> = (0..3).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
            let mut out = vec![0.0; 9];
            q.score(&z, &mut out);
            for k in 0..9 {
                let h = 1e-6;
                let mut up = params.clone();
                up[k] += h;
                let mut dn = params.clone();
                dn[k] -= h;
                let fd = (FullCovGaussian::from_params(3, &up).unwrap().logpdf(&z)
                    - FullCovGaussian::from_params(3, &dn).unwrap().logpdf(&z))
                    / (2.0 * h);
                assert!((fd - out[k]).abs() < 1e-5, "param {k}: {fd} vs {}", out[k]);
            }
        }
    }

    #[test]
    fn diagonal_constructor() {
        let q = FullCovGaussian::diagonal(vec![0.0, 1.0], &[2.0, 0.5]).unwrap();
        assert_eq!(q.marginal_sd(), vec![2.0, 0.5]);
        assert!(FullCovGaussian::diagonal(vec![0.0], &[0.0]).is_err());
    }
}
