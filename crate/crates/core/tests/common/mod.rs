//! Oracles shared by the integration tests. Each one is computed independently
//! of the library code it checks.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn sample_var(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

fn lse(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Which objective the finite-difference oracle differentiates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// `E[(1/(1-a)) log((1/N) sum w_i^(1-a))]`.
    VrIwae { alpha: f64, n: usize },
    /// `E[log w]`.
    Elbo,
}

/// One-dimensional Gaussian model, `log w = log N(z;theta,1) - log N(z;phi,1)`,
/// reparameterized as `z = phi + eps`.
fn objective_at(theta: f64, phi: f64, eps: &[f64], obj: Objective) -> f64 {
    let log_w: Vec<f64> = eps.iter().map(|&e| -0.5 * (phi + e - theta).powi(2) + 0.5 * e * e).collect();
    match obj {
        Objective::Elbo => log_w.iter().sum::<f64>() / log_w.len() as f64,
        Objective::VrIwae { alpha, n } => {
            let p = 1.0 - alpha;
            let scaled: Vec<f64> = log_w.iter().map(|l| p * l).collect();
            (lse(&scaled) - (n as f64).ln()) / p
        }
    }
}

/// Gradient of the objective in `(theta, phi)` by central finite differences
/// of a common-random-number Monte Carlo average. Returns `(mean, se)` per coordinate.
pub fn fd_gradient_oracle(theta: f64, phi: f64, obj: Objective, batches: usize, seed: u64) -> [(f64, f64); 2] {
    let h = 1e-5;
    let n = match obj {
        Objective::VrIwae { n, .. } => n,
        Objective::Elbo => 1,
    };
    let mut r = rng(seed);
    let mut d_theta = Vec::with_capacity(batches);
    let mut d_phi = Vec::with_capacity(batches);
    let mut eps = vec![0.0; n];
    for _ in 0..batches {
        eps.iter_mut().for_each(|e| *e = r.sample(StandardNormal));
        d_theta.push((objective_at(theta + h, phi, &eps, obj) - objective_at(theta - h, phi, &eps, obj)) / (2.0 * h));
        d_phi.push((objective_at(theta, phi + h, &eps, obj) - objective_at(theta, phi - h, &eps, obj)) / (2.0 * h));
    }
    [mean_se(&d_theta), mean_se(&d_phi)]
}

/// AR(1) state with Gaussian observation noise:
/// `y_1 ~ N(b0, s2/(1-b1^2))`, `y_t = b0 + b1 (y_{t-1} - b0) + sqrt(s2) e_t`, `x_t = y_t + u_t`.
pub fn simulate_linear_gaussian(b0: f64, b1: f64, s2: f64, t_len: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    let mut y = b0 + (s2 / (1.0 - b1 * b1)).sqrt() * r.sample::<f64, _>(StandardNormal);
    let mut x = Vec::with_capacity(t_len);
    for t in 0..t_len {
        if t > 0 {
            y = b0 + b1 * (y - b0) + s2.sqrt() * r.sample::<f64, _>(StandardNormal);
        }
        x.push(y + r.sample::<f64, _>(StandardNormal));
    }
    x
}

/// Exact log likelihood of the linear-Gaussian model by the Kalman filter.
pub fn kalman_log_likelihood(b0: f64, b1: f64, s2: f64, x: &[f64]) -> f64 {
    let mut m = b0;
    let mut v = s2 / (1.0 - b1 * b1);
    let mut ll = 0.0;
    for &xt in x {
        let s = v + 1.0;
        ll += -0.5 * (LN_2PI + s.ln() + (xt - m).powi(2) / s);
        let k = v / s;
        m += k * (xt - m);
        v *= 1.0 - k;
        m = b0 + b1 * (m - b0);
        v = b1 * b1 * v + s2;
    }
    ll
}

/// `int N(x; 0, e^y) N(y; mean, var) dy` by Gauss-Hermite quadrature with `nodes` points.
pub fn sv_single_step_likelihood(x: f64, mean: f64, var: f64, nodes: usize) -> f64 {
    let (pts, wts) = gauss_hermite(nodes);
    let sd = var.sqrt();
    let mut total = 0.0;
    for (p, w) in pts.iter().zip(&wts) {
        // physicists' Hermite: int f(y) N(y;m,v) dy = pi^{-1/2} sum w f(m + sqrt(2 v) p)
        let y = mean + std::f64::consts::SQRT_2 * sd * p;
        total += w * (-0.5 * (LN_2PI + y + x * x * (-y).exp())).exp();
    }
    total / std::f64::consts::PI.sqrt()
}

/// Gauss-Hermite nodes and weights (weight function `e^{-t^2}`) by Newton
/// iteration on the Hermite recurrence.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let m = n.div_ceil(2);
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / (j as f64 + 1.0)).sqrt() * p2 - (j as f64 / (j as f64 + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() < 1e-14 {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}
