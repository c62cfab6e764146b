mod common;

use iwvi::model::{draw_batch, eval_log_weights, eval_scores, SampleBatch};
use iwvi::rng::{stream, Purpose, SeedRecord};
use iwvi::svol::{
    particle_filter, simulate_sv, FullCovGaussian, LikelihoodEstimator, LinearGaussianSsm, PseudoMarginalModel,
    SvLikelihood, SvParams, SvPrior, SvSsm,
};
use iwvi::{Alpha, Estimator, EstimatorKind};
use rand::Rng;

use common::{kalman_log_likelihood, mean_se, rng, sample_var, simulate_linear_gaussian, sv_single_step_likelihood};

#[test]
fn filter_is_unbiased_on_the_linear_gaussian_model() {
    let (b0, b1, s2) = (-0.3, 0.9, 0.2);
    let params = SvParams::new(b0, b1, s2).unwrap();
    for (t_len, particles) in [(10, 64), (20, 128)] {
        let x = simulate_linear_gaussian(b0, b1, s2, t_len, 500 + t_len as u64);
        let exact = kalman_log_likelihood(b0, b1, s2, &x);
        let ratios: Vec<f64> = (0..10_000u64)
            .map(|s| {
                let est = particle_filter(&LinearGaussianSsm(params), &x, particles, &mut stream(s, 0, Purpose::Weights)).unwrap();
                (est.log_lik_hat - exact).exp()
            })
            .collect();
        let (m, se) = mean_se(&ratios);
        assert!((m - 1.0).abs() <= 4.0 * se, "T {t_len}, P {particles}: {m} (se {se})");
    }
}

#[test]
fn single_step_matches_quadrature() {
    let params = SvParams::synthetic_default();
    let var = params.stationary_variance();
    for x in [0.05, 0.8, -2.5] {
        let exact = sv_single_step_likelihood(x, params.beta0, var, 64);
        let hats: Vec<f64> = (0..10_000u64)
            .map(|s| particle_filter(&SvSsm(params), &[x], 64, &mut stream(s, 1, Purpose::Weights)).unwrap().log_lik_hat.exp())
            .collect();
        let (m, se) = mean_se(&hats);
        assert!((m - exact).abs() <= 4.0 * se, "x {x}: {m} vs {exact} (se {se})");
    }
}

#[test]
fn log_likelihood_variance_falls_with_particles() {
    let params = SvParams::synthetic_default();
    let data = simulate_sv(&params, 50, &mut stream(3, 0, Purpose::Data)).unwrap();
    let variances: Vec<f64> = [16, 32, 64, 128]
        .iter()
        .map(|&p| {
            let lls: Vec<f64> = (0..1000u64)
                .map(|s| particle_filter(&SvSsm(params), &data, p, &mut stream(s, p as u64, Purpose::Weights)).unwrap().log_lik_hat)
                .collect();
            sample_var(&lls)
        })
        .collect();
    for pair in variances.windows(2) {
        assert!(pair[1] < pair[0], "{variances:?}");
    }
}

fn sv_model(t_len: usize, particles: usize) -> PseudoMarginalModel<SvLikelihood> {
    let data = simulate_sv(&SvParams::synthetic_default(), t_len, &mut stream(4, 0, Purpose::Data)).unwrap();
    PseudoMarginalModel::new(SvLikelihood::new(data, particles).unwrap(), SvPrior::default()).unwrap()
}

#[test]
fn gradients_on_volatility_batches_are_finite() {
    let model = sv_model(30, 20);
    let truth = SvParams::synthetic_default().to_unconstrained();
    let mut r = rng(5);
    let kinds = [EstimatorKind::Naive, EstimatorKind::Am, EstimatorKind::Gm, EstimatorKind::Star];
    for c in 0..100u64 {
        let mu: Vec<f64> = truth.iter().map(|t| t + r.random_range(-1.0..1.0)).collect();
        let sd: Vec<f64> = (0..3).map(|_| r.random_range(0.05..0.5)).collect();
        let alpha = Alpha::new(r.random_range(0.0..0.95)).unwrap();
        let params = model.params(&FullCovGaussian::diagonal(mu, &sd).unwrap()).unwrap();
        let batch = draw_batch(&model, &params, 8, SeedRecord::new(6, c, Purpose::Latents)).unwrap();
        let lw = eval_log_weights(&model, &params, &batch, alpha).unwrap();
        let scores = eval_scores(&model, &params, &batch);
        for kind in kinds {
            let g = Estimator::new(kind).estimate(&lw, &scores, None).unwrap();
            assert!(g.grad.iter().all(|v| v.is_finite()), "config {c}, {kind}");
        }
    }
}

/// Likelihood of `steps` observations that each contribute `log_c`.
struct ConstantLikelihood {
    steps: usize,
    log_c: f64,
}

impl LikelihoodEstimator for ConstantLikelihood {
    fn dim(&self) -> usize {
        3
    }

    fn log_likelihood<R: Rng + ?Sized>(&self, _: &[f64], _: &mut R) -> iwvi::Result<f64> {
        Ok(self.steps as f64 * self.log_c)
    }

    fn is_stochastic(&self) -> bool {
        false
    }
}

#[test]
fn log_weight_is_the_likelihood_when_prior_equals_q() {
    let mean = [0.5, -1.0, 2.0];
    let sd = [1.5, 0.3, 2.0];
    let prior = SvPrior::Gaussian { mean, sd };
    let model = PseudoMarginalModel::new(ConstantLikelihood { steps: 12, log_c: -0.7 }, prior).unwrap();
    let params = model.params(&FullCovGaussian::diagonal(mean.to_vec(), &sd).unwrap()).unwrap();
    let batch = draw_batch(&model, &params, 50, SeedRecord::new(7, 0, Purpose::Latents)).unwrap();
    let lw = eval_log_weights(&model, &params, &batch, Alpha::ZERO).unwrap();
    for v in lw.log_w() {
        assert!((v - 12.0 * -0.7).abs() < 1e-12, "{v}");
    }
}

#[test]
fn flat_prior_weight_at_the_mean() {
    let data = simulate_sv(&SvParams::synthetic_default(), 20, &mut stream(8, 0, Purpose::Data)).unwrap();
    let lik = SvLikelihood::new(data, 30).unwrap();
    let model = PseudoMarginalModel::new(lik.clone(), SvPrior::Flat).unwrap();
    let mean = SvParams::synthetic_default().to_unconstrained().to_vec();
    let q = FullCovGaussian::diagonal(mean.clone(), &[0.2, 0.3, 0.4]).unwrap();
    let params = model.params(&q).unwrap();
    let seed = SeedRecord::new(9, 0, Purpose::Latents);
    let batch = SampleBatch { latents: vec![mean.clone()], seed };
    let lw = eval_log_weights(&model, &params, &batch, Alpha::ZERO).unwrap();
    let ll = lik.log_likelihood(&mean, &mut seed.child(0, Purpose::Weights).rng()).unwrap();
    // log N(mu; mu, diag(sd^2))
    let log_q_at_mean = -1.5 * common::LN_2PI - (0.2f64 * 0.3 * 0.4).ln();
    assert!((lw.log_w()[0] - (ll - log_q_at_mean)).abs() < 1e-10);
}

#[test]
fn pipeline_never_returns_nan() {
    let model = sv_model(20, 16);
    let mut r = rng(10);
    let mut finite = 0;
    for s in 0..1000u64 {
        let z: Vec<f64> = (0..3).map(|_| r.random_range(-4.0..4.0)).collect();
        let ll = model.likelihood().log_likelihood(&z, &mut stream(s, 0, Purpose::Weights)).unwrap();
        assert!(!ll.is_nan() && ll != f64::INFINITY, "z {z:?}: {ll}");
        if ll.is_finite() {
            finite += 1;
        }
        if z.iter().all(|v| v.abs() < 2.0) {
            assert!(ll.is_finite(), "z {z:?}");
        }
    }
    assert!(finite > 900, "{finite}");
}
