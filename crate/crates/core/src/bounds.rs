//! Monte Carlo estimates of the ELBO / IWAE / VR-IWAE bounds, normalized
//! weights and effective sample size.
//!
//! Everything is computed from log weights with a max shift, so weights that
//! span hundreds of orders of magnitude never overflow.

use serde::{Deserialize, Serialize};

use crate::model::{Alpha, LogWeightBatch};

/// `log(sum(exp(x)))` with max shift. Empty input gives `-inf`.
pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// `log(exp(a) + exp(b))`.
#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// For each `i`, `log sum_{j != i} exp(x_j)`, computed from prefix and suffix
/// accumulations so no cancellation happens when one term dominates.
pub fn leave_one_out_logsumexp(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut prefix = vec![f64::NEG_INFINITY; n + 1];
    for i in 0..n {
        prefix[i + 1] = log_add_exp(prefix[i], values[i]);
    }
    let mut out = vec![f64::NEG_INFINITY; n];
    let mut suffix = f64::NEG_INFINITY;
    for i in (0..n).rev() {
        out[i] = log_add_exp(prefix[i], suffix);
        suffix = log_add_exp(suffix, values[i]);
    }
    out
}

/// The tempered log weights `(1 - alpha) log w_i`.
pub fn powered_log_weights(logw: &LogWeightBatch) -> Vec<f64> {
    let p = logw.alpha().power();
    logw.log_w().iter().map(|&v| p * v).collect()
}

/// One unbiased sample of the VR-IWAE bound:
/// `1/(1-alpha) * [logsumexp((1-alpha) log w) - log N]`.
pub fn vr_iwae_estimate(logw: &LogWeightBatch) -> f64 {
    let u = powered_log_weights(logw);
    (logsumexp(&u) - (logw.n() as f64).ln()) / logw.alpha().power()
}

/// One sample of the ELBO averaged over the batch, `mean(log w)`. This is the
/// `alpha -> 1` limit of the VR-IWAE bound and is kept as its own code path.
pub fn elbo_estimate(log_w: &[f64]) -> f64 {
    log_w.iter().sum::<f64>() / log_w.len() as f64
}

/// Self-normalized tempered weights `w_i^{1-alpha} / sum_j w_j^{1-alpha}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedWeights {
    pub wbar: Vec<f64>,
    pub alpha: Alpha,
}

impl NormalizedWeights {
    pub fn len(&self) -> usize {
        self.wbar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.wbar.is_empty()
    }

    /// `1 / sum wbar_i^2`.
    pub fn ess(&self) -> f64 {
        1.0 / self.wbar.iter().map(|w| w * w).sum::<f64>()
    }
}

pub fn normalized_weights(logw: &LogWeightBatch) -> NormalizedWeights {
    let u = powered_log_weights(logw);
    let max = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut wbar: Vec<f64> = u.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = wbar.iter().sum();
    wbar.iter_mut().for_each(|w| *w /= total);
    NormalizedWeights { wbar, alpha: logw.alpha() }
}

/// Effective sample size of the tempered weights, a value in `[1, N]`.
pub fn ess(logw: &LogWeightBatch) -> f64 {
    normalized_weights(logw).ess()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn batch(v: &[f64], alpha: f64) -> LogWeightBatch {
        LogWeightBatch::new(v.to_vec(), Alpha::new(alpha).unwrap()).unwrap()
    }

    #[test]
    fn single_sample_recovers_elbo_sample() {
        for a in [0.0, 0.3, 0.9] {
            assert!((vr_iwae_estimate(&batch(&[-2.75], a)) + 2.75).abs() < 1e-14);
        }
    }

    #[test]
    fn constant_zero_weights() {
        for a in [0.0, 0.5] {
            assert!(vr_iwae_estimate(&batch(&[0.0; 7], a)).abs() < 1e-15);
        }
    }

    #[test]
    fn iwae_two_sample_value() {
        let v = vr_iwae_estimate(&batch(&[2f64.ln(), 4f64.ln()], 0.0));
        assert!((v - 3f64.ln()).abs() < 1e-14);
        assert!((v - 1.09861).abs() < 1e-5);
    }

    #[test]
    fn normalized_weight_examples() {
        let w = normalized_weights(&batch(&[0.0, 0.0, 0.0], 0.0));
        assert!(w.wbar.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));

        let w = normalized_weights(&batch(&[2f64.ln(), 0.0], 0.5));
        let s2 = 2f64.sqrt();
        assert!((w.wbar[0] - s2 / (1.0 + s2)).abs() < 1e-14);
        assert!((w.wbar[1] - 1.0 / (1.0 + s2)).abs() < 1e-14);
        assert!((w.wbar[0] - 0.58579).abs() < 1e-5);

        let w = normalized_weights(&batch(&[1.7; 5], 0.9));
        assert!(w.wbar.iter().all(|x| (x - 0.2).abs() < 1e-15));
    }

    #[test]
    fn ess_examples() {
        assert!((ess(&batch(&[0.4; 9], 0.3)) - 9.0).abs() < 1e-12);
        assert!((ess(&batch(&[100.0, 0.0, 0.0], 0.0)) - 1.0).abs() < 1e-10);
        assert!((ess(&batch(&[2f64.ln(), 0.0], 0.5)) - 1.94281).abs() < 1e-5);
    }

    #[test]
    fn leave_one_out_matches_direct_sum() {
        let v = [0.3, -2.0, 5.0, 1.0];
        let loo = leave_one_out_logsumexp(&v);
        for i in 0..v.len() {
            let rest: Vec<f64> = v.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, x)| *x).collect();
            assert!((loo[i] - logsumexp(&rest)).abs() < 1e-14);
        }
        assert_eq!(leave_one_out_logsumexp(&[1.0]), vec![f64::NEG_INFINITY]);
    }

    #[test]
    fn leave_one_out_survives_a_dominant_term() {
        let loo = leave_one_out_logsumexp(&[800.0, 0.0, 0.0]);
        assert!((loo[0] - 2f64.ln()).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn normalized_weights_are_stable(v in prop::collection::vec(-700.0f64..700.0, 1..40), a in 0.0f64..0.99) {
            let w = normalized_weights(&batch(&v, a));
            prop_assert!(w.wbar.iter().all(|x| x.is_finite() && *x >= 0.0));
            prop_assert!((w.wbar.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let e = w.ess();
            prop_assert!(e >= 1.0 - 1e-12 && e <= v.len() as f64 + 1e-9);
        }

        #[test]
        fn shift_invariance(v in prop::collection::vec(-50.0f64..50.0, 1..30), c in -100.0f64..100.0, a in 0.0f64..0.95) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let d = vr_iwae_estimate(&batch(&shifted, a)) - vr_iwae_estimate(&batch(&v, a));
            prop_assert!((d - c).abs() < 1e-9 * (1.0 + c.abs()));
        }
    }
}
