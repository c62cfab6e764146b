//! Checks on the test oracles themselves.

mod common;

#[test]
fn gauss_hermite_integrates_moments() {
    let (x, w) = common::gauss_hermite(64);
    let sqrt_pi = std::f64::consts::PI.sqrt();
    assert!((w.iter().sum::<f64>() - sqrt_pi).abs() < 1e-12);
    let m2: f64 = x.iter().zip(&w).map(|(x, w)| w * x * x).sum();
    assert!((m2 - sqrt_pi / 2.0).abs() < 1e-12);
}

#[test]
fn kalman_single_step_matches_closed_form() {
    let (b0, b1, s2): (f64, f64, f64) = (0.2, 0.5, 0.3);
    let var = s2 / (1.0 - b1 * b1) + 1.0;
    let want = -0.5 * (common::LN_2PI + var.ln() + (1.3 - b0) * (1.3 - b0) / var);
    assert!((common::kalman_log_likelihood(b0, b1, s2, &[1.3]) - want).abs() < 1e-14);
}
