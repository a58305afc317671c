use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spectral_sphere::matlin::{frobenius_norm, nuclear_norm, power_iteration, svd_oracle, Matrix};
use spectral_sphere::optim::{
    h_eval, muon_sphere_step, solve_lambda, sphere_step, sso_step, LambdaRule, OptimizerState, SsoConfig,
};
use spectral_sphere::spectral_geom::{spectral_init, tangent_projector, RadiusSpec};

fn gaussian(rows: usize, cols: usize, std: f64, seed: u64) -> Matrix {
    Matrix::random_normal(rows, cols, std, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Normalized momentum and the projector of an independent weight.
fn pair(rows: usize, cols: usize, seed: u64) -> (Matrix, Matrix) {
    let g = gaussian(rows, cols, 1.0, seed);
    let m_hat = g.scale(1.0 / frobenius_norm(&g));
    let w = gaussian(rows, cols, 1.0, seed ^ 0xABCD);
    let t = power_iteration(&w, None, 2000, 1e-12).unwrap().triplet;
    (m_hat, tangent_projector(&t))
}

fn top_sigma(a: &Matrix) -> f64 {
    svd_oracle(a).unwrap().s[0]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn h_is_nondecreasing(seed in 0u64..10_000, rows in 3usize..14, cols in 3usize..14) {
        let (m_hat, theta) = pair(rows, cols, seed);
        let span = 2.0 * nuclear_norm(&m_hat).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for k in 0..=40 {
            let lambda = -span + 2.0 * span * k as f64 / 40.0;
            let h = h_eval(&m_hat, &theta, lambda, 8).unwrap();
            prop_assert!(h >= prev - 1e-6, "h dropped from {prev} to {h} at lambda {lambda}");
            prev = h;
        }
    }

    #[test]
    fn solved_root_is_localized(seed in 0u64..10_000, rows in 3usize..14, cols in 3usize..14) {
        let (m_hat, theta) = pair(rows, cols, seed);
        let rep = solve_lambda(&m_hat, &theta, &SsoConfig::default()).unwrap();
        let bound = 2.0 * nuclear_norm(&m_hat).unwrap();
        prop_assert!(rep.lambda_star.abs() <= bound);
        prop_assert!(rep.residual <= 2e-4 || rep.degenerate || rep.exhausted);
        prop_assert!(rep.iterations() <= SsoConfig::default().solver_max_iters);
    }

    #[test]
    fn update_has_unit_spectral_norm(seed in 0u64..10_000, rows in 4usize..20, cols in 4usize..20) {
        let radius = RadiusSpec::new(2.0, rows, cols).unwrap();
        let w = spectral_init(rows, cols, &radius, 0.02, seed).unwrap();
        let g = gaussian(rows, cols, 1.0, seed + 1);
        let cfg = SsoConfig::default();
        let mut state = OptimizerState::new(rows, cols);
        let (next, info) = sso_step(&w, &g, &mut state, &cfg, &radius).unwrap();
        let retracted = w.scale(radius.radius() / info.sigma_before);
        let phi = retracted.sub(&next).scale(1.0 / info.step_size);
        let s = top_sigma(&phi);
        prop_assert!((s - 1.0).abs() <= 0.02, "||Phi||_2 = {s}");
        let ratio = top_sigma(&next.sub(&retracted)) / top_sigma(&retracted);
        prop_assert!(ratio >= 0.9 * info.step_size / radius.radius() && ratio <= 1.1 * info.step_size / radius.radius());
    }
}

#[test]
fn h_saturates_far_from_the_root() {
    for seed in 0..6 {
        let (m_hat, theta) = pair(12, 9, seed);
        let far = 1e3 * nuclear_norm(&m_hat).unwrap();
        let hi = h_eval(&m_hat, &theta, far, 8).unwrap();
        let lo = h_eval(&m_hat, &theta, -far, 8).unwrap();
        assert!((hi - 1.0).abs() < 1e-2, "h(+) = {hi}");
        assert!((lo + 1.0).abs() < 1e-2, "h(-) = {lo}");
    }
}

#[test]
fn zero_multiplier_matches_muon_sphere_bitwise() {
    let radius = RadiusSpec::new(2.0, 16, 24).unwrap();
    let cfg = SsoConfig::default();
    let mut w1 = spectral_init(16, 24, &radius, 0.02, 3).unwrap();
    let mut w2 = w1.clone();
    let (mut s1, mut s2) = (OptimizerState::new(16, 24), OptimizerState::new(16, 24));
    for step in 0..10 {
        let g = gaussian(16, 24, 1.0, 100 + step);
        w1 = sphere_step(&w1, &g, &mut s1, &cfg, &radius, LambdaRule::Fixed(0.0)).unwrap().0;
        w2 = muon_sphere_step(&w2, &g, &mut s2, &cfg, &radius).unwrap().0;
        assert_eq!(w1, w2);
    }
}

#[test]
fn radius_holds_and_drift_is_second_order() {
    let (rows, cols) = (24, 16);
    let radius = RadiusSpec::new(2.0, rows, cols).unwrap();
    let r = radius.radius();
    // Far below the default eta the solver's tangency tolerance dominates the drift.
    let cfg = SsoConfig::default();
    let mut w = spectral_init(rows, cols, &radius, 0.02, 11).unwrap();
    let mut state = OptimizerState::new(rows, cols);
    // A target inside the sphere keeps the top singular value separated; one far
    // outside flattens the top of the spectrum and power iteration cannot
    // resolve sigma_1 to 1e-5 within its budget.
    let teacher = gaussian(rows, cols, 1.0, 12);
    let teacher = teacher.scale(0.5 * r / top_sigma(&teacher));
    for step in 0..100 {
        // Gradient of 0.5 ||W - teacher||_F^2 plus a little noise.
        let mut g = w.sub(&teacher);
        g.axpy(0.1, &gaussian(rows, cols, 1.0, 1000 + step));
        let (next, info) = sso_step(&w, &g, &mut state, &cfg, &radius).unwrap();
        let retracted = w.scale(r / info.sigma_before);
        assert!((top_sigma(&retracted) - r).abs() <= 1e-5, "step {step}");
        if step % 20 == 0 {
            let phi = retracted.sub(&next).scale(1.0 / info.step_size);
            let mut half = retracted.clone();
            half.axpy(-0.5 * info.step_size, &phi);
            let full = (top_sigma(&next) - r).abs();
            let half = (top_sigma(&half) - r).abs();
            assert!(full / half >= 3.0, "drift ratio {} at step {step}", full / half);
        }
        w = next;
    }
}
