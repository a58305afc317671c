use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spectral_sphere::matlin::{frobenius_norm, power_iteration, svd_oracle, Matrix};
use spectral_sphere::spectral_geom::{lr_scaler, retract_hard, tangent_projector, ScalerKind};

fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    Matrix::random_normal(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn retraction_bounds_frobenius(seed in 0u64..100_000, rows in 1usize..24, cols in 1usize..24, c in 0.1f64..8.0) {
        let w = gaussian(rows, cols, seed);
        let r = c * (rows as f64 / cols as f64).sqrt();
        let sigma = svd_oracle(&w).unwrap().s[0];
        let out = retract_hard(&w, sigma, r).unwrap();
        prop_assert!(frobenius_norm(&out) <= (rows.min(cols) as f64).sqrt() * r + 1e-9);
    }

    #[test]
    fn retraction_is_idempotent(seed in 0u64..100_000, rows in 2usize..24, cols in 2usize..24) {
        let w = gaussian(rows, cols, seed);
        let once = retract_hard(&w, power_iteration(&w, None, 5000, 1e-12).unwrap().triplet.sigma, 1.5).unwrap();
        let est = power_iteration(&once, None, 5000, 1e-12).unwrap().triplet.sigma;
        let twice = retract_hard(&once, est, 1.5).unwrap();
        prop_assert!(frobenius_norm(&twice.sub(&once)) <= 1e-6 * frobenius_norm(&once));
    }

    #[test]
    fn projector_has_unit_frobenius_norm(seed in 0u64..100_000, rows in 1usize..30, cols in 1usize..30) {
        let w = gaussian(rows, cols, seed);
        let t = power_iteration(&w, None, 50, 1e-6).unwrap().triplet;
        prop_assert!((frobenius_norm(&tangent_projector(&t)) - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn mup_scaler_is_one_on_square(d in 1usize..4096) {
        prop_assert_eq!(lr_scaler(ScalerKind::SpectralMup, d, d), 1.0);
    }
}
