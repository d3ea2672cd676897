mod common;

use common::{normal_matrix, random_psd, rel_err, rng, with_spectrum};
use esrf_core::error::EsrfError;
use esrf_core::linalg::{
    inv_sqrt_shifted, pinv_sqrt, range_projector, spectral_norm, sqrt_psd, SymmetricMatrix,
};
use esrf_core::quadrature::integral_inv_sqrt;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn spectrum(max_dim: usize, max_eig: f64) -> impl Strategy<Value = (u64, Vec<f64>)> {
    (
        any::<u64>(),
        prop::collection::vec(0.0..max_eig, 1..=max_dim),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quadrature_matches_spectral_route((seed, eigs) in spectrum(8, 5.0)) {
        let s = with_spectrum(&mut rng(seed), &eigs);
        let quad = integral_inv_sqrt(&s, 64).unwrap();
        let exact = inv_sqrt_shifted(&s).unwrap();
        prop_assert!(spectral_norm(&(quad.as_matrix() - exact.as_matrix())) < 1e-8);
    }

    #[test]
    fn sqrt_scales_with_c(seed in any::<u64>(), d in 1usize..=6, c in 0.0f64..10.0) {
        let p = random_psd(&mut rng(seed), d, d, 1.0);
        let scaled = SymmetricMatrix::new_psd(p.as_matrix() * (c * c)).unwrap();
        let lhs = sqrt_psd(&scaled).unwrap().into_matrix();
        let rhs = sqrt_psd(&p).unwrap().into_matrix() * c;
        prop_assert!((lhs - &rhs).norm() <= 1e-12 * rhs.norm().max(1.0));
    }

    #[test]
    fn flagged_outputs_revalidate(seed in any::<u64>(), d in 1usize..=6, rank in 0usize..=6) {
        let p = random_psd(&mut rng(seed), d, rank.min(d), 3.0);
        for out in [sqrt_psd(&p).unwrap(), inv_sqrt_shifted(&p).unwrap()] {
            prop_assert!(out.is_psd());
            prop_assert!(SymmetricMatrix::new(out.into_matrix()).unwrap().into_psd().is_ok());
        }
    }

    #[test]
    fn inv_sqrt_shifted_spectrum_in_unit_interval(seed in any::<u64>(), d in 1usize..=6) {
        let s = random_psd(&mut rng(seed), d, d, 10.0);
        let eig = inv_sqrt_shifted(&s).unwrap().into_matrix().symmetric_eigen().eigenvalues;
        prop_assert!(eig.iter().all(|&l| l > 0.0 && l <= 1.0 + 1e-14));
    }

    #[test]
    fn pinv_sqrt_recovers_range_projector(seed in any::<u64>(), d in 2usize..=6, rank in 1usize..=5) {
        let rank = rank.min(d - 1);
        let mut r = rng(seed);
        let basis = normal_matrix(&mut r, d, rank).qr().q();
        let eigs: Vec<f64> = (0..rank).map(|i| 0.5 + i as f64).collect();
        let p = SymmetricMatrix::new_psd(
            &basis * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(eigs)) * basis.transpose(),
        )
        .unwrap();
        let oracle = &basis * basis.transpose();
        let product = pinv_sqrt(&p).unwrap().into_matrix() * sqrt_psd(&p).unwrap().into_matrix();
        prop_assert!((&product - &oracle).norm() < 1e-10);
        prop_assert!((range_projector(&p).unwrap().into_matrix() - oracle).norm() < 1e-10);
    }

    #[test]
    fn spectral_norm_is_top_singular_value(seed in any::<u64>(), rows in 1usize..=5, cols in 1usize..=5) {
        let a = normal_matrix(&mut rng(seed), rows, cols);
        let top = (a.transpose() * &a).symmetric_eigen().eigenvalues.max();
        prop_assert!((spectral_norm(&a).powi(2) - top).abs() <= 1e-10 * top.max(1.0));
    }
}

#[test]
fn wide_spectrum_is_reported_not_misevaluated() {
    let s = with_spectrum(&mut rng(1), &[0.0, 1e3]);
    assert!(matches!(
        integral_inv_sqrt(&s, 64),
        Err(EsrfError::QuadratureUnderResolved { .. })
    ));
}

#[test]
fn sqrt_round_trip_random_d5() {
    let p = random_psd(&mut rng(5), 5, 5, 2.0);
    let s = sqrt_psd(&p).unwrap().into_matrix();
    assert!(rel_err(&(&s * &s), p.as_matrix()) < 1e-12);
}
