#![allow(dead_code)]

use esrf_core::linalg::SymmetricMatrix;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// `G Gᵀ / cols` with `G` of shape `d × rank`; singular when `rank < d`.
pub fn random_psd(rng: &mut impl Rng, d: usize, rank: usize, scale: f64) -> SymmetricMatrix {
    let g = normal_matrix(rng, d, rank);
    SymmetricMatrix::gram(&g, scale / rank.max(1) as f64)
}

pub fn random_spd(rng: &mut impl Rng, d: usize) -> SymmetricMatrix {
    let m = random_psd(rng, d, d, 1.0).into_matrix() + DMatrix::identity(d, d) * 0.2;
    SymmetricMatrix::new_psd(m).unwrap()
}

/// PSD matrix with prescribed eigenvalues in a random orthonormal basis.
pub fn with_spectrum(rng: &mut impl Rng, eigenvalues: &[f64]) -> SymmetricMatrix {
    let d = eigenvalues.len();
    let q = normal_matrix(rng, d, d).qr().q();
    let m = &q
        * DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(eigenvalues))
        * q.transpose();
    SymmetricMatrix::new_psd(m).unwrap()
}

pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}
