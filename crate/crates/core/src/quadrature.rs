//! Generalized Gauss–Laguerre quadrature for the integral representation
//! `(Id + A)^{-1/2} = (1/√π) ∫₀^∞ t^{-1/2} e^{-t} e^{-tA} dt`.
//!
//! This path never diagonalizes `A`; it only needs matrix exponentials, so it
//! works for the non-symmetric products `PΘ` as well and is independent of
//! the spectral route in [`crate::linalg`].

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{EsrfError, Result};
use crate::linalg::{spectral_norm, SymmetricMatrix};

/// Tolerated difference between the `n`-node and `n/2`-node evaluations.
pub const QUAD_TOL: f64 = 1e-6;

/// Gauss rule for the weight `t^α e^{-t}` on `(0, ∞)`, with weights divided
/// by `Γ(α + 1)` so that they sum to one.
#[derive(Clone, Debug)]
pub struct GaussLaguerre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLaguerre {
    /// Golub–Welsch: nodes are the eigenvalues of the Jacobi matrix of the
    /// generalized Laguerre recurrence, weights the squared first components
    /// of its normalized eigenvectors.
    pub fn new(n: usize, alpha: f64) -> Self {
        assert!(n >= 1, "quadrature needs at least one node");
        assert!(alpha > -1.0);
        let jacobi = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                2.0 * i as f64 + alpha + 1.0
            } else if i + 1 == j || j + 1 == i {
                let k = i.max(j) as f64;
                (k * (k + alpha)).sqrt()
            } else {
                0.0
            }
        });
        let eig = SymmetricEigen::new(jacobi);
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|j| (eig.eigenvalues[j], eig.eigenvectors[(0, j)].powi(2)))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        Self {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        }
    }

    /// Rule for `t^{-1/2} e^{-t}`; the normalization absorbs the `1/√π`.
    pub fn inverse_sqrt_weight(n: usize) -> Self {
        Self::new(n, -0.5)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&t, &w)| w * f(t))
            .sum()
    }

    fn integrate_exp(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let d = a.nrows();
        let mut acc = DMatrix::zeros(d, d);
        for (&t, &w) in self.nodes.iter().zip(&self.weights) {
            let e = (a * (-t)).exp();
            acc += e * w;
        }
        acc
    }
}

/// Evaluates `(1/√π) ∫₀^∞ t^{-1/2} e^{-t} e^{-tA} dt` for a square matrix `A`
/// whose spectrum is real and nonnegative (e.g. `A = PΘ` with `P`, `Θ` PSD).
///
/// The truncation error is estimated by comparing against the `nodes/2` rule.
pub fn integral_inv_sqrt_general(a: &DMatrix<f64>, nodes: usize) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(EsrfError::DimensionMismatch(format!(
            "expected a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if nodes < 4 {
        return Err(EsrfError::InvalidArgument(format!(
            "quadrature needs at least 4 nodes, got {nodes}"
        )));
    }
    let fine = GaussLaguerre::inverse_sqrt_weight(nodes).integrate_exp(a);
    let coarse = GaussLaguerre::inverse_sqrt_weight(nodes / 2).integrate_exp(a);
    let estimate = spectral_norm(&(&fine - &coarse));
    if !(estimate <= QUAD_TOL) {
        return Err(EsrfError::QuadratureUnderResolved {
            estimate,
            tolerance: QUAD_TOL,
        });
    }
    Ok(fine)
}

/// Quadrature evaluation of `(Id + S)^{-1/2}` for PSD `S`.
pub fn integral_inv_sqrt(s: &SymmetricMatrix, nodes: usize) -> Result<SymmetricMatrix> {
    let s = s.clone().into_psd()?;
    let value = integral_inv_sqrt_general(s.as_matrix(), nodes)?;
    SymmetricMatrix::new(value)
}
