//! Symmetric matrix functions and norms.
//!
//! Every matrix function here goes through a symmetric eigendecomposition:
//! `f(P) = V diag(f(λ)) Vᵀ`. Dimensions are small (tens, at most ~100), so
//! the dense spectral route is both exact up to eigensolver accuracy and cheap.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{EsrfError, Result};

/// Relative eigenvalue tolerance for PSD validation: eigenvalues down to
/// `-EIG_TOL_REL * max(1, |λ|_max)` are accepted and clipped to zero.
pub const EIG_TOL_REL: f64 = 1e-10;

/// Eigenvalues below `PINV_CUTOFF * λ_max` are treated as exactly zero by the
/// pseudo-inverse.
pub const PINV_CUTOFF: f64 = 1e-12;

/// Dense symmetric matrix, optionally asserted positive semidefinite.
#[derive(Clone, Debug, PartialEq)]
pub struct SymmetricMatrix {
    entries: DMatrix<f64>,
    psd: bool,
}

impl SymmetricMatrix {
    /// Symmetrizes `m` as `(m + mᵀ)/2`, so `a[i][j] == a[j][i]` holds bit-for-bit.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(EsrfError::DimensionMismatch(format!(
                "expected a square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        Ok(Self {
            entries: symmetrize(m),
            psd: false,
        })
    }

    /// Symmetrizes and validates positive semidefiniteness, clipping
    /// round-off negative eigenvalues to zero.
    pub fn new_psd(m: DMatrix<f64>) -> Result<Self> {
        let sym = Self::new(m)?;
        sym.into_psd()
    }

    pub fn identity(d: usize) -> Self {
        Self {
            entries: DMatrix::identity(d, d),
            psd: true,
        }
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            entries: DMatrix::zeros(d, d),
            psd: true,
        }
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    /// `scale · E Eᵀ`, PSD by construction.
    pub fn gram(e: &DMatrix<f64>, scale: f64) -> Self {
        assert!(scale >= 0.0, "gram scale must be nonnegative");
        Self {
            entries: symmetrize((e * e.transpose()) * scale),
            psd: true,
        }
    }

    /// Clips every negative eigenvalue to zero and reports the removed mass
    /// `Σ |λ₋|`. Never fails on indefinite input.
    pub fn clip_negative(m: DMatrix<f64>) -> Result<(Self, f64)> {
        let sym = Self::new(m)?;
        if sym.dim() == 0 {
            return Ok((Self { psd: true, ..sym }, 0.0));
        }
        let eig = SymmetricEigen::new(sym.entries.clone());
        let mass: f64 = eig
            .eigenvalues
            .iter()
            .filter(|&&l| l < 0.0)
            .map(|l| -l)
            .sum();
        if mass == 0.0 {
            return Ok((Self { psd: true, ..sym }, 0.0));
        }
        let clipped = eig.eigenvalues.map(|l| l.max(0.0));
        Ok((
            Self {
                entries: reconstruct(&eig.eigenvectors, &clipped),
                psd: true,
            },
            mass,
        ))
    }

    /// Validates the PSD property and returns a PSD-flagged copy.
    pub fn into_psd(self) -> Result<Self> {
        if self.psd {
            return Ok(self);
        }
        let eig = SymmetricEigen::new(self.entries.clone());
        let tol = eig_tolerance(&eig.eigenvalues);
        let min = eig.eigenvalues.min();
        if self.dim() > 0 && min < -tol {
            return Err(EsrfError::NotPsd {
                min_eigenvalue: min,
                tolerance: tol,
            });
        }
        if self.dim() > 0 && min < 0.0 {
            let clipped = eig.eigenvalues.map(|l| l.max(0.0));
            return Ok(Self {
                entries: reconstruct(&eig.eigenvectors, &clipped),
                psd: true,
            });
        }
        Ok(Self {
            entries: self.entries,
            psd: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_psd(&self) -> bool {
        self.psd
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.entries
    }

    pub fn trace(&self) -> f64 {
        self.entries.trace()
    }

    pub fn spectral_norm(&self) -> f64 {
        if self.dim() == 0 {
            return 0.0;
        }
        SymmetricEigen::new(self.entries.clone()).eigenvalues.amax()
    }

    /// Eigenvalues after PSD validation and clipping.
    fn psd_spectrum(&self) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let eig = SymmetricEigen::new(self.entries.clone());
        let tol = eig_tolerance(&eig.eigenvalues);
        let min = if self.dim() == 0 {
            0.0
        } else {
            eig.eigenvalues.min()
        };
        if min < -tol {
            return Err(EsrfError::NotPsd {
                min_eigenvalue: min,
                tolerance: tol,
            });
        }
        Ok((eig.eigenvectors, eig.eigenvalues.map(|l| l.max(0.0))))
    }

    fn map_psd_spectrum(&self, f: impl Fn(f64, f64) -> f64) -> Result<DMatrix<f64>> {
        let (vectors, values) = self.psd_spectrum()?;
        let lambda_max = if values.is_empty() { 0.0 } else { values.max() };
        let mapped = values.map(|l| f(l, lambda_max));
        Ok(reconstruct(&vectors, &mapped))
    }
}

fn eig_tolerance(values: &DVector<f64>) -> f64 {
    let scale = if values.is_empty() {
        0.0
    } else {
        values.amax()
    };
    EIG_TOL_REL * scale.max(1.0)
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            m[(i, i)]
        } else {
            0.5 * (m[(i, j)] + m[(j, i)])
        }
    })
}

fn reconstruct(vectors: &DMatrix<f64>, values: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = vectors.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= values[j];
    }
    symmetrize(scaled * vectors.transpose())
}

/// Principal square root `S` with `S·S = P`.
pub fn sqrt_psd(p: &SymmetricMatrix) -> Result<SymmetricMatrix> {
    let entries = p.map_psd_spectrum(|l, _| l.sqrt())?;
    Ok(SymmetricMatrix { entries, psd: true })
}

/// Moore–Penrose pseudo-inverse of `sqrt_psd(P)`.
pub fn pinv_sqrt(p: &SymmetricMatrix) -> Result<SymmetricMatrix> {
    let entries = p.map_psd_spectrum(|l, lmax| {
        if lmax <= 0.0 || l <= PINV_CUTOFF * lmax {
            0.0
        } else {
            1.0 / l.sqrt()
        }
    })?;
    Ok(SymmetricMatrix { entries, psd: true })
}

/// `(Id + S)^{-1/2}` for PSD `S`; the spectrum of the result lies in (0, 1].
pub fn inv_sqrt_shifted(s: &SymmetricMatrix) -> Result<SymmetricMatrix> {
    let entries = s.map_psd_spectrum(|l, _| 1.0 / (1.0 + l).sqrt())?;
    Ok(SymmetricMatrix { entries, psd: true })
}

/// Projector onto the range of `P`, using the same rank decision as [`pinv_sqrt`].
pub fn range_projector(p: &SymmetricMatrix) -> Result<SymmetricMatrix> {
    let entries = p.map_psd_spectrum(|l, lmax| {
        if lmax <= 0.0 || l <= PINV_CUTOFF * lmax {
            0.0
        } else {
            1.0
        }
    })?;
    Ok(SymmetricMatrix { entries, psd: true })
}

/// `f(P)` through the spectrum of a PSD matrix.
pub fn psd_function(p: &SymmetricMatrix, f: impl Fn(f64) -> f64) -> Result<SymmetricMatrix> {
    let entries = p.map_psd_spectrum(|l, _| f(l))?;
    Ok(SymmetricMatrix {
        entries,
        psd: false,
    })
}

/// Inverse of a symmetric positive definite matrix through its Cholesky factor.
pub fn inv_spd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = nalgebra::Cholesky::new(a.clone())
        .ok_or_else(|| EsrfError::SolveFailure("matrix is not positive definite".into()))?;
    Ok(symmetrize(chol.inverse()))
}

/// Largest singular value.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone().singular_values().max()
}

pub fn trace(a: &DMatrix<f64>) -> Result<f64> {
    if !a.is_square() {
        return Err(EsrfError::DimensionMismatch(format!(
            "trace of a {}x{} matrix",
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(a.trace())
}

pub fn frobenius(a: &DMatrix<f64>) -> f64 {
    a.norm()
}
