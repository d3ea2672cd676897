use nalgebra::{DMatrix, DVector};

use crate::error::{EsrfError, Result};
use crate::linalg::{sqrt_psd, SymmetricMatrix};
use crate::par::Execution;
use crate::rng::{member_normals, Purpose};

/// Ordered ensemble with cached empirical mean, deviations and covariance
/// (normalized by `1/(M−1)`).
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    members: DMatrix<f64>,
    mean: DVector<f64>,
    deviations: DMatrix<f64>,
    cov: SymmetricMatrix,
}

impl Ensemble {
    /// Members are the columns of a `d × M` matrix.
    pub fn new(members: DMatrix<f64>) -> Result<Self> {
        let m = members.ncols();
        if m < 2 {
            return Err(EsrfError::InvalidArgument(format!(
                "an ensemble needs at least 2 members, got {m}"
            )));
        }
        if members.nrows() == 0 {
            return Err(EsrfError::InvalidArgument(
                "zero-dimensional ensemble".into(),
            ));
        }
        let mean = members.column_mean();
        let mut deviations = members.clone();
        for mut col in deviations.column_iter_mut() {
            col -= &mean;
        }
        let cov = SymmetricMatrix::gram(&deviations, 1.0 / (m as f64 - 1.0));
        Ok(Self {
            members,
            mean,
            deviations,
            cov,
        })
    }

    pub fn from_columns(columns: &[DVector<f64>]) -> Result<Self> {
        if columns.is_empty() {
            return Err(EsrfError::InvalidArgument("empty ensemble".into()));
        }
        let d = columns[0].len();
        if columns.iter().any(|c| c.len() != d) {
            return Err(EsrfError::DimensionMismatch(
                "ensemble members have different lengths".into(),
            ));
        }
        Self::new(DMatrix::from_columns(columns))
    }

    /// `mean + deviation column i` for every column.
    pub fn from_mean_and_deviations(
        mean: &DVector<f64>,
        deviations: &DMatrix<f64>,
    ) -> Result<Self> {
        let mut members = deviations.clone();
        for mut col in members.column_iter_mut() {
            col += mean;
        }
        Self::new(members)
    }

    pub fn dim(&self) -> usize {
        self.members.nrows()
    }

    pub fn size(&self) -> usize {
        self.members.ncols()
    }

    pub fn members(&self) -> &DMatrix<f64> {
        &self.members
    }

    pub fn member(&self, i: usize) -> DVector<f64> {
        self.members.column(i).clone_owned()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn deviations(&self) -> &DMatrix<f64> {
        &self.deviations
    }

    pub fn cov(&self) -> &SymmetricMatrix {
        &self.cov
    }

    pub fn into_members(self) -> DMatrix<f64> {
        self.members
    }
}

/// `M` draws `mean + √P ξ_i` where `ξ_i` comes from counter 0 of member `i`'s
/// stream for `purpose`.
pub fn gaussian_draws(
    mean: &DVector<f64>,
    cov: &SymmetricMatrix,
    members: usize,
    seed: u64,
    purpose: Purpose,
    replication: u64,
    exec: Execution,
) -> Result<DMatrix<f64>> {
    let d = mean.len();
    if cov.dim() != d {
        return Err(EsrfError::DimensionMismatch(format!(
            "mean has length {d}, covariance is {}x{}",
            cov.dim(),
            cov.dim()
        )));
    }
    let root = sqrt_psd(cov)?;
    let xi = member_normals(seed, purpose, replication, 0, d, members, exec);
    let mut x = root.as_matrix() * xi;
    for mut col in x.column_iter_mut() {
        col += mean;
    }
    Ok(x)
}
