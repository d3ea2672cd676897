//! Forecast, Kalman gain, square-root analysis transforms and identity audits.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::Serialize;

use crate::ensemble::Ensemble;
use crate::error::{EsrfError, Result};
use crate::linalg::{
    inv_spd, inv_sqrt_shifted, pinv_sqrt, psd_function, range_projector, spectral_norm, sqrt_psd,
    SymmetricMatrix,
};
use crate::model::StateSpaceModel;
use crate::par::Execution;
use crate::rng::{member_normals, Purpose};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum TransformVariant {
    /// Adjustment filter `A = S(Id + SΘS)^{-1/2}S⁺` on the state space.
    Eakf,
    /// Right transform `E·T` with `T = (Id_M + ẼᵀΘẼ)^{-1/2}`.
    EtkfDirect,
    /// The state-space operator induced by `T`, applied from the left.
    EtkfViaT,
    /// Unperturbed filter `Id − K̃H`.
    Whitaker,
    /// `𝒯(P)` including the identity on `ker P`.
    UnifiedT,
}

impl TransformVariant {
    pub const ALL: [TransformVariant; 5] = [
        TransformVariant::Eakf,
        TransformVariant::EtkfDirect,
        TransformVariant::EtkfViaT,
        TransformVariant::Whitaker,
        TransformVariant::UnifiedT,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransformVariant::Eakf => "eakf",
            TransformVariant::EtkfDirect => "etkf",
            TransformVariant::EtkfViaT => "etkf-via-t",
            TransformVariant::Whitaker => "whitaker",
            TransformVariant::UnifiedT => "unified",
        }
    }

    /// ETKF when the ensemble is smaller than the state, EAKF otherwise.
    pub fn default_for(dim: usize, members: usize) -> Self {
        if members < dim {
            TransformVariant::EtkfDirect
        } else {
            TransformVariant::Eakf
        }
    }

    /// The map applied to mean-field copies: `Id − K̃(P̄)H` for the Whitaker
    /// filter, otherwise `𝒯(P̄)` (through the `T`-induced route for
    /// `EtkfViaT`).
    pub fn mean_field_operator(
        self,
        p: &SymmetricMatrix,
        h: &DMatrix<f64>,
        r: &SymmetricMatrix,
    ) -> Result<DMatrix<f64>> {
        match self {
            TransformVariant::Whitaker => transform_whitaker(p, h, r),
            TransformVariant::EtkfViaT => transform_etkf_induced(p, h, r),
            _ => transform_unified(p, h, r),
        }
    }
}

impl fmt::Display for TransformVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransformVariant {
    type Err = EsrfError;

    fn from_str(s: &str) -> Result<Self> {
        TransformVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| EsrfError::InvalidArgument(format!("unknown transform variant `{s}`")))
    }
}

/// `X^{(i)} ↦ B(X^{(i)}) + C w^{(i)}`; column `i` of `w` is member `i`'s draw.
pub fn forecast(ens: &Ensemble, model: &StateSpaceModel, w: &DMatrix<f64>) -> Result<Ensemble> {
    model.require_discrete()?;
    check_noise(ens, w)?;
    Ensemble::new(model.drift.apply_columns(ens.members()) + &model.c * w)
}

/// Standard normal model noise of step `k` for every member of replication `rep`.
pub fn model_noise(
    seed: u64,
    replication: u64,
    step: u64,
    dim: usize,
    members: usize,
    exec: Execution,
) -> DMatrix<f64> {
    member_normals(seed, Purpose::Model, replication, step, dim, members, exec)
}

fn check_noise(ens: &Ensemble, w: &DMatrix<f64>) -> Result<()> {
    if w.nrows() != ens.dim() || w.ncols() != ens.size() {
        return Err(EsrfError::DimensionMismatch(format!(
            "noise is {}x{}, ensemble is {}x{}",
            w.nrows(),
            w.ncols(),
            ens.dim(),
            ens.size()
        )));
    }
    Ok(())
}

fn check_observation(d: usize, h: &DMatrix<f64>, r: &SymmetricMatrix) -> Result<()> {
    if h.ncols() != d || h.nrows() != r.dim() {
        return Err(EsrfError::DimensionMismatch(format!(
            "H is {}x{}, R is {}x{}, state dimension {d}",
            h.nrows(),
            h.ncols(),
            r.dim(),
            r.dim()
        )));
    }
    Ok(())
}

/// `Θ = HᵀR⁻¹H`.
pub fn theta(h: &DMatrix<f64>, r: &SymmetricMatrix) -> Result<SymmetricMatrix> {
    let r_inv = inv_spd(r.as_matrix())?;
    SymmetricMatrix::new_psd(h.transpose() * r_inv * h)
}

/// `K = PHᵀ(R + HPHᵀ)^{-1}` through a Cholesky solve of `(R + HPHᵀ) Kᵀ = HP`.
pub fn kalman_gain(
    p: &SymmetricMatrix,
    h: &DMatrix<f64>,
    r: &SymmetricMatrix,
) -> Result<DMatrix<f64>> {
    check_observation(p.dim(), h, r)?;
    let hp = h * p.as_matrix();
    let s = r.as_matrix() + &hp * h.transpose();
    let chol = Cholesky::new(s).ok_or_else(|| {
        EsrfError::SolveFailure("innovation covariance R + HPHᵀ is not positive definite".into())
    })?;
    Ok(chol.solve(&hp).transpose())
}

/// `𝒯(P) = S(Id + SΘS)^{-1/2}S⁺ + (Id − SS⁺)` with `S = √P`.
pub fn transform_unified(
    p: &SymmetricMatrix,
    h: &DMatrix<f64>,
    r: &SymmetricMatrix,
) -> Result<DMatrix<f64>> {
    let (a, s, s_pinv) = eakf_parts(p, h, r)?;
    let d = p.dim();
    Ok(a + DMatrix::identity(d, d) - s.as_matrix() * s_pinv.as_matrix())
}

/// `A = S(Id + SΘS)^{-1/2}S⁺`.
pub fn transform_eakf(
    p: &SymmetricMatrix,
    h: &DMatrix<f64>,
    r: &SymmetricMatrix,
) -> Result<DMatrix<f64>> {
    eakf_parts(p, h, r).map(|(a, _, _)| a)
}

fn eakf_parts(
    p: &SymmetricMatrix,
    h: &DMatrix<f64>,
    r: &SymmetricMatrix,
) -> Result<(DMatrix<f64>, SymmetricMatrix, SymmetricMatrix)> {
    check_observation(p.dim(), h, r)?;
    let th = theta(h, r)?;
    let s = sqrt_psd(p)?;
    let s_pinv = pinv_sqrt(p)?;
    let inner = SymmetricMatrix::new_psd(s.as_matrix() * th.as_matrix() * s.as_matrix())?;
    let core = inv_sqrt_shifted(&inner)?;
    let a = s.as_matrix() * core.as_matrix() * s_pinv.as_matrix();
    Ok((a, s, s_pinv))
}

fn check_centered(e: &DMatrix<f64>) -> Result<()> {
    let scale = e.amax().max(1.0);
    let sums = e.column_sum();
    if sums.amax() > 1e-9 * scale * e.ncols() as f64 {
        return Err(EsrfError::InvalidArgument(
            "deviation matrix columns do not sum to zero".into(),
        ));
    }
    Ok(())
}

/// `T = (Id_M + ẼᵀΘẼ)^{-1/2}` with `Ẽ = E/√(M−1)` as a dense `M × M` matrix,
/// assembled from the low-rank factor so that `T·1 = 1` holds to round-off.
pub fn transform_etkf(
    e: &DMatrix<f64>,
    h: &DMatrix<f64>,
    r: &SymmetricMatrix,
) -> Result<DMatrix<f64>> {
    let m = e.ncols();
    if m < 2 {
        return Err(EsrfError::InvalidArgument(
            "ETKF needs at least 2 members".into(),
        ));
    }
    check_observation(e.nrows(), h, r)?;
    check_centered(e)?;
    Ok(EtkfFactor::new(e, h, r)?.to_matrix())
}

/// `g(s) = ((1+s)^{-1/2} − 1)/s`, continuous at `s = 0`.
fn shrink(s: f64) -> f64 {
    let root = (1.0 + s).sqrt();
    -1.0 / (root * (1.0 + root))
}

/// Low-rank form `T = Id_M + V g(VᵀV) Vᵀ` with `V = ẼᵀHᵀR^{-1/2}` (`M × q`).
/// Applying it costs `O(dMq)` instead of an `M × M` eigendecomposition.
#[derive(Clone, Debug)]
pub struct EtkfFactor {
    v: DMatrix<f64>,
    g: DMatrix<f64>,
}

impl EtkfFactor {
    pub fn new(e: &DMatrix<f64>, h: &DMatrix<f64>, r: &SymmetricMatrix) -> Result<Self> {
        let m = e.ncols();
        if m < 2 {
            return Err(EsrfError::InvalidArgument(
                "ETKF needs at least 2 members".into(),
            ));
        }
        check_observation(e.nrows(), h, r)?;
        let r_isqrt = psd_function(r, |l| 1.0 / l.sqrt())?;
        let v = (e / (m as f64 - 1.0).sqrt()).transpose() * h.transpose() * r_isqrt.as_matrix();
        let vtv = SymmetricMatrix::new_psd(v.transpose() * &v)?;
        let g = psd_function(&vtv, shrink)?.into_matrix();
        Ok(Self { v, g })
    }

    /// `E·T`.
    pub fn apply_right(&self, e: &DMatrix<f64>) -> DMatrix<f64> {
        e + (e * &self.v) * &self.g * self.v.transpose()
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        let m = self.v.nrows();
        DMatrix::identity(m, m) + &self.v * &self.g * self.v.transpose()
    }
}

/// `A_T = ẼTẼ⁺ + (Id − ẼẼ⁺)`, which only depends on `P = ẼẼᵀ`:
/// `A_T = Id + PHᵀR^{-1/2} g(R^{-1/2}HPHᵀR^{-1/2}) R^{-1/2}HΠ` with `Π` the
/// projector onto `range P`.
pub fn transform_etkf_induced(
    p: &SymmetricMatrix,
    h: &DMatrix<f64>,
    r: &SymmetricMatrix,
) -> Result<DMatrix<f64>> {
    check_observation(p.dim(), h, r)?;
    let d = p.dim();
    let r_isqrt = psd_function(r, |l| 1.0 / l.sqrt())?.into_matrix();
    let x = p.as_matrix() * h.transpose() * &r_isqrt;
    let y = &r_isqrt * h;
    let inner = SymmetricMatrix::new_psd(&y * &x)?;
    let g = psd_function(&inner, shrink)?;
    let pi = range_projector(p)?;
    Ok(DMatrix::identity(d, d) + x * g.as_matrix() * y * pi.as_matrix())
}

/// `ℛ(P) = F^{-1/2}(F^{1/2} + R^{1/2})^{-1}` with `F = R + HPHᵀ`.
pub fn whitaker_r(
    p: &SymmetricMatrix,
    h: &DMatrix<f64>,
    r: &SymmetricMatrix,
) -> Result<DMatrix<f64>> {
    check_observation(p.dim(), h, r)?;
    let f = SymmetricMatrix::new_psd(r.as_matrix() + h * p.as_matrix() * h.transpose())?;
    let f_sqrt = sqrt_psd(&f)?;
    let f_isqrt = psd_function(&f, |l| 1.0 / l.sqrt())?;
    let r_sqrt = sqrt_psd(r)?;
    let sum_inv = inv_spd(&(f_sqrt.as_matrix() + r_sqrt.as_matrix()))?;
    Ok(f_isqrt.as_matrix() * sum_inv)
}

/// `Id − K̃H` with `K̃ = PHᵀℛ(P)`.
pub fn transform_whitaker(
    p: &SymmetricMatrix,
    h: &DMatrix<f64>,
    r: &SymmetricMatrix,
) -> Result<DMatrix<f64>> {
    let d = p.dim();
    let k = p.as_matrix() * h.transpose() * whitaker_r(p, h, r)?;
    Ok(DMatrix::identity(d, d) - k * h)
}

/// Analyzed deviations `A·E` or `E·T`.
pub fn analyzed_deviations(
    ens: &Ensemble,
    variant: TransformVariant,
    h: &DMatrix<f64>,
    r: &SymmetricMatrix,
) -> Result<DMatrix<f64>> {
    let e = ens.deviations();
    let p = ens.cov();
    Ok(match variant {
        TransformVariant::Eakf => transform_eakf(p, h, r)? * e,
        TransformVariant::EtkfDirect => EtkfFactor::new(e, h, r)?.apply_right(e),
        TransformVariant::EtkfViaT => transform_etkf_induced(p, h, r)? * e,
        TransformVariant::Whitaker => transform_whitaker(p, h, r)? * e,
        TransformVariant::UnifiedT => transform_unified(p, h, r)? * e,
    })
}

/// `x̄^a = x̄^f + K(P^f)(y − Hx̄^f)`, members `x̄^a + E^a e_i`.
pub fn analysis(
    ens: &Ensemble,
    y: &DVector<f64>,
    variant: TransformVariant,
    h: &DMatrix<f64>,
    r: &SymmetricMatrix,
) -> Result<Ensemble> {
    if y.len() != h.nrows() {
        return Err(EsrfError::DimensionMismatch(format!(
            "observation has length {}, H has {} rows",
            y.len(),
            h.nrows()
        )));
    }
    let k = kalman_gain(ens.cov(), h, r)?;
    let mean = ens.mean() + k * (y - h * ens.mean());
    let dev = analyzed_deviations(ens, variant, h, r)?;
    Ensemble::from_mean_and_deviations(&mean, &dev)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub passed: bool,
}

impl Check {
    /// `lhs ≤ rhs` up to round-off.
    fn bound(name: impl Into<String>, lhs: f64, rhs: f64) -> Self {
        let passed = lhs.is_finite() && lhs <= rhs * (1.0 + 1e-12) + 1e-12;
        Self {
            name: name.into(),
            lhs,
            rhs,
            passed,
        }
    }

    /// `lhs ≤ rhs` with no slack; used for residual tolerances.
    fn tolerance(name: impl Into<String>, lhs: f64, rhs: f64) -> Self {
        Self {
            name: name.into(),
            lhs,
            rhs,
            passed: lhs.is_finite() && lhs <= rhs,
        }
    }

    fn failed(name: impl Into<String>, err: &EsrfError) -> Self {
        Self {
            name: format!("{}: {err}", name.into()),
            lhs: f64::NAN,
            rhs: f64::NAN,
            passed: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AuditReport {
    pub checks: Vec<Check>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn violations(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    fn push(&mut self, name: &str, check: Result<Check>) {
        self.checks
            .push(check.unwrap_or_else(|e| Check::failed(name, &e)));
    }
}

pub const CONSISTENCY_RTOL: f64 = 1e-8;
pub const ADJOINTNESS_RTOL: f64 = 1e-9;
pub const MEAN_PRESERVATION_ATOL: f64 = 1e-12;

fn relative(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// `‖K(P) − K(Q)‖ ≤ ‖Id − K(P)H‖‖H‖‖R⁻¹‖‖P − Q‖`.
pub fn gain_lipschitz_check(
    p: &SymmetricMatrix,
    q: &SymmetricMatrix,
    h: &DMatrix<f64>,
    r: &SymmetricMatrix,
) -> Result<Check> {
    let d = p.dim();
    let kp = kalman_gain(p, h, r)?;
    let kq = kalman_gain(q, h, r)?;
    let r_inv = inv_spd(r.as_matrix())?;
    let factor = spectral_norm(&(DMatrix::identity(d, d) - &kp * h));
    let lhs = spectral_norm(&(kp - kq));
    let rhs = factor
        * spectral_norm(h)
        * spectral_norm(&r_inv)
        * spectral_norm(&(p.as_matrix() - q.as_matrix()));
    Ok(Check::bound("gain-lipschitz", lhs, rhs))
}

/// Runs every structural identity and bound on one forecast ensemble. Never
/// fails: numerical errors become failed checks.
pub fn audit_identities(ens_f: &Ensemble, h: &DMatrix<f64>, r: &SymmetricMatrix) -> AuditReport {
    let mut report = AuditReport::default();
    let p = ens_f.cov();
    let e = ens_f.deviations();
    let d = ens_f.dim();
    let m = ens_f.size();

    let reference = kalman_gain(p, h, r).map(|k| (DMatrix::identity(d, d) - k * h) * p.as_matrix());
    for variant in TransformVariant::ALL {
        let name = format!("consistency/{variant}");
        let check = (|| {
            let target = reference
                .as_ref()
                .map_err(|e| EsrfError::SolveFailure(e.to_string()))?;
            let dev = analyzed_deviations(ens_f, variant, h, r)?;
            let pa = SymmetricMatrix::gram(&dev, 1.0 / (m as f64 - 1.0));
            let res = (pa.as_matrix() - target).norm();
            Ok(Check::tolerance(
                name.clone(),
                relative(res, p.as_matrix().norm()),
                CONSISTENCY_RTOL,
            ))
        })();
        report.push(&name, check);
    }

    let t = transform_etkf(e, h, r);
    report.push(
        "adjointness",
        (|| {
            let a = transform_eakf(p, h, r)?;
            let t = t
                .as_ref()
                .map_err(|e| EsrfError::SolveFailure(e.to_string()))?;
            let res = (a * e - e * t).norm();
            Ok(Check::tolerance(
                "adjointness",
                relative(res, e.norm()),
                ADJOINTNESS_RTOL,
            ))
        })(),
    );
    report.push(
        "etkf-mean",
        (|| {
            let t = t
                .as_ref()
                .map_err(|e| EsrfError::SolveFailure(e.to_string()))?;
            let ones = DVector::from_element(m, 1.0);
            let res = (t * &ones - ones).amax();
            Ok(Check::tolerance("etkf-mean", res, MEAN_PRESERVATION_ATOL))
        })(),
    );

    let norm_p = p.spectral_norm();
    let norm_h = spectral_norm(h);
    report.push(
        "bound/unified-norm",
        (|| {
            let th = theta(h, r)?;
            let lhs = spectral_norm(&transform_unified(p, h, r)?);
            Ok(Check::bound(
                "bound/unified-norm",
                lhs,
                1.0 + 0.5 * th.spectral_norm() * norm_p,
            ))
        })(),
    );
    report.push(
        "bound/gain-factor",
        (|| {
            let k = kalman_gain(p, h, r)?;
            let r_inv = inv_spd(r.as_matrix())?;
            let lhs = spectral_norm(&(DMatrix::identity(d, d) - k * h));
            Ok(Check::bound(
                "bound/gain-factor",
                lhs,
                1.0 + norm_p * norm_h * norm_h * spectral_norm(&r_inv),
            ))
        })(),
    );
    report.push(
        "gain-lipschitz",
        (|| {
            let k = kalman_gain(p, h, r)?;
            let pa = SymmetricMatrix::new_psd((DMatrix::identity(d, d) - k * h) * p.as_matrix())?;
            gain_lipschitz_check(p, &pa, h, r)
        })(),
    );
    report.push(
        "bound/whitaker-r",
        (|| {
            let r_inv = inv_spd(r.as_matrix())?;
            let lhs = spectral_norm(&whitaker_r(p, h, r)?);
            Ok(Check::bound(
                "bound/whitaker-r",
                lhs,
                0.5 * spectral_norm(&r_inv),
            ))
        })(),
    );
    report.push(
        "bound/whitaker-norm",
        (|| {
            let r_inv = inv_spd(r.as_matrix())?;
            let lhs = spectral_norm(&transform_whitaker(p, h, r)?);
            Ok(Check::bound(
                "bound/whitaker-norm",
                lhs,
                1.0 + 0.5 * norm_p * norm_h * norm_h * spectral_norm(&r_inv),
            ))
        })(),
    );
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> SymmetricMatrix {
        SymmetricMatrix::new(DMatrix::from_element(1, 1, v)).unwrap()
    }

    fn one() -> DMatrix<f64> {
        DMatrix::identity(1, 1)
    }

    #[test]
    fn gain_examples() {
        let r = SymmetricMatrix::identity(1);
        assert_eq!(kalman_gain(&scalar(0.0), &one(), &r).unwrap()[(0, 0)], 0.0);
        assert!((kalman_gain(&scalar(3.0), &one(), &r).unwrap()[(0, 0)] - 0.75).abs() < 1e-15);
        let k = kalman_gain(
            &SymmetricMatrix::identity(2),
            &DMatrix::identity(2, 2),
            &SymmetricMatrix::identity(2),
        )
        .unwrap();
        assert!((k - DMatrix::identity(2, 2) * 0.5).norm() < 1e-15);
    }

    #[test]
    fn scalar_transforms_are_one_half() {
        let r = SymmetricMatrix::identity(1);
        let p = scalar(3.0);
        for t in [
            transform_unified(&p, &one(), &r).unwrap(),
            transform_eakf(&p, &one(), &r).unwrap(),
            transform_whitaker(&p, &one(), &r).unwrap(),
            transform_etkf_induced(&p, &one(), &r).unwrap(),
        ] {
            assert!((t[(0, 0)] - 0.5).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_covariance_gives_identity() {
        let r = SymmetricMatrix::identity(2);
        let h = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 2.0, 0.0, 1.0, 0.0]);
        let p = SymmetricMatrix::zeros(3);
        for t in [
            transform_unified(&p, &h, &r).unwrap(),
            transform_whitaker(&p, &h, &r).unwrap(),
            transform_etkf_induced(&p, &h, &r).unwrap(),
        ] {
            assert!((t - DMatrix::identity(3, 3)).norm() < 1e-15);
        }
    }

    #[test]
    fn no_observation_gives_identity() {
        let r = SymmetricMatrix::identity(1);
        let h = DMatrix::zeros(1, 2);
        let a = transform_eakf(&SymmetricMatrix::identity(2), &h, &r).unwrap();
        assert!((a - DMatrix::identity(2, 2)).norm() < 1e-15);
        let e = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 1.0, 0.5, 0.5, -1.0]);
        let t = transform_etkf(&e, &h, &r).unwrap();
        assert!((t - DMatrix::identity(3, 3)).norm() < 1e-15);
    }

    #[test]
    fn two_member_etkf_spectrum() {
        let e = DMatrix::from_row_slice(1, 2, &[-1.0, 1.0]);
        let t = transform_etkf(&e, &one(), &SymmetricMatrix::identity(1)).unwrap();
        let mut eig: Vec<f64> = t.symmetric_eigenvalues().iter().copied().collect();
        eig.sort_by(f64::total_cmp);
        assert!((eig[0] - 3f64.sqrt().recip()).abs() < 1e-14);
        assert!((eig[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn low_rank_factor_matches_dense_transform() {
        let e0 = DMatrix::from_fn(3, 6, |i, j| ((i * 6 + j) as f64 * 1.7).cos());
        let ens = Ensemble::new(e0).unwrap();
        let h = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.5, 0.0, 2.0, 0.0]);
        let r = SymmetricMatrix::new(DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3])).unwrap();
        let et = ens.deviations() / 5f64.sqrt();
        let g = SymmetricMatrix::new_psd(et.transpose() * theta(&h, &r).unwrap().as_matrix() * &et)
            .unwrap();
        let dense = inv_sqrt_shifted(&g).unwrap().into_matrix();
        let factor = EtkfFactor::new(ens.deviations(), &h, &r).unwrap();
        assert!((factor.to_matrix() - dense).norm() < 1e-12);
    }

    #[test]
    fn uncentered_deviations_rejected() {
        let e = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        assert!(transform_etkf(&e, &one(), &SymmetricMatrix::identity(1)).is_err());
    }

    #[test]
    fn two_member_analysis_by_hand() {
        let ens = Ensemble::new(DMatrix::from_row_slice(1, 2, &[0.0, 2.0])).unwrap();
        let y = DVector::from_element(1, 2.0);
        let r = SymmetricMatrix::identity(1);
        for variant in TransformVariant::ALL {
            let a = analysis(&ens, &y, variant, &one(), &r).unwrap();
            let s = 3f64.sqrt().recip();
            assert!((a.mean()[0] - 5.0 / 3.0).abs() < 1e-14, "{variant}");
            assert!(
                (a.members()[(0, 0)] - (5.0 / 3.0 - s)).abs() < 1e-14,
                "{variant}"
            );
            assert!(
                (a.members()[(0, 1)] - (5.0 / 3.0 + s)).abs() < 1e-14,
                "{variant}"
            );
            assert!(
                (a.cov().as_matrix()[(0, 0)] - 2.0 / 3.0).abs() < 1e-14,
                "{variant}"
            );
        }
    }

    #[test]
    fn degenerate_ensemble_unchanged() {
        let ens = Ensemble::new(DMatrix::from_element(2, 3, 1.5)).unwrap();
        let h = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let y = &h * ens.mean();
        for variant in TransformVariant::ALL {
            let a = analysis(&ens, &y, variant, &h, &SymmetricMatrix::identity(1)).unwrap();
            assert_eq!(a.members(), ens.members());
        }
    }

    #[test]
    fn scalar_audit_passes() {
        let a = 3f64.sqrt();
        let ens = Ensemble::new(DMatrix::from_row_slice(1, 3, &[-a, 0.0, a])).unwrap();
        assert!((ens.cov().as_matrix()[(0, 0)] - 3.0).abs() < 1e-12);
        let report = audit_identities(&ens, &one(), &SymmetricMatrix::identity(1));
        assert!(report.passed(), "{report:?}");
        assert!(report.get("consistency/eakf").unwrap().lhs <= 1e-10);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in TransformVariant::ALL {
            assert_eq!(v.name().parse::<TransformVariant>().unwrap(), v);
        }
        assert!("enkf".parse::<TransformVariant>().is_err());
        assert_eq!(
            TransformVariant::default_for(3, 2),
            TransformVariant::EtkfDirect
        );
        assert_eq!(TransformVariant::default_for(3, 3), TransformVariant::Eakf);
    }
}
