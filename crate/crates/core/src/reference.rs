//! Kalman and Kalman–Bucy moment recursions.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{EsrfError, Result};
use crate::linalg::SymmetricMatrix;
use crate::model::{ObservationKind, ObservationSeries, StateSpaceModel};
use crate::transforms::kalman_gain;

/// Cumulative negative-eigenvalue mass the Riccati integrator may clip.
pub const PSD_CLIP_BUDGET: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: SymmetricMatrix,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: SymmetricMatrix) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(EsrfError::DimensionMismatch(format!(
                "mean has length {}, covariance is {}x{}",
                mean.len(),
                cov.dim(),
                cov.dim()
            )));
        }
        Ok(Self {
            mean,
            cov: cov.into_psd()?,
        })
    }

    pub fn prior(model: &StateSpaceModel) -> Self {
        Self {
            mean: model.prior_mean.clone(),
            cov: model.prior_cov.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `(Bm, BPBᵀ + Q)`.
pub fn kf_predict(
    b: &GaussianBelief,
    drift: &DMatrix<f64>,
    q: &SymmetricMatrix,
) -> Result<GaussianBelief> {
    let d = b.dim();
    if drift.nrows() != d || drift.ncols() != d || q.dim() != d {
        return Err(EsrfError::DimensionMismatch("prediction operands".into()));
    }
    let p = drift * b.cov.as_matrix() * drift.transpose() + q.as_matrix();
    Ok(GaussianBelief {
        mean: drift * &b.mean,
        cov: SymmetricMatrix::new_psd(p)?,
    })
}

/// Kalman update with the gain shared with the ensemble analysis.
pub fn kf_update(
    b: &GaussianBelief,
    y: &DVector<f64>,
    h: &DMatrix<f64>,
    r: &SymmetricMatrix,
) -> Result<GaussianBelief> {
    let d = b.dim();
    let k = kalman_gain(&b.cov, h, r)?;
    let mean = &b.mean + &k * (y - h * &b.mean);
    let p = (DMatrix::identity(d, d) - k * h) * b.cov.as_matrix();
    Ok(GaussianBelief {
        mean,
        cov: SymmetricMatrix::new_psd(p)?,
    })
}

/// Discrete Kalman filter over `Y_1..Y_K`; entry `k` holds `(forecast, analysis)`
/// at step `k + 1`.
pub fn kf_run(
    model: &StateSpaceModel,
    obs: &ObservationSeries,
) -> Result<Vec<(GaussianBelief, GaussianBelief)>> {
    model.require_discrete()?;
    let b = linear_drift(model)?;
    let mut belief = GaussianBelief::prior(model);
    let mut out = Vec::with_capacity(obs.len());
    for y in &obs.values {
        let f = kf_predict(&belief, b, &model.q)?;
        belief = kf_update(&f, y, &model.h, &model.r)?;
        out.push((f, belief.clone()));
    }
    Ok(out)
}

pub(crate) fn linear_drift(model: &StateSpaceModel) -> Result<&DMatrix<f64>> {
    model.drift.linear_matrix().ok_or_else(|| {
        EsrfError::InvalidModel(format!("model `{}` has a nonlinear drift", model.name))
    })
}

/// One explicit Euler step of the Kalman–Bucy mean and Riccati equations.
/// Returns the new belief and the negative-eigenvalue mass clipped from `P`.
#[allow(clippy::too_many_arguments)]
pub fn kb_step(
    b: &GaussianBelief,
    drift: &DMatrix<f64>,
    q: &SymmetricMatrix,
    h: &DMatrix<f64>,
    r_inv: &DMatrix<f64>,
    theta: &SymmetricMatrix,
    dy: &DVector<f64>,
    dt: f64,
) -> Result<(GaussianBelief, f64)> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(EsrfError::InvalidStep(dt));
    }
    let p = b.cov.as_matrix();
    let gain = p * h.transpose() * r_inv;
    let mean = &b.mean + drift * &b.mean * dt + gain * (dy - h * &b.mean * dt);
    let bp = drift * p;
    let rhs = &bp + bp.transpose() + q.as_matrix() - p * theta.as_matrix() * p;
    let (cov, clipped) = SymmetricMatrix::clip_negative(p + rhs * dt)?;
    Ok((GaussianBelief { mean, cov }, clipped))
}

#[derive(Clone, Debug)]
pub struct KbRun {
    /// Beliefs at `t_0 = 0, t_1, …, t_N`.
    pub beliefs: Vec<GaussianBelief>,
    pub clipped_mass: f64,
}

/// Integrates the Kalman–Bucy equations along the increments `ΔY_j`.
pub fn kb_integrate(
    b0: &GaussianBelief,
    model: &StateSpaceModel,
    obs: &ObservationSeries,
    dt: f64,
) -> Result<KbRun> {
    model.require_continuous()?;
    if obs.kind != ObservationKind::Increments {
        return Err(EsrfError::InvalidArgument(
            "Kalman–Bucy integration consumes observation increments".into(),
        ));
    }
    if let Some(grid) = obs.dt {
        if (grid - dt).abs() > 1e-12 * dt.abs().max(1.0) {
            return Err(EsrfError::InvalidStep(dt));
        }
    }
    let drift = linear_drift(model)?;
    let mut beliefs = Vec::with_capacity(obs.len() + 1);
    beliefs.push(b0.clone());
    let mut clipped_mass = 0.0;
    for dy in &obs.values {
        let (next, clipped) = kb_step(
            beliefs.last().expect("nonempty"),
            drift,
            &model.q,
            &model.h,
            model.r_inv(),
            model.theta(),
            dy,
            dt,
        )?;
        clipped_mass += clipped;
        if clipped_mass > PSD_CLIP_BUDGET {
            return Err(EsrfError::NotPsd {
                min_eigenvalue: -clipped,
                tolerance: PSD_CLIP_BUDGET,
            });
        }
        beliefs.push(next);
    }
    Ok(KbRun {
        beliefs,
        clipped_mass,
    })
}

/// Writes `time, m_1..m_d, p_11, p_12, …, p_dd` (upper triangle, row-major).
pub fn write_beliefs_csv<W: Write>(
    out: W,
    times: &[f64],
    beliefs: &[GaussianBelief],
) -> Result<()> {
    if times.len() != beliefs.len() {
        return Err(EsrfError::DimensionMismatch(format!(
            "{} times for {} beliefs",
            times.len(),
            beliefs.len()
        )));
    }
    let d = beliefs.first().map_or(0, |b| b.dim());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["time".to_string()];
    header.extend((1..=d).map(|i| format!("m_{i}")));
    for i in 1..=d {
        header.extend((i..=d).map(|j| format!("p_{i}{j}")));
    }
    w.write_record(&header)?;
    for (t, b) in times.iter().zip(beliefs) {
        let mut row = vec![t.to_string()];
        row.extend(b.mean.iter().map(|v| v.to_string()));
        let p = b.cov.as_matrix();
        for i in 0..d {
            row.extend((i..d).map(|j| p[(i, j)].to_string()));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn belief(m: f64, p: f64) -> GaussianBelief {
        GaussianBelief::new(
            DVector::from_element(1, m),
            SymmetricMatrix::new(DMatrix::from_element(1, 1, p)).unwrap(),
        )
        .unwrap()
    }

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn predict_examples() {
        let b = belief(1.0, 2.0);
        let q = SymmetricMatrix::identity(1);
        let f = kf_predict(&b, &s(0.9), &q).unwrap();
        assert!((f.cov.as_matrix()[(0, 0)] - 2.62).abs() < 1e-14);
        assert!((f.mean[0] - 0.9).abs() < 1e-15);
        let same = kf_predict(&b, &s(1.0), &SymmetricMatrix::zeros(1)).unwrap();
        assert_eq!(same, b);
        let forget = kf_predict(&b, &s(0.0), &q).unwrap();
        assert_eq!(forget.mean[0], 0.0);
        assert_eq!(forget.cov.as_matrix()[(0, 0)], 1.0);
    }

    #[test]
    fn update_examples() {
        let r = SymmetricMatrix::identity(1);
        let a = kf_update(
            &belief(0.0, 3.0),
            &DVector::from_element(1, 1.0),
            &s(1.0),
            &r,
        )
        .unwrap();
        assert!((a.mean[0] - 0.75).abs() < 1e-15);
        assert!((a.cov.as_matrix()[(0, 0)] - 0.75).abs() < 1e-15);
        let z = belief(0.4, 0.0);
        let same = kf_update(&z, &DVector::from_element(1, 5.0), &s(1.0), &r).unwrap();
        assert_eq!(same, z);
        let zero_innov = kf_update(
            &belief(2.0, 1.0),
            &DVector::from_element(1, 2.0),
            &s(1.0),
            &r,
        )
        .unwrap();
        assert_eq!(zero_innov.mean[0], 2.0);
        assert!((zero_innov.cov.as_matrix()[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn euler_step_rejects_bad_dt() {
        let b = belief(0.0, 1.0);
        let one = SymmetricMatrix::identity(1);
        let r = kb_step(
            &b,
            &s(0.0),
            &one,
            &s(1.0),
            &s(1.0),
            &one,
            &DVector::zeros(1),
            0.0,
        );
        assert!(matches!(r, Err(EsrfError::InvalidStep(_))));
    }

    #[test]
    fn belief_csv_columns() {
        let b = GaussianBelief::new(DVector::zeros(2), SymmetricMatrix::identity(2)).unwrap();
        let mut buf = Vec::new();
        write_beliefs_csv(&mut buf, &[0.0], &[b]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "time,m_1,m_2,p_11,p_12,p_22");
        assert_eq!(text.lines().nth(1).unwrap(), "0,0,0,1,0,1");
    }
}
