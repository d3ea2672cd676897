//! Coupled finite-ensemble / mean-field systems and their error statistics.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::ensemble::{gaussian_draws, Ensemble};
use crate::error::{EsrfError, Result};
use crate::linalg::{spectral_norm, SymmetricMatrix};
use crate::model::{ObservationKind, ObservationSeries, StateSpaceModel};
use crate::par::Execution;
use crate::reference::{
    kb_step, kf_predict, kf_update, linear_drift, GaussianBelief, PSD_CLIP_BUDGET,
};
use crate::rng::{member_normals, Purpose};
use crate::transforms::{analysis, forecast, model_noise, TransformVariant};

/// Where the moments `(m̄, P̄)` of the mean-field law come from.
#[derive(Clone, Debug)]
pub enum LawSource {
    /// Kalman (discrete) or Kalman–Bucy (continuous) recursions, advanced
    /// inside each step from the current law.
    Exact,
    /// Precomputed path of a large reference ensemble.
    Reference(Arc<LawPath>),
}

/// Moments along one observation record. Discrete paths hold `(forecast,
/// analysis)` beliefs for `k = 1..K`; continuous paths hold beliefs at
/// `t_1..t_N`. Index 0 is always the prior.
#[derive(Clone, Debug)]
pub struct LawPath {
    pub initial: GaussianBelief,
    pub forecast: Vec<GaussianBelief>,
    pub analysis: Vec<GaussianBelief>,
    pub members: usize,
}

#[derive(Clone, Debug)]
pub struct CoupledSystem {
    pub ensemble: Ensemble,
    /// Mean-field copies `X̄^{(i)}` as columns.
    pub mf_members: DMatrix<f64>,
    pub law: GaussianBelief,
    pub step: usize,
    pub seed: u64,
    pub replication: u64,
    pub clipped_mass: f64,
}

impl CoupledSystem {
    /// Draws `M` initial states from the prior; member `i` of the ensemble and
    /// mean-field copy `i` start at the same point.
    pub fn initialize(
        model: &StateSpaceModel,
        members: usize,
        seed: u64,
        replication: u64,
        exec: Execution,
    ) -> Result<Self> {
        let x0 = gaussian_draws(
            &model.prior_mean,
            &model.prior_cov,
            members,
            seed,
            Purpose::Initial,
            replication,
            exec,
        )?;
        Self::from_parts(
            Ensemble::new(x0.clone())?,
            x0,
            GaussianBelief::prior(model),
            seed,
            replication,
        )
    }

    pub fn from_parts(
        ensemble: Ensemble,
        mf_members: DMatrix<f64>,
        law: GaussianBelief,
        seed: u64,
        replication: u64,
    ) -> Result<Self> {
        if mf_members.shape() != ensemble.members().shape() || law.dim() != ensemble.dim() {
            return Err(EsrfError::DimensionMismatch(
                "ensemble, mean-field copies and law disagree in shape".into(),
            ));
        }
        Ok(Self {
            ensemble,
            mf_members,
            law,
            step: 0,
            seed,
            replication,
            clipped_mass: 0.0,
        })
    }

    pub fn size(&self) -> usize {
        self.ensemble.size()
    }

    pub fn dim(&self) -> usize {
        self.ensemble.dim()
    }
}

fn shift_columns(x: &DMatrix<f64>, v: &DVector<f64>, sign: f64) -> DMatrix<f64> {
    let mut out = x.clone();
    for mut col in out.column_iter_mut() {
        col.axpy(sign, v, 1.0);
    }
    out
}

/// Forecast and analysis rows produced by one discrete step.
#[derive(Clone, Debug)]
pub struct DiscreteStep {
    pub forecast: ErrorRow,
    pub analysis: ErrorRow,
}

/// Advances both systems from `k − 1` to `k` with the same draws `w^{(i)}`.
/// With [`LawSource::Exact`] the law goes through `kf_predict`/`kf_update`.
pub fn step_coupled_discrete(
    sys: &mut CoupledSystem,
    y: &DVector<f64>,
    variant: TransformVariant,
    model: &StateSpaceModel,
    law: &LawSource,
    exec: Execution,
) -> Result<DiscreteStep> {
    model.require_discrete()?;
    let k = sys.step + 1;
    let w = model_noise(
        sys.seed,
        sys.replication,
        k as u64,
        sys.dim(),
        sys.size(),
        exec,
    );
    let (law_f, law_a) = match law {
        LawSource::Exact => {
            let f = kf_predict(&sys.law, linear_drift(model)?, &model.q)?;
            let a = kf_update(&f, y, &model.h, &model.r)?;
            (f, a)
        }
        LawSource::Reference(path) => (
            lookup(&path.forecast, k, "forecast")?.clone(),
            lookup(&path.analysis, k, "analysis")?.clone(),
        ),
    };

    let ens_f = forecast(&sys.ensemble, model, &w)?;
    let mf_f = model.drift.apply_columns(&sys.mf_members) + &model.c * &w;
    let forecast_row = error_row(k, k as f64, &ens_f, &mf_f, &law_f);

    let ens_a = analysis(&ens_f, y, variant, &model.h, &model.r)?;
    let op = variant.mean_field_operator(&law_f.cov, &model.h, &model.r)?;
    let mf_a = shift_columns(
        &(op * shift_columns(&mf_f, &law_f.mean, -1.0)),
        &law_a.mean,
        1.0,
    );
    let analysis_row = error_row(k, k as f64, &ens_a, &mf_a, &law_a);

    sys.ensemble = ens_a;
    sys.mf_members = mf_a;
    sys.law = law_a;
    sys.step = k;
    Ok(DiscreteStep {
        forecast: forecast_row,
        analysis: analysis_row,
    })
}

fn lookup<'a>(v: &'a [GaussianBelief], k: usize, what: &str) -> Result<&'a GaussianBelief> {
    v.get(k - 1).ok_or_else(|| {
        EsrfError::InvalidArgument(format!("reference law has no {what} belief for step {k}"))
    })
}

/// One Euler–Maruyama step of both the ensemble Kalman–Bucy filter and the
/// mean-field copies, sharing `ΔW^{(i)}` and `ΔY`.
pub fn step_coupled_continuous(
    sys: &mut CoupledSystem,
    dy: &DVector<f64>,
    model: &StateSpaceModel,
    dt: f64,
    law: &LawSource,
    exec: Execution,
) -> Result<ErrorRow> {
    model.require_continuous()?;
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(EsrfError::InvalidStep(dt));
    }
    let j = sys.step;
    let xi = member_normals(
        sys.seed,
        Purpose::Model,
        sys.replication,
        j as u64,
        sys.dim(),
        sys.size(),
        exec,
    );
    let dw = &model.c * xi * dt.sqrt();

    let gain_of = |p: &DMatrix<f64>| p * model.h.transpose() * model.r_inv();
    let innovation = |x: &DMatrix<f64>, center: &DVector<f64>| {
        // ΔY − ½H(X^{(i)} + center)dt for every column
        let hx = &model.h * x;
        let hc = &model.h * center;
        let mut out = DMatrix::zeros(hx.nrows(), hx.ncols());
        for (i, mut col) in out.column_iter_mut().enumerate() {
            col.copy_from(&(dy - (hx.column(i) + &hc) * (0.5 * dt)));
        }
        out
    };

    let x = sys.ensemble.members();
    let ens_next = x
        + model.drift.apply_columns(x) * dt
        + &dw
        + gain_of(sys.ensemble.cov().as_matrix()) * innovation(x, sys.ensemble.mean());
    let xb = &sys.mf_members;
    let mf_next = xb
        + model.drift.apply_columns(xb) * dt
        + &dw
        + gain_of(sys.law.cov.as_matrix()) * innovation(xb, &sys.law.mean);

    let law_next = match law {
        LawSource::Exact => {
            let (next, clipped) = kb_step(
                &sys.law,
                linear_drift(model)?,
                &model.q,
                &model.h,
                model.r_inv(),
                model.theta(),
                dy,
                dt,
            )?;
            sys.clipped_mass += clipped;
            if sys.clipped_mass > PSD_CLIP_BUDGET {
                return Err(EsrfError::NotPsd {
                    min_eigenvalue: -clipped,
                    tolerance: PSD_CLIP_BUDGET,
                });
            }
            next
        }
        LawSource::Reference(path) => lookup(&path.analysis, j + 1, "continuous")?.clone(),
    };

    sys.ensemble = Ensemble::new(ens_next)?;
    sys.mf_members = mf_next;
    sys.law = law_next;
    sys.step = j + 1;
    Ok(error_row(
        sys.step,
        sys.step as f64 * dt,
        &sys.ensemble,
        &sys.mf_members,
        &sys.law,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrorRow {
    pub index: usize,
    pub time: f64,
    pub members: usize,
    pub delta1: f64,
    pub delta2: f64,
    pub delta4: f64,
    /// `‖x̄ − m̄‖`.
    pub mean_gap: f64,
    /// `‖P − P̄‖`.
    pub cov_gap: f64,
    /// `‖m̄^M − m̄‖` with `m̄^M` the mean of the mean-field copies.
    pub mf_mean_gap: f64,
    /// `‖P − P̄^M‖` with `P̄^M` the covariance of the mean-field copies.
    pub cov_gap_mf: f64,
    pub tr_p: f64,
    pub tr_pbar_m: f64,
    /// `((1/M)Σ‖X̄^{(i)}‖⁴)^{1/4}`.
    pub mf_moment4: f64,
    pub stopped: bool,
}

/// Residual statistics of the current state of a coupled system.
pub fn error_stats(sys: &CoupledSystem) -> ErrorRow {
    error_row(
        sys.step,
        sys.step as f64,
        &sys.ensemble,
        &sys.mf_members,
        &sys.law,
    )
}

fn error_row(
    index: usize,
    time: f64,
    ens: &Ensemble,
    mf: &DMatrix<f64>,
    law: &GaussianBelief,
) -> ErrorRow {
    let m = ens.size();
    let norms: Vec<f64> = (0..m)
        .map(|i| (ens.members().column(i) - mf.column(i)).norm())
        .collect();
    let mf_norms: Vec<f64> = mf.column_iter().map(|c| c.norm()).collect();
    let mf_mean = mf.column_mean();
    let mf_dev = shift_columns(mf, &mf_mean, -1.0);
    let mf_cov = SymmetricMatrix::gram(&mf_dev, 1.0 / (m as f64 - 1.0));
    let p = ens.cov().as_matrix();
    ErrorRow {
        index,
        time,
        members: m,
        delta1: crate::stats::power_mean(&norms, 1.0),
        delta2: crate::stats::power_mean(&norms, 2.0),
        delta4: crate::stats::power_mean(&norms, 4.0),
        mean_gap: (ens.mean() - &law.mean).norm(),
        cov_gap: spectral_norm(&(p - law.cov.as_matrix())),
        mf_mean_gap: (&mf_mean - &law.mean).norm(),
        cov_gap_mf: spectral_norm(&(p - mf_cov.as_matrix())),
        tr_p: ens.cov().trace(),
        tr_pbar_m: mf_cov.trace(),
        mf_moment4: crate::stats::power_mean(&mf_norms, 4.0),
        stopped: false,
    }
}

impl ErrorRow {
    pub fn delta(&self, p: u32) -> Option<f64> {
        match p {
            1 => Some(self.delta1),
            2 => Some(self.delta2),
            4 => Some(self.delta4),
            _ => None,
        }
    }

    /// `‖x̄ − m̄‖ ≤ Δ^{M,1} + ‖m̄^M − m̄‖`.
    pub fn mean_triangle_holds(&self) -> bool {
        self.mean_gap <= (self.delta1 + self.mf_mean_gap) * (1.0 + 1e-12) + 1e-12
    }

    /// `‖P − P̄^M‖ ≤ 2√(M/(M−1))(√tr P + √tr P̄^M)Δ^{M,2}`.
    pub fn covariance_bound_holds(&self) -> bool {
        let m = self.members as f64;
        let rhs =
            2.0 * (m / (m - 1.0)).sqrt() * (self.tr_p.sqrt() + self.tr_pbar_m.sqrt()) * self.delta2;
        self.cov_gap_mf <= rhs * (1.0 + 1e-12) + 1e-12
    }

    pub fn power_means_ordered(&self) -> bool {
        self.delta1 <= self.delta2 * (1.0 + 1e-12) && self.delta2 <= self.delta4 * (1.0 + 1e-12)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrorSeries {
    pub members: usize,
    pub variant: String,
    pub seed: u64,
    pub replication: u64,
    pub continuous: bool,
    pub rows: Vec<ErrorRow>,
}

impl ErrorSeries {
    /// First index with `tr P ≥ n` and with `tr P̄^M ≥ n`; `None` is `+∞`.
    pub fn stopping_times(&self, n: f64) -> (Option<usize>, Option<usize>) {
        let tr: Vec<f64> = self.rows.iter().map(|r| r.tr_p).collect();
        let tr_bar: Vec<f64> = self.rows.iter().map(|r| r.tr_pbar_m).collect();
        (stopping_time(&tr, n), stopping_time(&tr_bar, n))
    }

    /// Position of `θ_n ∧ θ̄_n`, or `None` when neither trace reaches `n`.
    pub fn stop_index(&self, n: f64) -> Option<usize> {
        match self.stopping_times(n) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    /// Flags every row at or after the stopping index.
    pub fn mark_stopped(&mut self, n: f64) {
        let stop = self.stop_index(n);
        for (i, row) in self.rows.iter_mut().enumerate() {
            row.stopped = stop.is_some_and(|s| i >= s);
        }
    }

    /// `sup (Δ^{M,p})^p` over the rows up to and including the stopping index.
    pub fn sup_delta_pow(&self, p: u32, stop: Option<usize>) -> f64 {
        let end = stop.map_or(self.rows.len(), |s| (s + 1).min(self.rows.len()));
        self.rows[..end]
            .iter()
            .map(|r| r.delta(p).unwrap_or(f64::NAN).powi(p as i32))
            .fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "k_or_t",
            "M",
            "variant",
            "delta2",
            "delta4",
            "mean_gap",
            "cov_gap",
            "trP",
            "trPbarM",
            "stopped_flag",
        ])?;
        for r in &self.rows {
            let when = if self.continuous {
                r.time.to_string()
            } else {
                r.index.to_string()
            };
            w.write_record([
                when,
                r.members.to_string(),
                self.variant.clone(),
                r.delta2.to_string(),
                r.delta4.to_string(),
                r.mean_gap.to_string(),
                r.cov_gap.to_string(),
                r.tr_p.to_string(),
                r.tr_pbar_m.to_string(),
                u8::from(r.stopped).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// First index with `values[i] ≥ n`; `None` stands for `+∞`.
pub fn stopping_time(values: &[f64], n: f64) -> Option<usize> {
    if n.is_nan() || n == f64::INFINITY {
        return None;
    }
    values.iter().position(|&v| v >= n)
}

/// Default localization level `n = 10·tr(P̄_0) + 10·T·tr(Q)`.
pub fn default_stop_level(model: &StateSpaceModel, horizon: f64) -> f64 {
    10.0 * model.prior_cov.trace() + 10.0 * horizon * model.q.trace()
}

/// A discrete twin experiment shared by every ensemble size and replication.
#[derive(Clone, Debug)]
pub struct DiscreteSetup {
    pub model: StateSpaceModel,
    pub obs: ObservationSeries,
    pub variant: TransformVariant,
    pub seed: u64,
    pub law: LawSource,
}

#[derive(Clone, Debug)]
pub struct DiscreteRun {
    /// Analysis rows for `k = 0..K`; row 0 is the common initial state.
    pub analysis: ErrorSeries,
    /// Forecast rows for `k = 1..K`.
    pub forecast: ErrorSeries,
}

pub fn run_discrete(
    setup: &DiscreteSetup,
    members: usize,
    replication: u64,
    exec: Execution,
) -> Result<DiscreteRun> {
    if setup.obs.kind != ObservationKind::Levels {
        return Err(EsrfError::InvalidArgument(
            "discrete runs need observation levels".into(),
        ));
    }
    let mut sys = CoupledSystem::initialize(&setup.model, members, setup.seed, replication, exec)?;
    let series = |rows| ErrorSeries {
        members,
        variant: setup.variant.name().to_string(),
        seed: setup.seed,
        replication,
        continuous: false,
        rows,
    };
    let mut analysis_rows = vec![error_stats(&sys)];
    let mut forecast_rows = Vec::with_capacity(setup.obs.len());
    for y in &setup.obs.values {
        let step =
            step_coupled_discrete(&mut sys, y, setup.variant, &setup.model, &setup.law, exec)?;
        forecast_rows.push(step.forecast);
        analysis_rows.push(step.analysis);
    }
    Ok(DiscreteRun {
        analysis: series(analysis_rows),
        forecast: series(forecast_rows),
    })
}

#[derive(Clone, Debug)]
pub struct ContinuousSetup {
    pub model: StateSpaceModel,
    pub obs: ObservationSeries,
    pub dt: f64,
    pub seed: u64,
    pub law: LawSource,
}

/// Rows at `t_0..t_N`; stopped flags are left unset.
pub fn run_continuous(
    setup: &ContinuousSetup,
    members: usize,
    replication: u64,
    exec: Execution,
) -> Result<ErrorSeries> {
    if setup.obs.kind != ObservationKind::Increments {
        return Err(EsrfError::InvalidArgument(
            "continuous runs need observation increments".into(),
        ));
    }
    let mut sys = CoupledSystem::initialize(&setup.model, members, setup.seed, replication, exec)?;
    let mut rows = Vec::with_capacity(setup.obs.len() + 1);
    rows.push(error_stats(&sys));
    for dy in &setup.obs.values {
        rows.push(step_coupled_continuous(
            &mut sys,
            dy,
            &setup.model,
            setup.dt,
            &setup.law,
            exec,
        )?);
    }
    Ok(ErrorSeries {
        members,
        variant: "enkbf".to_string(),
        seed: setup.seed,
        replication,
        continuous: true,
        rows,
    })
}

fn belief_of(ens: &Ensemble) -> GaussianBelief {
    GaussianBelief {
        mean: ens.mean().clone(),
        cov: ens.cov().clone(),
    }
}

/// Mean-field moments estimated by a self-propagating ensemble of `members`
/// particles driven by the same observations. Its noise comes from dedicated
/// streams, independent of every coupled replication.
pub fn reference_law_discrete(
    model: &StateSpaceModel,
    obs: &ObservationSeries,
    variant: TransformVariant,
    members: usize,
    seed: u64,
    exec: Execution,
) -> Result<LawPath> {
    model.require_discrete()?;
    let x0 = gaussian_draws(
        &model.prior_mean,
        &model.prior_cov,
        members,
        seed,
        Purpose::ReferenceInitial,
        0,
        exec,
    )?;
    let mut ens = Ensemble::new(x0)?;
    let mut path = LawPath {
        initial: GaussianBelief::prior(model),
        forecast: Vec::with_capacity(obs.len()),
        analysis: Vec::with_capacity(obs.len()),
        members,
    };
    for (k, y) in obs.values.iter().enumerate() {
        let w = member_normals(
            seed,
            Purpose::ReferenceModel,
            0,
            k as u64 + 1,
            model.dim(),
            members,
            exec,
        );
        let f = forecast(&ens, model, &w)?;
        ens = analysis(&f, y, variant, &model.h, &model.r)?;
        path.forecast.push(belief_of(&f));
        path.analysis.push(belief_of(&ens));
    }
    Ok(path)
}

/// Continuous counterpart of [`reference_law_discrete`]: an ensemble
/// Kalman–Bucy filter with `members` particles; beliefs at `t_1..t_N`.
pub fn reference_law_continuous(
    model: &StateSpaceModel,
    obs: &ObservationSeries,
    dt: f64,
    members: usize,
    seed: u64,
    exec: Execution,
) -> Result<LawPath> {
    model.require_continuous()?;
    let x0 = gaussian_draws(
        &model.prior_mean,
        &model.prior_cov,
        members,
        seed,
        Purpose::ReferenceInitial,
        0,
        exec,
    )?;
    let mut ens = Ensemble::new(x0)?;
    let mut analysis_path = Vec::with_capacity(obs.len());
    let gain_base = model.h.transpose() * model.r_inv();
    for (j, dy) in obs.values.iter().enumerate() {
        let xi = member_normals(
            seed,
            Purpose::ReferenceModel,
            0,
            j as u64,
            model.dim(),
            members,
            exec,
        );
        let x = ens.members();
        let hc = &model.h * ens.mean();
        let hx = &model.h * x;
        let mut innov = DMatrix::zeros(hx.nrows(), hx.ncols());
        for (i, mut col) in innov.column_iter_mut().enumerate() {
            col.copy_from(&(dy - (hx.column(i) + &hc) * (0.5 * dt)));
        }
        let next = x
            + model.drift.apply_columns(x) * dt
            + &model.c * xi * dt.sqrt()
            + ens.cov().as_matrix() * &gain_base * innov;
        ens = Ensemble::new(next)?;
        analysis_path.push(belief_of(&ens));
    }
    Ok(LawPath {
        initial: GaussianBelief::prior(model),
        forecast: Vec::new(),
        analysis: analysis_path,
        members,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnvelopeReport {
    /// `E[sup_{t≤T} √tr P_t]` averaged over replications.
    pub sup_sqrt_trace: f64,
    /// `Ĉ = estimate / (e^{LT}√tr Q)`; absent when `tr Q = 0`.
    pub constant: Option<f64>,
    pub finite: bool,
    pub note: Option<String>,
}

/// Boundedness diagnostic for the trace envelope of the ensemble covariance.
pub fn trace_envelope_check(
    series: &[ErrorSeries],
    model: &StateSpaceModel,
    horizon: f64,
) -> EnvelopeReport {
    let sups: Vec<f64> = series
        .iter()
        .map(|s| {
            s.rows
                .iter()
                .map(|r| r.tr_p.max(0.0).sqrt())
                .fold(0.0, f64::max)
        })
        .collect();
    let estimate = if sups.is_empty() {
        f64::NAN
    } else {
        sups.iter().sum::<f64>() / sups.len() as f64
    };
    let tr_q = model.q.trace();
    let finite = estimate.is_finite();
    if tr_q <= 0.0 {
        let tr_p0 = series
            .first()
            .and_then(|s| s.rows.first())
            .map_or(f64::NAN, |r| r.tr_p);
        let sup_tr = sups.iter().fold(0.0f64, |a, &b| a.max(b * b));
        let holds = (sup_tr - tr_p0).abs() <= 1e-12 * tr_p0.max(1.0);
        return EnvelopeReport {
            sup_sqrt_trace: estimate,
            constant: None,
            finite,
            note: Some(format!(
                "tr(Q) = 0, envelope degenerates; sup tr(P_t) {} tr(P_0)",
                if holds { "equals" } else { "differs from" }
            )),
        };
    }
    let constant = estimate / ((model.lipschitz_const * horizon).exp() * tr_q.sqrt());
    EnvelopeReport {
        sup_sqrt_trace: estimate,
        constant: Some(constant),
        finite: finite && constant.is_finite(),
        note: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stopping_examples() {
        assert_eq!(stopping_time(&[1.0, 2.0], f64::INFINITY), None);
        assert_eq!(stopping_time(&[5.0, 5.0, 5.0], 5.0), Some(0));
        assert_eq!(stopping_time(&[1.0, 2.0, 4.0, 8.0], 3.0), Some(2));
        assert_eq!(stopping_time(&[1.0, 2.0], 3.0), None);
    }
}
