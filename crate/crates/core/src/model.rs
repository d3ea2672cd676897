//! State-space models, twin-experiment simulation and the builtin catalog.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{EsrfError, Result};
use crate::linalg::{inv_spd, spectral_norm, SymmetricMatrix, EIG_TOL_REL};
use crate::rng::{NoiseStream, Purpose, StreamId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TimeKind {
    Discrete,
    Continuous,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Drift {
    Linear(DMatrix<f64>),
    /// `x ↦ A·x + gain·tanh(x)` (elementwise tanh).
    Tanh {
        a: DMatrix<f64>,
        gain: f64,
    },
}

impl Drift {
    pub fn dim(&self) -> usize {
        match self {
            Drift::Linear(b) => b.nrows(),
            Drift::Tanh { a, .. } => a.nrows(),
        }
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Drift::Linear(b) => b * x,
            Drift::Tanh { a, gain } => a * x + x.map(|v| gain * v.tanh()),
        }
    }

    /// Applies the drift to every column.
    pub fn apply_columns(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Drift::Linear(b) => b * x,
            Drift::Tanh { a, gain } => a * x + x.map(|v| gain * v.tanh()),
        }
    }

    /// Smallest Lipschitz constant this crate can certify: `‖B‖` or `‖A‖ + |a|`.
    pub fn lipschitz(&self) -> f64 {
        match self {
            Drift::Linear(b) => spectral_norm(b),
            Drift::Tanh { a, gain } => spectral_norm(a) + gain.abs(),
        }
    }

    pub fn linear_matrix(&self) -> Option<&DMatrix<f64>> {
        match self {
            Drift::Linear(b) => Some(b),
            Drift::Tanh { .. } => None,
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, Drift::Linear(_))
    }
}

#[derive(Clone, Debug)]
pub struct StateSpaceModel {
    pub name: String,
    pub time: TimeKind,
    pub drift: Drift,
    pub lipschitz_const: f64,
    pub c: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub q: SymmetricMatrix,
    pub r: SymmetricMatrix,
    pub prior_mean: DVector<f64>,
    pub prior_cov: SymmetricMatrix,
    r_inv: DMatrix<f64>,
    theta: SymmetricMatrix,
}

impl StateSpaceModel {
    /// Builds a model with `Q = CCᵀ`, `R = ΓΓᵀ`, checking shapes, strict
    /// positivity of `R`, and the declared Lipschitz constant by sampling.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        time: TimeKind,
        drift: Drift,
        c: DMatrix<f64>,
        h: DMatrix<f64>,
        gamma: DMatrix<f64>,
        prior_mean: DVector<f64>,
        prior_cov: SymmetricMatrix,
    ) -> Result<Self> {
        let lipschitz_const = drift.lipschitz();
        Self::with_lipschitz(
            name,
            time,
            drift,
            lipschitz_const,
            c,
            h,
            gamma,
            prior_mean,
            prior_cov,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_lipschitz(
        name: impl Into<String>,
        time: TimeKind,
        drift: Drift,
        lipschitz_const: f64,
        c: DMatrix<f64>,
        h: DMatrix<f64>,
        gamma: DMatrix<f64>,
        prior_mean: DVector<f64>,
        prior_cov: SymmetricMatrix,
    ) -> Result<Self> {
        let d = drift.dim();
        let q = h.nrows();
        let shape = |what: &str, m: &DMatrix<f64>, rows: usize, cols: usize| {
            if m.nrows() != rows || m.ncols() != cols {
                Err(EsrfError::DimensionMismatch(format!(
                    "{what} is {}x{}, expected {rows}x{cols}",
                    m.nrows(),
                    m.ncols()
                )))
            } else {
                Ok(())
            }
        };
        let (Drift::Linear(b) | Drift::Tanh { a: b, .. }) = &drift;
        shape("drift matrix", b, d, d)?;
        shape("C", &c, d, d)?;
        shape("H", &h, q, d)?;
        shape("Gamma", &gamma, q, q)?;
        if prior_mean.len() != d || prior_cov.dim() != d {
            return Err(EsrfError::DimensionMismatch(
                "prior does not match the state dimension".into(),
            ));
        }
        if !(lipschitz_const >= 0.0) || !lipschitz_const.is_finite() {
            return Err(EsrfError::InvalidModel(format!(
                "Lipschitz constant {lipschitz_const} must be finite and nonnegative"
            )));
        }
        let q_cov = SymmetricMatrix::gram(&c, 1.0);
        let r_cov = SymmetricMatrix::gram(&gamma, 1.0);
        let r_eig = nalgebra::SymmetricEigen::new(r_cov.as_matrix().clone()).eigenvalues;
        let r_tol = EIG_TOL_REL * r_eig.amax().max(1.0);
        if q == 0 || r_eig.min() <= r_tol {
            return Err(EsrfError::InvalidModel(
                "observation noise covariance R must be positive definite".into(),
            ));
        }
        let r_inv = inv_spd(r_cov.as_matrix())?;
        let theta = SymmetricMatrix::new_psd(h.transpose() * &r_inv * &h)?;
        let prior_cov = prior_cov.into_psd()?;
        let model = Self {
            name: name.into(),
            time,
            drift,
            lipschitz_const,
            c,
            h,
            gamma,
            q: q_cov,
            r: r_cov,
            prior_mean,
            prior_cov,
            r_inv,
            theta,
        };
        model.audit_lipschitz(1000, 0x5eed)?;
        Ok(model)
    }

    pub fn dim(&self) -> usize {
        self.drift.dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn r_inv(&self) -> &DMatrix<f64> {
        &self.r_inv
    }

    /// `Θ = HᵀR⁻¹H`.
    pub fn theta(&self) -> &SymmetricMatrix {
        &self.theta
    }

    /// Checks `‖B(x) − B(y)‖ ≤ L‖x − y‖` on `pairs` random pairs drawn at
    /// several length scales.
    pub fn audit_lipschitz(&self, pairs: usize, seed: u64) -> Result<()> {
        let d = self.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for n in 0..pairs {
            let scale = [0.1, 1.0, 10.0][n % 3];
            let x = DVector::from_fn(d, |_, _| scale * rng.random_range(-1.0..1.0));
            let y = DVector::from_fn(d, |_, _| scale * rng.random_range(-1.0..1.0));
            let lhs = (self.drift.apply(&x) - self.drift.apply(&y)).norm();
            let rhs = self.lipschitz_const * (&x - &y).norm();
            if lhs > rhs * (1.0 + 1e-12) + 1e-14 {
                return Err(EsrfError::InvalidModel(format!(
                    "declared Lipschitz constant {} violated: {lhs:e} > {rhs:e}",
                    self.lipschitz_const
                )));
            }
        }
        Ok(())
    }

    fn require(&self, time: TimeKind) -> Result<()> {
        if self.time != time {
            return Err(EsrfError::InvalidModel(format!(
                "model `{}` is {:?}, expected {:?}",
                self.name, self.time, time
            )));
        }
        Ok(())
    }

    pub fn require_discrete(&self) -> Result<()> {
        self.require(TimeKind::Discrete)
    }

    pub fn require_continuous(&self) -> Result<()> {
        self.require(TimeKind::Continuous)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObservationKind {
    /// `Y_k`, one per step `k = 1..K`.
    Levels,
    /// `ΔY_j` over `[t_j, t_{j+1})`, `j = 0..N-1`.
    Increments,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSeries {
    pub kind: ObservationKind,
    pub times: Vec<f64>,
    pub values: Vec<DVector<f64>>,
    pub dt: Option<f64>,
}

impl ObservationSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Truth and observation streams of one twin experiment.
#[derive(Clone, Debug)]
pub struct TwinStreams {
    pub truth: NoiseStream,
    pub obs: NoiseStream,
}

impl TwinStreams {
    /// The observation record is a single realization per seed, so both
    /// streams always use replication 0.
    pub fn new(seed: u64) -> Self {
        Self {
            truth: NoiseStream::new(seed, StreamId::new(Purpose::Truth, 0, 0)),
            obs: NoiseStream::new(seed, StreamId::new(Purpose::Observation, 0, 0)),
        }
    }
}

/// `X_k = B(X_{k−1}) + C w_k`, `Y_k = H X_k + Γ v_k` for `k = 1..K`. The draws
/// for step `k` come from counter `k − 1` of the truth and observation streams.
pub fn simulate_discrete(
    model: &StateSpaceModel,
    x0: &DVector<f64>,
    steps: usize,
    streams: &TwinStreams,
) -> Result<(Trajectory, ObservationSeries)> {
    model.require_discrete()?;
    if steps == 0 {
        return Err(EsrfError::InvalidArgument("need at least one step".into()));
    }
    check_state(model, x0)?;
    let (d, q) = (model.dim(), model.obs_dim());
    let mut states = Vec::with_capacity(steps + 1);
    let mut obs = Vec::with_capacity(steps);
    states.push(x0.clone());
    for k in 1..=steps {
        let w = streams.truth.normals(k as u64 - 1, d);
        let x = model.drift.apply(&states[k - 1]) + &model.c * w;
        let v = streams.obs.normals(k as u64 - 1, q);
        obs.push(&model.h * &x + &model.gamma * v);
        states.push(x);
    }
    Ok((
        Trajectory {
            times: (0..=steps).map(|k| k as f64).collect(),
            states,
        },
        ObservationSeries {
            kind: ObservationKind::Levels,
            times: (1..=steps).map(|k| k as f64).collect(),
            values: obs,
            dt: None,
        },
    ))
}

/// Number of Euler steps in `[0, T]`, rejecting grids that do not divide `T`.
pub fn grid_steps(horizon: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(EsrfError::InvalidStep(dt));
    }
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(EsrfError::InvalidArgument(format!(
            "horizon {horizon} must be positive"
        )));
    }
    let n = (horizon / dt).round();
    if (n * dt - horizon).abs() > 1e-9 * horizon.max(1.0) || n < 1.0 {
        return Err(EsrfError::InvalidStep(dt));
    }
    Ok(n as usize)
}

/// Euler–Maruyama for `dX = B(X)dt + C dW`, `dY = HX dt + Γ dV`. Step `j`
/// uses counter `j` of both streams.
pub fn simulate_continuous(
    model: &StateSpaceModel,
    x0: &DVector<f64>,
    horizon: f64,
    dt: f64,
    streams: &TwinStreams,
) -> Result<(Trajectory, ObservationSeries)> {
    model.require_continuous()?;
    let n = grid_steps(horizon, dt)?;
    check_state(model, x0)?;
    let (d, q) = (model.dim(), model.obs_dim());
    let sqdt = dt.sqrt();
    let mut states = Vec::with_capacity(n + 1);
    let mut incs = Vec::with_capacity(n);
    states.push(x0.clone());
    for j in 0..n {
        let x = &states[j];
        let xi = streams.truth.normals(j as u64, d);
        let eta = streams.obs.normals(j as u64, q);
        incs.push(&model.h * x * dt + &model.gamma * eta * sqdt);
        let next = x + model.drift.apply(x) * dt + &model.c * xi * sqdt;
        states.push(next);
    }
    Ok((
        Trajectory {
            times: (0..=n).map(|j| j as f64 * dt).collect(),
            states,
        },
        ObservationSeries {
            kind: ObservationKind::Increments,
            times: (0..n).map(|j| j as f64 * dt).collect(),
            values: incs,
            dt: Some(dt),
        },
    ))
}

fn check_state(model: &StateSpaceModel, x0: &DVector<f64>) -> Result<()> {
    if x0.len() != model.dim() {
        return Err(EsrfError::DimensionMismatch(format!(
            "initial state has length {}, model dimension is {}",
            x0.len(),
            model.dim()
        )));
    }
    Ok(())
}

/// Writes `step_or_time, x_1..x_d, y_1..y_q` (or `dy_*`). Levels start at
/// `k = 1` and increments end at the last grid point, so the missing cells
/// are left empty.
pub fn write_twin_csv<W: Write>(out: W, traj: &Trajectory, obs: &ObservationSeries) -> Result<()> {
    let d = traj.states.first().map_or(0, |x| x.len());
    let q = obs.values.first().map_or(0, |y| y.len());
    let (time_col, prefix) = match obs.kind {
        ObservationKind::Levels => ("step", "y"),
        ObservationKind::Increments => ("time", "dy"),
    };
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![time_col.to_string()];
    header.extend((1..=d).map(|i| format!("x_{i}")));
    header.extend((1..=q).map(|i| format!("{prefix}_{i}")));
    w.write_record(&header)?;
    for (idx, (t, x)) in traj.times.iter().zip(&traj.states).enumerate() {
        let y = match obs.kind {
            ObservationKind::Levels => idx.checked_sub(1).and_then(|k| obs.values.get(k)),
            ObservationKind::Increments => obs.values.get(idx),
        };
        let mut row = vec![t.to_string()];
        row.extend(x.iter().map(|v| v.to_string()));
        match y {
            Some(y) => row.extend(y.iter().map(|v| v.to_string())),
            None => row.extend(std::iter::repeat_n(String::new(), q)),
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub const BUILTIN_NAMES: [&str; 3] = ["scalar-linear", "vec3-linear", "tanh-nonlinear"];

/// All builtin models of the given flavor.
pub fn builtin_models(time: TimeKind) -> Vec<StateSpaceModel> {
    BUILTIN_NAMES
        .iter()
        .map(|n| builtin_model(n, time).expect("builtin models are valid"))
        .collect()
}

pub fn builtin_model(name: &str, time: TimeKind) -> Result<StateSpaceModel> {
    let discrete = time == TimeKind::Discrete;
    match name {
        "scalar-linear" => {
            let b = if discrete { 0.9 } else { -0.5 };
            StateSpaceModel::new(
                name,
                time,
                Drift::Linear(DMatrix::from_element(1, 1, b)),
                DMatrix::identity(1, 1),
                DMatrix::identity(1, 1),
                DMatrix::identity(1, 1),
                DVector::zeros(1),
                SymmetricMatrix::identity(1),
            )
        }
        "vec3-linear" => {
            let b = if discrete {
                DMatrix::from_row_slice(3, 3, &[0.8, 0.2, 0.0, -0.2, 0.7, 0.1, 0.0, -0.1, 0.6])
            } else {
                DMatrix::from_row_slice(3, 3, &[-0.5, 0.3, 0.0, -0.3, -0.4, 0.2, 0.0, -0.2, -0.3])
            };
            StateSpaceModel::new(
                name,
                time,
                Drift::Linear(b),
                vec3_noise(),
                vec3_observation(),
                DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.1, 0.4]),
                DVector::zeros(3),
                SymmetricMatrix::identity(3),
            )
        }
        "tanh-nonlinear" => {
            let (a, gain) = if discrete {
                (
                    DMatrix::from_row_slice(3, 3, &[0.5, 0.2, 0.0, -0.2, 0.4, 0.1, 0.0, -0.1, 0.3]),
                    0.4,
                )
            } else {
                (
                    DMatrix::from_row_slice(
                        3,
                        3,
                        &[-1.0, 0.5, 0.0, -0.5, -0.8, 0.2, 0.0, -0.2, -0.6],
                    ),
                    0.5,
                )
            };
            tanh_model(a, gain, time)
        }
        other => Err(EsrfError::UnknownModel(other.to_string())),
    }
}

/// The tanh family with custom `A` and `a`, using the catalog's noise and
/// observation structure.
pub fn tanh_model(a: DMatrix<f64>, gain: f64, time: TimeKind) -> Result<StateSpaceModel> {
    StateSpaceModel::new(
        "tanh-nonlinear",
        time,
        Drift::Tanh { a, gain },
        DMatrix::identity(3, 3) * 0.5,
        DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
        DMatrix::identity(2, 2) * 0.5,
        DVector::zeros(3),
        SymmetricMatrix::identity(3),
    )
}

fn vec3_noise() -> DMatrix<f64> {
    DMatrix::from_row_slice(3, 3, &[0.5, 0.0, 0.0, 0.1, 0.4, 0.0, 0.0, 0.1, 0.3])
}

fn vec3_observation() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0])
}
