mod common;

use common::{normal_matrix, random_psd, random_spd, rng};
use esrf_core::coupling::{
    step_coupled_continuous, step_coupled_discrete, CoupledSystem, LawSource,
};
use esrf_core::ensemble::Ensemble;
use esrf_core::linalg::{psd_function, sqrt_psd, SymmetricMatrix};
use esrf_core::model::{
    builtin_model, simulate_continuous, simulate_discrete, Drift, ObservationKind,
    ObservationSeries, StateSpaceModel, TimeKind, TwinStreams,
};
use esrf_core::par::Execution;
use esrf_core::reference::{kb_integrate, kf_run, kf_update, GaussianBelief};
use esrf_core::transforms::{analysis, TransformVariant};
use nalgebra::{DMatrix, DVector};

fn one(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

/// Continuous scalar model `B = 0`, `Q = R = 1`, observation gain `h`.
fn riccati_model(h: f64, p0: f64) -> StateSpaceModel {
    StateSpaceModel::new(
        "riccati",
        TimeKind::Continuous,
        Drift::Linear(one(0.0)),
        one(1.0),
        one(h),
        one(1.0),
        DVector::zeros(1),
        SymmetricMatrix::new(one(p0)).unwrap(),
    )
    .unwrap()
}

fn silent_increments(n: usize, dt: f64) -> ObservationSeries {
    ObservationSeries {
        kind: ObservationKind::Increments,
        times: (0..n).map(|j| j as f64 * dt).collect(),
        values: vec![DVector::zeros(1); n],
        dt: Some(dt),
    }
}

fn final_p(model: &StateSpaceModel, horizon: f64, dt: f64) -> f64 {
    let n = (horizon / dt).round() as usize;
    let run = kb_integrate(
        &GaussianBelief::prior(model),
        model,
        &silent_increments(n, dt),
        dt,
    )
    .unwrap();
    run.beliefs.last().unwrap().cov.as_matrix()[(0, 0)]
}

#[test]
fn riccati_reaches_fixed_point() {
    let p = final_p(&riccati_model(1.0, 3.0), 10.0, 1e-3);
    assert!((p - 1.0).abs() < 1e-3, "P_T = {p}");
}

#[test]
fn unobserved_riccati_is_lyapunov() {
    let p = final_p(&riccati_model(0.0, 3.0), 2.0, 1e-3);
    assert!((p - 5.0).abs() < 1e-10, "P_T = {p}");
}

#[test]
fn riccati_euler_is_first_order() {
    // P(t) = tanh(t + atanh(P0)) solves P' = 1 − P²
    let model = riccati_model(1.0, 0.5);
    let exact = (1.0 + 0.5f64.atanh()).tanh();
    let coarse = final_p(&model, 1.0, 1e-3) - exact;
    let fine = final_p(&model, 1.0, 5e-4) - exact;
    let ratio = coarse / fine;
    assert!((1.6..=2.4).contains(&ratio), "error ratio {ratio}");
}

#[test]
fn clipping_stays_negligible_on_builtins() {
    for name in ["scalar-linear", "vec3-linear"] {
        let model = builtin_model(name, TimeKind::Continuous).unwrap();
        let (_, obs) =
            simulate_continuous(&model, &model.prior_mean, 1.0, 1e-3, &TwinStreams::new(2))
                .unwrap();
        let run = kb_integrate(&GaussianBelief::prior(&model), &model, &obs, 1e-3).unwrap();
        assert!(run.clipped_mass < 1e-10, "{name}: {}", run.clipped_mass);
    }
}

/// Ensemble whose empirical mean and covariance are exactly `(m, P)`.
fn gaussian_consistent(
    m: &DVector<f64>,
    p: &SymmetricMatrix,
    members: usize,
    seed: u64,
) -> Ensemble {
    let z = Ensemble::new(normal_matrix(&mut rng(seed), m.len(), members)).unwrap();
    let whiten = psd_function(z.cov(), |l| 1.0 / l.sqrt()).unwrap();
    let e = sqrt_psd(p).unwrap().as_matrix() * whiten.as_matrix() * z.deviations();
    Ensemble::from_mean_and_deviations(m, &e).unwrap()
}

#[test]
fn kalman_update_matches_ensemble_analysis() {
    let mut g = rng(30);
    for d in 1usize..=4 {
        let q = d.div_ceil(2);
        let m = normal_matrix(&mut g, d, 1).column(0).into_owned();
        let p = random_psd(&mut g, d, d, 2.0);
        let h = normal_matrix(&mut g, q, d);
        let r = random_spd(&mut g, q);
        let y = normal_matrix(&mut g, q, 1).column(0).into_owned();
        let ens = gaussian_consistent(&m, &p, 3 * d + 5, d as u64);
        assert!((ens.cov().as_matrix() - p.as_matrix()).amax() < 1e-12);
        let kf = kf_update(
            &GaussianBelief::new(m.clone(), p.clone()).unwrap(),
            &y,
            &h,
            &r,
        )
        .unwrap();
        for variant in TransformVariant::ALL {
            let post = analysis(&ens, &y, variant, &h, &r).unwrap();
            assert!((post.mean() - &kf.mean).amax() < 1e-10, "{variant}");
            assert!(
                (post.cov().as_matrix() - kf.cov.as_matrix()).amax() < 1e-10,
                "{variant}"
            );
        }
    }
}

#[test]
fn discrete_law_is_the_kalman_filter_bit_for_bit() {
    let model = builtin_model("vec3-linear", TimeKind::Discrete).unwrap();
    let (_, obs) = simulate_discrete(&model, &model.prior_mean, 8, &TwinStreams::new(5)).unwrap();
    let kf = kf_run(&model, &obs).unwrap();
    let mut sys = CoupledSystem::initialize(&model, 16, 5, 0, Execution::Sequential).unwrap();
    for (y, (_, a)) in obs.values.iter().zip(&kf) {
        step_coupled_discrete(
            &mut sys,
            y,
            TransformVariant::Eakf,
            &model,
            &LawSource::Exact,
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(&sys.law, a);
    }
}

#[test]
fn continuous_law_is_kalman_bucy_bit_for_bit() {
    let model = builtin_model("scalar-linear", TimeKind::Continuous).unwrap();
    let dt = 1e-2;
    let (_, obs) =
        simulate_continuous(&model, &model.prior_mean, 0.5, dt, &TwinStreams::new(6)).unwrap();
    let kb = kb_integrate(&GaussianBelief::prior(&model), &model, &obs, dt).unwrap();
    let mut sys = CoupledSystem::initialize(&model, 8, 6, 0, Execution::Sequential).unwrap();
    for (dy, b) in obs.values.iter().zip(&kb.beliefs[1..]) {
        step_coupled_continuous(
            &mut sys,
            dy,
            &model,
            dt,
            &LawSource::Exact,
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(&sys.law, b);
    }
}
