//! Experiment orchestration: twin data, (M, replication) sweeps, rate fits and
//! reports.
//!
//! [`execute`] builds every artifact in memory; [`run`] commits them to the
//! output directory in one rename so a failed run leaves nothing behind.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::coupling::{
    default_stop_level, reference_law_continuous, reference_law_discrete, run_continuous,
    run_discrete, trace_envelope_check, ContinuousSetup, DiscreteSetup, EnvelopeReport,
    ErrorSeries, LawSource,
};
use crate::ensemble::{gaussian_draws, Ensemble};
use crate::error::{EsrfError, Result};
use crate::linalg::{spectral_norm, SymmetricMatrix};
use crate::model::{
    builtin_model, simulate_continuous, simulate_discrete, write_twin_csv, ObservationSeries,
    StateSpaceModel, TimeKind, Trajectory, TwinStreams,
};
use crate::par::{map_indexed, try_map_indexed, with_workers, Execution};
use crate::reference::{kb_integrate, kf_run, write_beliefs_csv, GaussianBelief};
use crate::rng::{member_normals, NoiseStream, Purpose, StreamId};
use crate::spde::{all_test_functions, spde_term_audit, LinearGenerator};
use crate::stats::{bootstrap_slope_ci, d_estimate, fit_rate};
use crate::transforms::{
    analysis, audit_identities, forecast, gain_lipschitz_check, AuditReport, TransformVariant,
};

/// Tolerance of both SPDE audit identities.
pub const SPDE_TOL: f64 = 1e-10;
/// Largest admissible fraction of stopped continuous-time paths.
pub const MAX_STOPPED_FRACTION: f64 = 0.05;

/// In-memory outputs of one experiment.
#[derive(Clone, Debug)]
pub struct Artifacts {
    /// Relative path and contents, in write order.
    pub files: Vec<(PathBuf, Vec<u8>)>,
    pub pass: bool,
    pub summary: String,
}

impl Artifacts {
    fn new() -> Self {
        Self {
            files: Vec::new(),
            pass: true,
            summary: String::new(),
        }
    }

    fn add(&mut self, path: impl Into<PathBuf>, bytes: Vec<u8>) {
        self.files.push((path.into(), bytes));
    }

    fn add_json<T: Serialize>(&mut self, path: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.add(path, bytes);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&[u8]> {
        self.files
            .iter()
            .find(|(p, _)| p == Path::new(path))
            .map(|(_, b)| b.as_slice())
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub pass: bool,
    pub out_dir: PathBuf,
    pub summary: String,
}

impl RunOutcome {
    /// 0 when every acceptance check passed, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.pass {
            0
        } else {
            2
        }
    }
}

/// Runs the experiment on a pool of `workers` threads and writes its
/// artifacts to `cfg.out` atomically.
pub fn run(cfg: &ExperimentConfig, workers: usize) -> Result<RunOutcome> {
    cfg.validate()?;
    let artifacts = with_workers(workers, || execute(cfg))?;
    write_atomic(&cfg.out, &artifacts)?;
    Ok(RunOutcome {
        pass: artifacts.pass,
        out_dir: cfg.out.clone(),
        summary: artifacts.summary,
    })
}

/// Builds every artifact of the experiment. Output bytes depend only on the
/// configuration, never on the pool size.
pub fn execute(cfg: &ExperimentConfig) -> Result<Artifacts> {
    cfg.validate()?;
    let mut art = match cfg.kind {
        ExperimentKind::ConvergenceDiscrete => convergence_discrete(cfg),
        ExperimentKind::ConvergenceContinuous => convergence_continuous(cfg),
        ExperimentKind::Consistency => consistency(cfg),
        ExperimentKind::SpdeAudit => spde_audit(cfg),
        ExperimentKind::TransformsAudit => transforms_audit(cfg),
    }
    .map_err(|e| e.context(format!("{} experiment", cfg.kind.name())))?;
    art.files
        .insert(0, ("config.txt".into(), cfg.render().into_bytes()));
    let verdict = if art.pass { "PASS" } else { "FAIL" };
    art.summary = format!(
        "{} {}: {verdict}\n{}",
        cfg.kind.name(),
        cfg.model,
        art.summary
    );
    art.add("summary.txt", art.summary.clone().into_bytes());
    Ok(art)
}

/// Stages the files in a sibling temporary directory and renames it over `out`.
pub fn write_atomic(out: &Path, art: &Artifacts) -> Result<()> {
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&parent)?;
    let stage = tempfile::Builder::new()
        .prefix(".esrf-stage-")
        .tempdir_in(&parent)?;
    for (rel, bytes) in &art.files {
        let path = stage.path().join(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(&path, bytes)?;
    }
    let staged = stage.keep();
    let result = replace_dir(&staged, out, &parent);
    if result.is_err() {
        let _ = std::fs::remove_dir_all(&staged);
    }
    result
}

fn replace_dir(staged: &Path, out: &Path, parent: &Path) -> Result<()> {
    if !out.exists() {
        std::fs::rename(staged, out)?;
        return Ok(());
    }
    if !out.is_dir() {
        return Err(EsrfError::InvalidArgument(format!(
            "output path {} exists and is not a directory",
            out.display()
        )));
    }
    let old = tempfile::Builder::new()
        .prefix(".esrf-old-")
        .tempdir_in(parent)?
        .keep();
    std::fs::remove_dir(&old)?;
    std::fs::rename(out, &old)?;
    if let Err(e) = std::fs::rename(staged, out) {
        std::fs::rename(&old, out)?;
        return Err(e.into());
    }
    std::fs::remove_dir_all(&old)?;
    Ok(())
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RatePoint {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "D")]
    pub d: f64,
    pub se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StoppingSummary {
    pub level: f64,
    pub stopped_paths: usize,
    pub total_paths: usize,
    pub fraction: f64,
    pub pass: bool,
}

/// Refinement check of a reference-ensemble law: the rate point at the
/// largest `M` is recomputed against a reference of twice the size.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SurrogateCheck {
    pub m_ref: usize,
    pub m_ref_doubled: usize,
    #[serde(rename = "M")]
    pub members: usize,
    #[serde(rename = "D")]
    pub d: f64,
    pub d_doubled: f64,
    pub ci_half_width: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateReport {
    pub experiment: String,
    pub model: String,
    pub variant: String,
    pub p: u32,
    pub eval: String,
    pub law: String,
    pub replications: usize,
    pub seed: u64,
    pub points: Vec<RatePoint>,
    pub slope: f64,
    pub intercept: f64,
    pub slope_ci: (f64, f64),
    pub slope_bootstrap_ci: (f64, f64),
    pub band: (f64, f64),
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw_points: Option<Vec<RatePoint>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw_slope: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stopping: Option<StoppingSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub surrogate: Option<SurrogateCheck>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub envelope: Option<EnvelopeReport>,
    pub failures: Vec<String>,
    pub pass: bool,
}

impl RateReport {
    fn judge(&mut self) {
        let mut failures = Vec::new();
        if !(self.band.0..=self.band.1).contains(&self.slope) {
            failures.push(format!(
                "slope {:.4} outside [{}, {}]",
                self.slope, self.band.0, self.band.1
            ));
        }
        if !(self.slope_bootstrap_ci.1 < 0.0) {
            failures.push(format!(
                "bootstrap slope interval [{:.4}, {:.4}] does not exclude 0",
                self.slope_bootstrap_ci.0, self.slope_bootstrap_ci.1
            ));
        }
        if let Some(s) = self.stopping.as_ref().filter(|s| !s.pass) {
            failures.push(format!("stopped fraction {:.4} too large", s.fraction));
        }
        if let Some(s) = self.surrogate.as_ref().filter(|s| !s.pass) {
            failures.push(format!(
                "doubling M_ref moved D by {:.3e}, beyond {:.3e}",
                (s.d_doubled - s.d).abs(),
                s.ci_half_width
            ));
        }
        if let Some(e) = self.envelope.as_ref().filter(|e| !e.finite) {
            failures.push(format!("trace envelope not finite: {}", e.sup_sqrt_trace));
        }
        self.pass = failures.is_empty();
        self.failures = failures;
    }

    fn summary_line(&self) -> String {
        format!(
            "p = {}: slope {:.4} (OLS CI [{:.4}, {:.4}], bootstrap CI [{:.4}, {:.4}]), band [{}, {}] -> {}",
            self.p,
            self.slope,
            self.slope_ci.0,
            self.slope_ci.1,
            self.slope_bootstrap_ci.0,
            self.slope_bootstrap_ci.1,
            self.band.0,
            self.band.1,
            if self.pass { "pass" } else { "fail" }
        )
    }
}

fn report_name(cfg: &ExperimentConfig, p: u32) -> String {
    if p == cfg.p_orders[0] {
        "rate_report.json".into()
    } else {
        format!("rate_report_p{p}.json")
    }
}

fn series_name(m: usize, rep: usize) -> String {
    format!("series/M{m:05}_rep{rep:03}.csv")
}

/// Truth start `X_0` drawn from the prior on its own stream.
fn truth_start(model: &StateSpaceModel, seed: u64) -> Result<DVector<f64>> {
    let x = gaussian_draws(
        &model.prior_mean,
        &model.prior_cov,
        1,
        seed,
        Purpose::Truth,
        1,
        Execution::Sequential,
    )?;
    Ok(x.column(0).into_owned())
}

fn twin_discrete(
    model: &StateSpaceModel,
    steps: usize,
    seed: u64,
) -> Result<(Trajectory, ObservationSeries)> {
    let x0 = truth_start(model, seed)?;
    simulate_discrete(model, &x0, steps, &TwinStreams::new(seed))
}

fn twin_continuous(
    model: &StateSpaceModel,
    horizon: f64,
    dt: f64,
    seed: u64,
) -> Result<(Trajectory, ObservationSeries)> {
    let x0 = truth_start(model, seed)?;
    simulate_continuous(model, &x0, horizon, dt, &TwinStreams::new(seed))
}

fn variant_label(variants: &[TransformVariant]) -> String {
    let mut names: Vec<&str> = variants.iter().map(|v| v.name()).collect();
    names.dedup();
    if names.len() == 1 {
        names[0].to_string()
    } else {
        "auto".to_string()
    }
}

/// Flattened `(M index, replication)` grid in key order.
fn work_items(cfg: &ExperimentConfig, members: &[usize]) -> Vec<(usize, usize)> {
    (0..members.len())
        .flat_map(|mi| (0..cfg.replications).map(move |r| (mi, r)))
        .collect()
}

/// Synthetic errors `D_M = c·M^{−1/2}` pushed through the rate fitter.
fn synthetic_rate(cfg: &ExperimentConfig, c: f64) -> Result<Artifacts> {
    let mut art = Artifacts::new();
    for &p in &cfg.p_orders {
        let points: Vec<RatePoint> = cfg
            .members
            .iter()
            .map(|&m| RatePoint {
                m,
                d: c / (m as f64).sqrt(),
                se: 0.0,
            })
            .collect();
        let fit = fit_rate(&points.iter().map(|q| (q.m as f64, q.d)).collect::<Vec<_>>())?;
        let mut report = RateReport {
            experiment: cfg.kind.name().into(),
            model: cfg.model.clone(),
            variant: cfg.variant.to_string(),
            p,
            eval: "synthetic".into(),
            law: "synthetic".into(),
            replications: 0,
            seed: cfg.seed,
            points,
            slope: fit.slope,
            intercept: fit.intercept,
            slope_ci: fit.slope_ci,
            slope_bootstrap_ci: (fit.slope, fit.slope),
            band: cfg.band,
            raw_points: None,
            raw_slope: None,
            stopping: None,
            surrogate: None,
            envelope: None,
            failures: Vec::new(),
            pass: false,
        };
        report.judge();
        art.pass &= report.pass;
        writeln!(art.summary, "{}", report.summary_line()).ok();
        art.add_json(&report_name(cfg, p), &report)?;
    }
    Ok(art)
}

fn rate_points(
    cfg: &ExperimentConfig,
    per_m: &[(usize, Vec<f64>)],
    p: u32,
) -> Result<Vec<RatePoint>> {
    per_m
        .iter()
        .map(|(m, deltas)| {
            let est = d_estimate(deltas, f64::from(p), cfg.bootstrap, cfg.seed, *m as u64)?;
            Ok(RatePoint {
                m: *m,
                d: est.d,
                se: est.se,
            })
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn rate_report(
    cfg: &ExperimentConfig,
    variant: String,
    law: String,
    p: u32,
    eval: String,
    per_m: &[(usize, Vec<f64>)],
) -> Result<RateReport> {
    let points = rate_points(cfg, per_m, p)?;
    let fit = fit_rate(&points.iter().map(|q| (q.m as f64, q.d)).collect::<Vec<_>>())
        .map_err(|e| e.context(format!("rate fit at p = {p}")))?;
    let boot = bootstrap_slope_ci(per_m, f64::from(p), cfg.bootstrap, cfg.seed)?;
    Ok(RateReport {
        experiment: cfg.kind.name().into(),
        model: cfg.model.clone(),
        variant,
        p,
        eval,
        law,
        replications: cfg.replications,
        seed: cfg.seed,
        points,
        slope: fit.slope,
        intercept: fit.intercept,
        slope_ci: fit.slope_ci,
        slope_bootstrap_ci: boot,
        band: cfg.band,
        raw_points: None,
        raw_slope: None,
        stopping: None,
        surrogate: None,
        envelope: None,
        failures: Vec::new(),
        pass: false,
    })
}

fn surrogate_check(
    cfg: &ExperimentConfig,
    point: RatePoint,
    doubled: &[f64],
    p: u32,
) -> Result<SurrogateCheck> {
    let est = d_estimate(
        doubled,
        f64::from(p),
        cfg.bootstrap,
        cfg.seed,
        point.m as u64,
    )?;
    let half = 1.96 * point.se;
    Ok(SurrogateCheck {
        m_ref: cfg.m_ref,
        m_ref_doubled: 2 * cfg.m_ref,
        members: point.m,
        d: point.d,
        d_doubled: est.d,
        ci_half_width: half,
        pass: (est.d - point.d).abs() < half,
    })
}

fn convergence_discrete(cfg: &ExperimentConfig) -> Result<Artifacts> {
    if let Some(c) = cfg.synthetic_rate {
        return synthetic_rate(cfg, c);
    }
    let model = builtin_model(&cfg.model, TimeKind::Discrete)?;
    let (traj, obs) = twin_discrete(&model, cfg.steps, cfg.seed)?;
    let d = model.dim();
    let variants: Vec<TransformVariant> = cfg
        .members
        .iter()
        .map(|&m| cfg.variant.resolve(d, m))
        .collect();
    let mut distinct = variants.clone();
    distinct.sort_by_key(|v| v.name());
    distinct.dedup();

    let mut art = Artifacts::new();
    art.add("twin.csv", csv_bytes(|b| write_twin_csv(b, &traj, &obs))?);

    let linear = model.drift.is_linear();
    let make_laws = |m_ref: usize| -> Result<Vec<(TransformVariant, LawSource)>> {
        distinct
            .iter()
            .map(|&v| {
                let law = if linear {
                    LawSource::Exact
                } else {
                    LawSource::Reference(Arc::new(reference_law_discrete(
                        &model,
                        &obs,
                        v,
                        m_ref,
                        cfg.seed,
                        Execution::Parallel,
                    )?))
                };
                Ok((v, law))
            })
            .collect()
    };
    let laws = make_laws(cfg.m_ref)?;
    let setup_for = |laws: &[(TransformVariant, LawSource)], v: TransformVariant| DiscreteSetup {
        model: model.clone(),
        obs: obs.clone(),
        variant: v,
        seed: cfg.seed,
        law: laws
            .iter()
            .find(|(w, _)| *w == v)
            .expect("law per variant")
            .1
            .clone(),
    };
    let setups: Vec<DiscreteSetup> = variants.iter().map(|&v| setup_for(&laws, v)).collect();

    let law_label;
    let beliefs: Vec<GaussianBelief> = if linear {
        law_label = "kalman".to_string();
        std::iter::once(GaussianBelief::prior(&model))
            .chain(kf_run(&model, &obs)?.into_iter().map(|(_, a)| a))
            .collect()
    } else {
        law_label = format!("reference(M_ref={})", cfg.m_ref);
        let LawSource::Reference(path) = &laws[0].1 else {
            unreachable!("nonlinear models use a reference law")
        };
        std::iter::once(path.initial.clone())
            .chain(path.analysis.iter().cloned())
            .collect()
    };
    let times: Vec<f64> = (0..beliefs.len()).map(|k| k as f64).collect();
    art.add(
        "law.csv",
        csv_bytes(|b| write_beliefs_csv(b, &times, &beliefs))?,
    );

    let items = work_items(cfg, &cfg.members);
    let runs = try_map_indexed(Execution::Parallel, items.len(), |i| {
        let (mi, rep) = items[i];
        run_discrete(
            &setups[mi],
            cfg.members[mi],
            rep as u64,
            Execution::Sequential,
        )
    })?;

    let k = cfg.eval_step();
    let collect_deltas = |runs: &[crate::coupling::DiscreteRun], p: u32, mi: usize| -> Vec<f64> {
        runs[mi * cfg.replications..(mi + 1) * cfg.replications]
            .iter()
            .map(|r| r.analysis.rows[k].delta(p).unwrap_or(f64::NAN))
            .collect()
    };

    let doubled = if linear {
        None
    } else {
        let laws2 = make_laws(2 * cfg.m_ref)?;
        let mi = cfg.members.len() - 1;
        let setup = setup_for(&laws2, variants[mi]);
        let runs2 = try_map_indexed(Execution::Parallel, cfg.replications, |rep| {
            run_discrete(&setup, cfg.members[mi], rep as u64, Execution::Sequential)
        })?;
        Some(runs2)
    };

    for &p in &cfg.p_orders {
        let per_m: Vec<(usize, Vec<f64>)> = cfg
            .members
            .iter()
            .enumerate()
            .map(|(mi, &m)| (m, collect_deltas(&runs, p, mi)))
            .collect();
        let mut report = rate_report(
            cfg,
            variant_label(&variants),
            law_label.clone(),
            p,
            format!("k={k}"),
            &per_m,
        )?;
        if let Some(runs2) = &doubled {
            let deltas2: Vec<f64> = runs2
                .iter()
                .map(|r| r.analysis.rows[k].delta(p).unwrap_or(f64::NAN))
                .collect();
            let last = *report.points.last().expect("points");
            report.surrogate = Some(surrogate_check(cfg, last, &deltas2, p)?);
        }
        report.judge();
        art.pass &= report.pass;
        writeln!(art.summary, "{}", report.summary_line()).ok();
        art.add_json(&report_name(cfg, p), &report)?;
    }

    if cfg.write_series {
        for (run, &(mi, rep)) in runs.iter().zip(&items) {
            art.add(
                series_name(cfg.members[mi], rep),
                csv_bytes(|b| run.analysis.write_csv(b))?,
            );
        }
    }
    Ok(art)
}

fn convergence_continuous(cfg: &ExperimentConfig) -> Result<Artifacts> {
    if let Some(c) = cfg.synthetic_rate {
        return synthetic_rate(cfg, c);
    }
    let model = builtin_model(&cfg.model, TimeKind::Continuous)?;
    let (traj, obs) = twin_continuous(&model, cfg.horizon, cfg.dt, cfg.seed)?;
    let mut art = Artifacts::new();
    art.add("twin.csv", csv_bytes(|b| write_twin_csv(b, &traj, &obs))?);

    let linear = model.drift.is_linear();
    let make_law = |m_ref: usize| -> Result<LawSource> {
        Ok(if linear {
            LawSource::Exact
        } else {
            LawSource::Reference(Arc::new(reference_law_continuous(
                &model,
                &obs,
                cfg.dt,
                m_ref,
                cfg.seed,
                Execution::Parallel,
            )?))
        })
    };
    let law = make_law(cfg.m_ref)?;
    let (law_label, beliefs) = match &law {
        LawSource::Exact => (
            "kalman-bucy".to_string(),
            kb_integrate(&GaussianBelief::prior(&model), &model, &obs, cfg.dt)?.beliefs,
        ),
        LawSource::Reference(path) => (
            format!("reference(M_ref={})", cfg.m_ref),
            std::iter::once(path.initial.clone())
                .chain(path.analysis.iter().cloned())
                .collect(),
        ),
    };
    art.add(
        "law.csv",
        csv_bytes(|b| write_beliefs_csv(b, &traj.times, &beliefs))?,
    );

    let setup = ContinuousSetup {
        model: model.clone(),
        obs: obs.clone(),
        dt: cfg.dt,
        seed: cfg.seed,
        law,
    };
    let level = cfg
        .stop_level
        .unwrap_or_else(|| default_stop_level(&model, cfg.horizon));
    let items = work_items(cfg, &cfg.members);
    let series = try_map_indexed(Execution::Parallel, items.len(), |i| {
        let (mi, rep) = items[i];
        let mut s = run_continuous(&setup, cfg.members[mi], rep as u64, Execution::Sequential)?;
        s.mark_stopped(level);
        Ok::<_, EsrfError>(s)
    })?;

    let stopped = series
        .iter()
        .filter(|s| s.stop_index(level).is_some())
        .count();
    let fraction = stopped as f64 / series.len() as f64;
    let stopping = StoppingSummary {
        level,
        stopped_paths: stopped,
        total_paths: series.len(),
        fraction,
        pass: fraction < MAX_STOPPED_FRACTION,
    };
    let largest = cfg.members.len() - 1;
    let envelope = trace_envelope_check(&series[largest * cfg.replications..], &model, cfg.horizon);

    let sup_deltas = |block: &[ErrorSeries], p: u32, stopped: bool| -> Vec<f64> {
        block
            .iter()
            .map(|s| {
                let stop = if stopped { s.stop_index(level) } else { None };
                s.sup_delta_pow(p, stop).powf(1.0 / f64::from(p))
            })
            .collect()
    };
    let per_m_for = |p: u32, stopped: bool| -> Vec<(usize, Vec<f64>)> {
        cfg.members
            .iter()
            .enumerate()
            .map(|(mi, &m)| {
                let block = &series[mi * cfg.replications..(mi + 1) * cfg.replications];
                (m, sup_deltas(block, p, stopped))
            })
            .collect()
    };

    let doubled = if linear {
        None
    } else {
        let setup2 = ContinuousSetup {
            law: make_law(2 * cfg.m_ref)?,
            ..setup.clone()
        };
        Some(try_map_indexed(
            Execution::Parallel,
            cfg.replications,
            |rep| {
                let mut s = run_continuous(
                    &setup2,
                    cfg.members[largest],
                    rep as u64,
                    Execution::Sequential,
                )?;
                s.mark_stopped(level);
                Ok::<_, EsrfError>(s)
            },
        )?)
    };

    for &p in &cfg.p_orders {
        let per_m = per_m_for(p, true);
        let mut report = rate_report(
            cfg,
            "enkbf".into(),
            law_label.clone(),
            p,
            "sup over t <= T ^ theta_n ^ theta_bar_n".into(),
            &per_m,
        )?;
        let raw = rate_points(cfg, &per_m_for(p, false), p)?;
        report.raw_slope = fit_rate(&raw.iter().map(|q| (q.m as f64, q.d)).collect::<Vec<_>>())
            .ok()
            .map(|f| f.slope);
        report.raw_points = Some(raw);
        report.stopping = Some(stopping.clone());
        report.envelope = Some(envelope.clone());
        if let Some(block) = &doubled {
            let last = *report.points.last().expect("points");
            report.surrogate = Some(surrogate_check(cfg, last, &sup_deltas(block, p, true), p)?);
        }
        report.judge();
        art.pass &= report.pass;
        writeln!(art.summary, "{}", report.summary_line()).ok();
        art.add_json(&report_name(cfg, p), &report)?;
    }
    writeln!(
        art.summary,
        "stopped paths: {stopped}/{} at level n = {level}",
        series.len()
    )
    .ok();

    if cfg.write_series {
        for (s, &(mi, rep)) in series.iter().zip(&items) {
            art.add(
                series_name(cfg.members[mi], rep),
                csv_bytes(|b| s.write_csv(b))?,
            );
        }
    }
    Ok(art)
}

/// Bootstrap standard errors of the ensemble mean (Euclidean norm) and
/// covariance (spectral norm), resampling members.
pub fn member_bootstrap_se(ens: &Ensemble, resamples: usize, seed: u64, key: u64) -> (f64, f64) {
    let x = ens.members();
    let (d, m) = (ens.dim(), ens.size());
    let mean = ens.mean();
    let cov = ens.cov().as_matrix();
    let draws = map_indexed(Execution::Parallel, resamples, |b| {
        let mut rng =
            NoiseStream::new(seed, StreamId::new(Purpose::Bootstrap, b as u64, key + 2)).rng(0);
        let mut sum = DVector::<f64>::zeros(d);
        let mut outer = DMatrix::<f64>::zeros(d, d);
        for _ in 0..m {
            let col = x.column(rng.random_range(0..m));
            sum += &col;
            outer.ger(1.0, &col, &col, 1.0);
        }
        let bmean = sum / m as f64;
        let bcov = (outer - &bmean * bmean.transpose() * m as f64) / (m as f64 - 1.0);
        (
            (&bmean - mean).norm_squared(),
            spectral_norm(&(bcov - cov)).powi(2),
        )
    });
    let n = resamples.max(1) as f64;
    let (sm, sc) = draws
        .iter()
        .fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    ((sm / n).sqrt(), (sc / n).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConsistencyRow {
    pub k: usize,
    pub mean_gap: f64,
    pub mean_se: f64,
    pub cov_gap: f64,
    pub cov_se: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConsistencyCase {
    pub variant: String,
    #[serde(rename = "M")]
    pub members: usize,
    pub max_mean_ratio: f64,
    pub max_cov_ratio: f64,
    pub pass: bool,
    pub rows: Vec<ConsistencyRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConsistencyReport {
    pub experiment: String,
    pub model: String,
    pub steps: usize,
    pub seed: u64,
    pub se_factor: f64,
    pub bootstrap: usize,
    pub cases: Vec<ConsistencyCase>,
    pub pass: bool,
}

/// Ensemble filter against the Kalman filter on one observation record.
pub fn consistency_case(
    model: &StateSpaceModel,
    obs: &ObservationSeries,
    kf: &[(GaussianBelief, GaussianBelief)],
    variant: TransformVariant,
    members: usize,
    cfg: &ExperimentConfig,
) -> Result<ConsistencyCase> {
    let x0 = gaussian_draws(
        &model.prior_mean,
        &model.prior_cov,
        members,
        cfg.seed,
        Purpose::Initial,
        0,
        Execution::Parallel,
    )?;
    let mut ens = Ensemble::new(x0)?;
    let mut rows = Vec::with_capacity(obs.len());
    for (k, (y, (_, kf_a))) in obs.values.iter().zip(kf).enumerate() {
        let step = k as u64 + 1;
        let w = member_normals(
            cfg.seed,
            Purpose::Model,
            0,
            step,
            model.dim(),
            members,
            Execution::Parallel,
        );
        let f = forecast(&ens, model, &w)?;
        ens = analysis(&f, y, variant, &model.h, &model.r)?;
        let mean_gap = (ens.mean() - &kf_a.mean).norm();
        let cov_gap = spectral_norm(&(ens.cov().as_matrix() - kf_a.cov.as_matrix()));
        let (mean_se, cov_se) = member_bootstrap_se(&ens, cfg.bootstrap, cfg.seed, step);
        rows.push(ConsistencyRow {
            k: k + 1,
            mean_gap,
            mean_se,
            cov_gap,
            cov_se,
            pass: mean_gap < cfg.se_factor * mean_se && cov_gap < cfg.se_factor * cov_se,
        });
    }
    let ratio = |gap: fn(&ConsistencyRow) -> (f64, f64)| {
        rows.iter()
            .map(|r| {
                let (g, s) = gap(r);
                g / s
            })
            .fold(0.0, f64::max)
    };
    Ok(ConsistencyCase {
        variant: variant.name().into(),
        members,
        max_mean_ratio: ratio(|r| (r.mean_gap, r.mean_se)),
        max_cov_ratio: ratio(|r| (r.cov_gap, r.cov_se)),
        pass: rows.iter().all(|r| r.pass),
        rows,
    })
}

fn consistency(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let model = builtin_model(&cfg.model, TimeKind::Discrete)?;
    let (traj, obs) = twin_discrete(&model, cfg.steps, cfg.seed)?;
    let kf = kf_run(&model, &obs)?;
    let mut art = Artifacts::new();
    art.add("twin.csv", csv_bytes(|b| write_twin_csv(b, &traj, &obs))?);
    let beliefs: Vec<GaussianBelief> = std::iter::once(GaussianBelief::prior(&model))
        .chain(kf.iter().map(|(_, a)| a.clone()))
        .collect();
    let times: Vec<f64> = (0..beliefs.len()).map(|k| k as f64).collect();
    art.add(
        "kalman.csv",
        csv_bytes(|b| write_beliefs_csv(b, &times, &beliefs))?,
    );

    let mut cases = Vec::new();
    for &variant in &cfg.variants {
        for &m in &cfg.members {
            let case = consistency_case(&model, &obs, &kf, variant, m, cfg)?;
            writeln!(
                art.summary,
                "{variant} M = {m}: max gap/SE mean {:.3}, covariance {:.3} (limit {}) -> {}",
                case.max_mean_ratio,
                case.max_cov_ratio,
                cfg.se_factor,
                if case.pass { "pass" } else { "fail" }
            )
            .ok();
            let bytes = csv_bytes(|b| {
                let mut w = csv::Writer::from_writer(b);
                w.write_record(["k", "mean_gap", "mean_se", "cov_gap", "cov_se", "pass"])?;
                for r in &case.rows {
                    w.write_record([
                        r.k.to_string(),
                        r.mean_gap.to_string(),
                        r.mean_se.to_string(),
                        r.cov_gap.to_string(),
                        r.cov_se.to_string(),
                        u8::from(r.pass).to_string(),
                    ])?;
                }
                w.flush()?;
                Ok(())
            })?;
            art.add(format!("consistency/{variant}_M{m}.csv"), bytes);
            cases.push(case);
        }
    }
    let report = ConsistencyReport {
        experiment: cfg.kind.name().into(),
        model: cfg.model.clone(),
        steps: cfg.steps,
        seed: cfg.seed,
        se_factor: cfg.se_factor,
        bootstrap: cfg.bootstrap,
        pass: cases.iter().all(|c| c.pass),
        cases,
    };
    art.pass = report.pass;
    art.add_json("consistency_report.json", &report)?;
    Ok(art)
}

fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn random_spd(rng: &mut impl Rng, d: usize, ridge: f64) -> Result<SymmetricMatrix> {
    let g = normal_matrix(rng, d, d);
    let m =
        SymmetricMatrix::gram(&g, 1.0 / d as f64).into_matrix() + DMatrix::identity(d, d) * ridge;
    SymmetricMatrix::new_psd(m)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpdeAuditRow {
    pub belief: usize,
    pub dim: usize,
    pub test_function: String,
    pub cancellation_residual: f64,
    pub innovation_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpdeAuditReport {
    pub experiment: String,
    pub beliefs: usize,
    pub evaluations: usize,
    pub max_cancellation_residual: f64,
    pub max_innovation_gap: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Random Gaussian belief with observation and model operators, dimension in
/// `1..=max_dim`.
fn random_spde_case(
    seed: u64,
    index: usize,
    max_dim: usize,
) -> Result<(
    GaussianBelief,
    DMatrix<f64>,
    SymmetricMatrix,
    LinearGenerator,
)> {
    let mut rng = NoiseStream::new(seed, StreamId::new(Purpose::Sweep, index as u64, 1)).rng(0);
    let d = rng.random_range(1..=max_dim);
    let q = rng.random_range(1..=d);
    let mean = DVector::from_fn(d, |_, _| rng.sample(StandardNormal));
    let cov = random_spd(&mut rng, d, 0.1)?;
    let h = normal_matrix(&mut rng, q, d);
    let r = random_spd(&mut rng, q, 0.5)?;
    let drift = normal_matrix(&mut rng, d, d) / (d as f64).sqrt();
    let qm = random_spd(&mut rng, d, 0.0)?;
    Ok((
        GaussianBelief::new(mean, cov)?,
        h,
        r,
        LinearGenerator { drift, q: qm },
    ))
}

/// SPDE term audit over random Gaussian beliefs.
pub fn spde_audit_rows(seed: u64, beliefs: usize, max_dim: usize) -> Result<Vec<SpdeAuditRow>> {
    let per_belief = try_map_indexed(Execution::Parallel, beliefs, |i| {
        let (b, h, r, gen) = random_spde_case(seed, i, max_dim)?;
        all_test_functions(b.dim())
            .into_iter()
            .map(|phi| {
                let t = spde_term_audit(&b, &h, &r, phi, &gen)?;
                Ok(SpdeAuditRow {
                    belief: i,
                    dim: b.dim(),
                    test_function: format!("{phi:?}"),
                    cancellation_residual: t.cancellation_residual(),
                    innovation_gap: t.innovation_gap(),
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(per_belief.into_iter().flatten().collect())
}

fn spde_audit(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let rows = spde_audit_rows(cfg.seed, cfg.beliefs, cfg.dim)?;
    let max_c = rows
        .iter()
        .map(|r| r.cancellation_residual)
        .fold(0.0, f64::max);
    let max_i = rows.iter().map(|r| r.innovation_gap).fold(0.0, f64::max);
    let report = SpdeAuditReport {
        experiment: cfg.kind.name().into(),
        beliefs: cfg.beliefs,
        evaluations: rows.len(),
        max_cancellation_residual: max_c,
        max_innovation_gap: max_i,
        tolerance: SPDE_TOL,
        pass: max_c <= SPDE_TOL && max_i <= SPDE_TOL,
    };
    let mut art = Artifacts::new();
    art.pass = report.pass;
    writeln!(
        art.summary,
        "{} evaluations: max cancellation residual {max_c:.3e}, max innovation gap {max_i:.3e}",
        rows.len()
    )
    .ok();
    let bytes = csv_bytes(|b| {
        let mut w = csv::Writer::from_writer(b);
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    })?;
    art.add("spde_audit.csv", bytes);
    art.add_json("spde_audit.json", &report)?;
    Ok(art)
}

/// One random instance of the transform audit: forecast ensemble, `H`, `R`.
pub fn random_audit_case(
    seed: u64,
    index: usize,
    max_dim: usize,
    max_members: usize,
) -> Result<(Ensemble, DMatrix<f64>, SymmetricMatrix)> {
    let mut rng = NoiseStream::new(seed, StreamId::new(Purpose::Sweep, index as u64, 0)).rng(0);
    let d = rng.random_range(1..=max_dim);
    let m = rng.random_range(2..=max_members);
    let q = rng.random_range(1..=d);
    let scale = 10f64.powf(rng.random_range(-1.0..1.0));
    let x = normal_matrix(&mut rng, d, m) * scale;
    let h = normal_matrix(&mut rng, q, d);
    let r = random_spd(&mut rng, q, 0.1)?;
    Ok((Ensemble::new(x)?, h, r))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub instance: usize,
    pub check: String,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransformsAuditReport {
    pub experiment: String,
    pub sweeps: usize,
    pub max_dim: usize,
    pub max_members: usize,
    pub checks: usize,
    pub violations: Vec<Violation>,
    pub pass: bool,
}

/// Identity and bound audit of every transform over `sweeps` random
/// instances, plus a gain Lipschitz check on an independent pair `(P, Q)`.
pub fn transforms_audit_report(
    seed: u64,
    sweeps: usize,
    max_dim: usize,
    max_members: usize,
) -> Result<TransformsAuditReport> {
    let reports = try_map_indexed(Execution::Parallel, sweeps, |i| {
        let (ens, h, r) = random_audit_case(seed, i, max_dim, max_members)?;
        let mut report: AuditReport = audit_identities(&ens, &h, &r);
        let mut rng = NoiseStream::new(seed, StreamId::new(Purpose::Sweep, i as u64, 2)).rng(0);
        let other = random_spd(&mut rng, ens.dim(), 0.0)?;
        let mut pair = gain_lipschitz_check(ens.cov(), &other, &h, &r)?;
        pair.name = "gain-lipschitz/random-pair".into();
        report.checks.push(pair);
        Ok::<_, EsrfError>(report)
    })?;
    let checks = reports.iter().map(|r| r.checks.len()).sum();
    let violations: Vec<Violation> = reports
        .iter()
        .enumerate()
        .flat_map(|(i, r)| {
            r.violations().map(move |c| Violation {
                instance: i,
                check: c.name.clone(),
                lhs: c.lhs,
                rhs: c.rhs,
            })
        })
        .collect();
    Ok(TransformsAuditReport {
        experiment: ExperimentKind::TransformsAudit.name().into(),
        sweeps,
        max_dim,
        max_members,
        checks,
        pass: violations.is_empty(),
        violations,
    })
}

impl TransformsAuditReport {
    pub fn summary(&self) -> String {
        format!(
            "{} instances (d <= {}, M <= {}), {} checks, {} violations",
            self.sweeps,
            self.max_dim,
            self.max_members,
            self.checks,
            self.violations.len()
        )
    }
}

fn transforms_audit(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let report = transforms_audit_report(cfg.seed, cfg.sweeps, cfg.dim, cfg.max_members)?;
    let mut art = Artifacts::new();
    art.pass = report.pass;
    writeln!(art.summary, "{}", report.summary()).ok();
    for v in &report.violations {
        writeln!(
            art.summary,
            "  instance {}: {} ({} > {})",
            v.instance, v.check, v.lhs, v.rhs
        )
        .ok();
    }
    art.add_json("transforms_audit.json", &report)?;
    Ok(art)
}
