//! Flat `key = value` experiment configuration.
//!
//! ```text
//! # comment
//! kind = convergence-discrete
//! model = scalar-linear
//! m = 8,16,32,64
//! replications = 64
//! ```
//!
//! Keys: `kind` (required), `model`, `variant`, `m`, `steps`, `eval_step`,
//! `horizon`, `dt`, `replications`, `p`, `seed`, `out`, `m_ref`, `bootstrap`,
//! `stop_level`, `synthetic_rate`, `band`, `variants`, `se_factor`, `sweeps`,
//! `dim`, `max_members`, `beliefs`, `write_series`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{EsrfError, Result};
use crate::transforms::TransformVariant;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentKind {
    ConvergenceDiscrete,
    ConvergenceContinuous,
    Consistency,
    SpdeAudit,
    TransformsAudit,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::ConvergenceDiscrete => "convergence-discrete",
            ExperimentKind::ConvergenceContinuous => "convergence-continuous",
            ExperimentKind::Consistency => "consistency",
            ExperimentKind::SpdeAudit => "spde-audit",
            ExperimentKind::TransformsAudit => "transforms-audit",
        }
    }
}

impl FromStr for ExperimentKind {
    type Err = EsrfError;

    fn from_str(s: &str) -> Result<Self> {
        [
            ExperimentKind::ConvergenceDiscrete,
            ExperimentKind::ConvergenceContinuous,
            ExperimentKind::Consistency,
            ExperimentKind::SpdeAudit,
            ExperimentKind::TransformsAudit,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| EsrfError::Config(format!("unknown experiment kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VariantChoice {
    /// ETKF for `M < d`, EAKF otherwise, decided per ensemble size.
    Auto,
    Fixed(TransformVariant),
}

impl VariantChoice {
    pub fn resolve(self, dim: usize, members: usize) -> TransformVariant {
        match self {
            VariantChoice::Auto => TransformVariant::default_for(dim, members),
            VariantChoice::Fixed(v) => v,
        }
    }
}

impl fmt::Display for VariantChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VariantChoice::Auto => f.write_str("auto"),
            VariantChoice::Fixed(v) => write!(f, "{v}"),
        }
    }
}

pub const DEFAULT_MEMBERS: [usize; 8] = [8, 16, 32, 64, 128, 256, 512, 1024];

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub model: String,
    pub variant: VariantChoice,
    pub members: Vec<usize>,
    pub steps: usize,
    pub eval_step: Option<usize>,
    pub horizon: f64,
    pub dt: f64,
    pub replications: usize,
    pub p_orders: Vec<u32>,
    pub seed: u64,
    pub out: PathBuf,
    pub m_ref: usize,
    pub bootstrap: usize,
    pub stop_level: Option<f64>,
    pub synthetic_rate: Option<f64>,
    pub band: (f64, f64),
    pub variants: Vec<TransformVariant>,
    pub se_factor: f64,
    pub sweeps: usize,
    pub dim: usize,
    pub max_members: usize,
    pub beliefs: usize,
    pub write_series: bool,
}

impl ExperimentConfig {
    /// Defaults of an experiment kind.
    pub fn new(kind: ExperimentKind) -> Self {
        let continuous = kind == ExperimentKind::ConvergenceContinuous;
        let consistency = kind == ExperimentKind::Consistency;
        Self {
            kind,
            model: "scalar-linear".into(),
            variant: VariantChoice::Auto,
            members: if consistency {
                vec![10_000]
            } else {
                DEFAULT_MEMBERS.to_vec()
            },
            steps: if consistency { 20 } else { 10 },
            eval_step: None,
            horizon: 1.0,
            dt: 1e-3,
            replications: if continuous { 16 } else { 64 },
            p_orders: vec![2],
            seed: 0,
            out: PathBuf::from("out"),
            m_ref: 1 << 15,
            bootstrap: if consistency { 200 } else { 1000 },
            stop_level: None,
            synthetic_rate: None,
            band: if continuous {
                (-0.75, -0.25)
            } else {
                (-0.70, -0.30)
            },
            variants: vec![
                TransformVariant::Eakf,
                TransformVariant::EtkfDirect,
                TransformVariant::Whitaker,
            ],
            se_factor: 5.0,
            sweeps: 200,
            dim: if kind == ExperimentKind::SpdeAudit {
                4
            } else {
                6
            },
            max_members: 20,
            beliefs: 100,
            write_series: true,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EsrfError::from(e).context(format!("reading {}", path.display())))?;
        text.parse()
    }

    /// Step at which discrete errors are evaluated.
    pub fn eval_step(&self) -> usize {
        self.eval_step.unwrap_or(self.steps)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(EsrfError::Config(msg));
        if self.members.is_empty() {
            return bad("`m` must list at least one ensemble size".into());
        }
        if let Some(m) = self.members.iter().find(|&&m| m < 2) {
            return bad(format!("ensemble sizes must be at least 2, got {m}"));
        }
        let mut sorted = self.members.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.members.len() {
            return bad("ensemble sizes must be distinct".into());
        }
        if self.replications < 1 {
            return bad("replications must be at least 1".into());
        }
        if self.p_orders.is_empty() || self.p_orders.iter().any(|p| ![1, 2, 4].contains(p)) {
            return bad("p must be a list drawn from 1, 2, 4".into());
        }
        if self.steps < 1 {
            return bad("steps must be at least 1".into());
        }
        if self.eval_step() > self.steps {
            return bad(format!(
                "eval_step {} exceeds steps {}",
                self.eval_step(),
                self.steps
            ));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        if self.m_ref < 2 {
            return bad("m_ref must be at least 2".into());
        }
        if !(self.band.0 < self.band.1) {
            return bad("band must be an increasing pair".into());
        }
        if self.dim < 1 || self.max_members < 2 {
            return bad("dim must be positive and max_members at least 2".into());
        }
        if self.variants.is_empty() {
            return bad("variants must not be empty".into());
        }
        if matches!(
            self.kind,
            ExperimentKind::ConvergenceDiscrete | ExperimentKind::ConvergenceContinuous
        ) && self.synthetic_rate.is_none()
        {
            if self.replications < 2 {
                return bad("rate experiments need at least 2 replications".into());
            }
            if self.members.len() < crate::stats::MIN_FIT_POINTS {
                return bad(format!(
                    "rate experiments need at least {} ensemble sizes",
                    crate::stats::MIN_FIT_POINTS
                ));
            }
        }
        Ok(())
    }

    /// Canonical `key = value` listing of every field.
    pub fn render(&self) -> String {
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut lines = vec![
            format!("kind = {}", self.kind.name()),
            format!("model = {}", self.model),
            format!("variant = {}", self.variant),
            format!("m = {}", list(&self.members)),
            format!("steps = {}", self.steps),
            format!("eval_step = {}", self.eval_step()),
            format!("horizon = {}", self.horizon),
            format!("dt = {}", self.dt),
            format!("replications = {}", self.replications),
            format!(
                "p = {}",
                self.p_orders
                    .iter()
                    .map(|p| p.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            ),
            format!("seed = {}", self.seed),
            format!("m_ref = {}", self.m_ref),
            format!("bootstrap = {}", self.bootstrap),
            format!("band = {},{}", self.band.0, self.band.1),
            format!(
                "variants = {}",
                self.variants
                    .iter()
                    .map(|v| v.name())
                    .collect::<Vec<_>>()
                    .join(",")
            ),
            format!("se_factor = {}", self.se_factor),
            format!("sweeps = {}", self.sweeps),
            format!("dim = {}", self.dim),
            format!("max_members = {}", self.max_members),
            format!("beliefs = {}", self.beliefs),
            format!("write_series = {}", self.write_series),
        ];
        if let Some(n) = self.stop_level {
            lines.push(format!("stop_level = {n}"));
        }
        if let Some(c) = self.synthetic_rate {
            lines.push(format!("synthetic_rate = {c}"));
        }
        lines.join("\n") + "\n"
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| EsrfError::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

impl FromStr for ExperimentConfig {
    type Err = EsrfError;

    fn from_str(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                EsrfError::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim().to_string();
            if entries
                .insert(key.clone(), value.trim().to_string())
                .is_some()
            {
                return Err(EsrfError::Config(format!("duplicate key `{key}`")));
            }
        }
        let kind: ExperimentKind = entries
            .remove("kind")
            .ok_or_else(|| EsrfError::Config("missing `kind`".into()))?
            .parse()?;
        let mut cfg = ExperimentConfig::new(kind);
        for (key, value) in entries {
            let v = value.as_str();
            match key.as_str() {
                "model" => cfg.model = v.to_string(),
                "variant" => {
                    cfg.variant = if v == "auto" {
                        VariantChoice::Auto
                    } else {
                        VariantChoice::Fixed(
                            v.parse()
                                .map_err(|_| EsrfError::Config(format!("unknown variant `{v}`")))?,
                        )
                    }
                }
                "m" => cfg.members = parse_list(&key, v)?,
                "steps" => cfg.steps = parse_value(&key, v)?,
                "eval_step" => cfg.eval_step = Some(parse_value(&key, v)?),
                "horizon" => cfg.horizon = parse_value(&key, v)?,
                "dt" => cfg.dt = parse_value(&key, v)?,
                "replications" => cfg.replications = parse_value(&key, v)?,
                "p" => cfg.p_orders = parse_list(&key, v)?,
                "seed" => cfg.seed = parse_value(&key, v)?,
                "out" => cfg.out = PathBuf::from(v),
                "m_ref" => cfg.m_ref = parse_value(&key, v)?,
                "bootstrap" => cfg.bootstrap = parse_value(&key, v)?,
                "stop_level" => cfg.stop_level = Some(parse_value(&key, v)?),
                "synthetic_rate" => cfg.synthetic_rate = Some(parse_value(&key, v)?),
                "band" => {
                    let b: Vec<f64> = parse_list(&key, v)?;
                    if b.len() != 2 {
                        return Err(EsrfError::Config("band takes two numbers".into()));
                    }
                    cfg.band = (b[0], b[1]);
                }
                "variants" => {
                    cfg.variants = v
                        .split(',')
                        .map(|s| {
                            s.trim()
                                .parse()
                                .map_err(|_| EsrfError::Config(format!("unknown variant `{s}`")))
                        })
                        .collect::<Result<_>>()?
                }
                "se_factor" => cfg.se_factor = parse_value(&key, v)?,
                "sweeps" => cfg.sweeps = parse_value(&key, v)?,
                "dim" => cfg.dim = parse_value(&key, v)?,
                "max_members" => cfg.max_members = parse_value(&key, v)?,
                "beliefs" => cfg.beliefs = parse_value(&key, v)?,
                "write_series" => cfg.write_series = parse_value(&key, v)?,
                other => return Err(EsrfError::Config(format!("unknown key `{other}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
