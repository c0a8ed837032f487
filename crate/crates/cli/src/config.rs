//! Run configuration: a flat `key = value` file plus command-line overrides
//! on top of preset defaults.
//!
//! Recognized keys (one per [`RunConfig`] field):
//!
//! | key | meaning |
//! |---|---|
//! | `experiment` | preset id `1..5` or preset name; fixes the model |
//! | `coupling` | `aggregation`, `schelling` or `linear` |
//! | `a`, `saturation` | aggregation strength and cap |
//! | `k1`, `k2`, `alpha1`, `alpha2`, `eta` | Schelling parameters |
//! | `matrix` | `a11,a12,a21,a22` for the linear coupling |
//! | `hamiltonian` | `quadratic` or `power` |
//! | `kappa1`, `kappa2`, `gamma` | Hamiltonian parameters |
//! | `sigma` | diffusion |
//! | `nx`, `nt`, `paper_grid` | grid (`nt` defaults to `nx`); `paper_grid = true` means 400 x 400 |
//! | `t`, `t_min`, `t_max` | horizon for `solve`; bounds for continuation |
//! | `eps` | local-guess amplitude |
//! | `branch` | `n` or `n,k` |
//! | `direction` | `increasing`, `decreasing` or `both` |
//! | `n_max`, `k_max` | size of the bifurcation table |
//! | `out`, `workers` | output directory, worker threads |
//! | `newton.tol`, `newton.max_iters`, `newton.max_backtracks`, `newton.linear_tol`, `newton.chord` | Newton options |
//! | `cont.initial_step`, `cont.min_step`, `cont.max_step`, `cont.collapse_threshold`, `cont.fold_slope`, `cont.arclength`, `cont.seed_step`, `cont.seed_tries`, `cont.max_points` | continuation policy |
//!
//! Lines starting with `#` and blank lines are ignored.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use mfg_branches::model::Mat2;
use mfg_branches::{
    ContinuationPolicy, CouplingSpec, Direction, Experiment, HamiltonianSpec, ModelSpec,
    NewtonOptions,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {value:?} ({reason})")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("experiment presets fix the model; remove {0:?} or the experiment key")]
    ModelOverride(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

const MODEL_KEYS: &[&str] = &[
    "coupling",
    "a",
    "saturation",
    "k1",
    "k2",
    "alpha1",
    "alpha2",
    "eta",
    "matrix",
    "hamiltonian",
    "kappa1",
    "kappa2",
    "gamma",
    "sigma",
];

const RUN_KEYS: &[&str] = &[
    "experiment",
    "nx",
    "nt",
    "paper_grid",
    "t",
    "t_min",
    "t_max",
    "eps",
    "branch",
    "direction",
    "n_max",
    "k_max",
    "out",
    "workers",
    "newton.tol",
    "newton.max_iters",
    "newton.max_backtracks",
    "newton.linear_tol",
    "newton.chord",
    "cont.initial_step",
    "cont.min_step",
    "cont.max_step",
    "cont.collapse_threshold",
    "cont.fold_slope",
    "cont.arclength",
    "cont.seed_step",
    "cont.seed_tries",
    "cont.max_points",
];

/// Ordered key/value settings. Later layers override earlier ones.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings(BTreeMap<String, String>);

impl Settings {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut s = Settings::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                });
            };
            s.set(k.trim(), v.trim())?;
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        if !MODEL_KEYS.contains(&key) && !RUN_KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey(key.to_string()));
        }
        self.0.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn overlay(&mut self, other: &Settings) {
        for (k, v) in &other.0 {
            self.0.insert(k.clone(), v.clone());
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| {
                v.parse::<T>().map_err(|e| ConfigError::BadValue {
                    key: key.to_string(),
                    value: v.to_string(),
                    reason: e.to_string(),
                })
            })
            .transpose()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunKind {
    Predict,
    Solve,
    Continue,
    Experiment(Experiment),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Directions {
    Increasing,
    Decreasing,
    Both,
}

impl Directions {
    pub fn list(self) -> Vec<Direction> {
        match self {
            Directions::Increasing => vec![Direction::IncreasingT],
            Directions::Decreasing => vec![Direction::DecreasingT],
            Directions::Both => vec![Direction::DecreasingT, Direction::IncreasingT],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub kind: RunKind,
    pub experiment: Option<Experiment>,
    pub model: ModelSpec,
    pub nx: usize,
    pub nt: usize,
    pub t: Option<f64>,
    pub t_min: Option<f64>,
    pub t_max: Option<f64>,
    pub eps: f64,
    pub branch: Option<(usize, usize)>,
    pub directions: Directions,
    pub n_max: usize,
    pub k_max: usize,
    pub out: Option<PathBuf>,
    pub workers: usize,
    pub newton: NewtonOptions,
    pub continuation: ContinuationPolicy,
}

pub const DESK_GRID: usize = 100;
pub const FINE_GRID: usize = 400;

fn bad(key: &str, value: &str, reason: &str) -> ConfigError {
    ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: reason.into(),
    }
}

pub fn parse_branch(v: &str) -> Result<(usize, usize), ConfigError> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    let num = |s: &str| {
        s.parse::<usize>()
            .ok()
            .filter(|&x| x >= 1)
            .ok_or_else(|| bad("branch", v, "expected n or n,k with positive integers"))
    };
    match parts.as_slice() {
        [n] => Ok((num(n)?, 1)),
        [n, k] => Ok((num(n)?, num(k)?)),
        _ => Err(bad("branch", v, "expected n or n,k")),
    }
}

pub fn parse_experiment(v: &str) -> Result<Experiment, ConfigError> {
    v.parse::<u32>()
        .ok()
        .and_then(Experiment::from_id)
        .or_else(|| Experiment::from_name(v))
        .ok_or_else(|| bad("experiment", v, "expected 1..5 or a preset name"))
}

fn build_model(s: &Settings) -> Result<ModelSpec, ConfigError> {
    let f = |key: &str, default: f64| -> Result<f64, ConfigError> {
        Ok(s.parsed::<f64>(key)?.unwrap_or(default))
    };
    let coupling = match s.get("coupling").unwrap_or("aggregation") {
        "aggregation" => CouplingSpec::LinearAggregation {
            a: f("a", 2.0)?,
            saturation: f("saturation", mfg_branches::model::DEFAULT_SATURATION)?,
        },
        "schelling" => CouplingSpec::Schelling {
            k: [f("k1", 5.0)?, f("k2", 3.0)?],
            alpha: [f("alpha1", 0.7)?, f("alpha2", 0.55)?],
            eta: f("eta", mfg_branches::model::DEFAULT_SCHELLING_ETA)?,
        },
        "linear" => {
            let raw = s
                .get("matrix")
                .ok_or_else(|| ConfigError::Invalid("linear coupling needs `matrix`".into()))?;
            let v: Vec<f64> = raw
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| bad("matrix", raw, &e.to_string()))?;
            if v.len() != 4 {
                return Err(bad("matrix", raw, "expected four comma-separated entries"));
            }
            let matrix: Mat2 = [[v[0], v[1]], [v[2], v[3]]];
            CouplingSpec::ExplicitLinear { matrix }
        }
        other => return Err(bad("coupling", other, "expected aggregation, schelling or linear")),
    };
    let hamiltonian = match s.get("hamiltonian").unwrap_or("quadratic") {
        "quadratic" => HamiltonianSpec::Quadratic {
            kappa: [f("kappa1", 1.0)?, f("kappa2", 1.0)?],
        },
        "power" => HamiltonianSpec::PowerLaw {
            gamma: f("gamma", 2.0)?,
        },
        other => return Err(bad("hamiltonian", other, "expected quadratic or power")),
    };
    Ok(ModelSpec::new(coupling, hamiltonian, f("sigma", 1.0 / PI)?))
}

impl RunConfig {
    /// Resolves `kind` against preset defaults, then `file`, then `cli`.
    pub fn resolve(kind: RunKind, file: &Settings, cli: &Settings) -> Result<Self, ConfigError> {
        let mut s = file.clone();
        s.overlay(cli);

        let experiment = match kind {
            RunKind::Experiment(e) => Some(e),
            _ => s.get("experiment").map(parse_experiment).transpose()?,
        };
        let model = match experiment {
            Some(e) => {
                if let Some(k) = MODEL_KEYS.iter().find(|k| s.get(k).is_some()) {
                    return Err(ConfigError::ModelOverride(k.to_string()));
                }
                e.model()
            }
            None => build_model(&s)?,
        };
        model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;

        let fine = s.parsed::<bool>("paper_grid")?.unwrap_or(false);
        let base = if fine { FINE_GRID } else { DESK_GRID };
        let nx = s.parsed::<usize>("nx")?.unwrap_or(base);
        let nt = s.parsed::<usize>("nt")?.unwrap_or(nx);
        if nx < 8 || nt < 8 {
            return Err(ConfigError::Invalid(format!("grid {nx} x {nt} is below 8 x 8")));
        }

        let mut newton = NewtonOptions::default();
        if let Some(v) = s.parsed("newton.tol")? {
            newton.tol_residual = v;
        }
        if let Some(v) = s.parsed("newton.max_iters")? {
            newton.max_iters = v;
        }
        if let Some(v) = s.parsed("newton.max_backtracks")? {
            newton.max_backtracks = v;
        }
        if let Some(v) = s.parsed("newton.linear_tol")? {
            newton.linear_tol = v;
        }
        if let Some(v) = s.parsed("newton.chord")? {
            newton.chord_contraction = v;
        }
        newton.validate().map_err(ConfigError::Invalid)?;

        let mut continuation = ContinuationPolicy {
            newton,
            ..ContinuationPolicy::default()
        };
        if let Some(v) = s.parsed("cont.initial_step")? {
            continuation.initial_step = v;
        }
        if let Some(v) = s.parsed("cont.min_step")? {
            continuation.min_step = v;
        }
        if let Some(v) = s.parsed("cont.max_step")? {
            continuation.max_step = v;
        }
        if let Some(v) = s.parsed("cont.collapse_threshold")? {
            continuation.collapse_threshold = v;
        }
        if let Some(v) = s.parsed("cont.fold_slope")? {
            continuation.fold_slope = v;
        }
        if let Some(v) = s.parsed("cont.arclength")? {
            continuation.allow_arclength = v;
        }
        if let Some(v) = s.parsed("cont.seed_step")? {
            continuation.seed_step = v;
        }
        if let Some(v) = s.parsed("cont.seed_tries")? {
            continuation.seed_tries = v;
        }
        if let Some(v) = s.parsed("cont.max_points")? {
            continuation.max_points = v;
        }
        continuation
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;

        let eps = s.parsed::<f64>("eps")?.unwrap_or(0.1);
        if !(1e-3..=0.5).contains(&eps) {
            return Err(bad("eps", &eps.to_string(), "must lie in [1e-3, 0.5]"));
        }
        let positive = |key: &str| -> Result<Option<f64>, ConfigError> {
            match s.parsed::<f64>(key)? {
                Some(v) if !(v.is_finite() && v > 0.0) => Err(bad(key, &v.to_string(), "must be > 0")),
                v => Ok(v),
            }
        };
        let (t, t_min, t_max) = (positive("t")?, positive("t_min")?, positive("t_max")?);
        if let (Some(a), Some(b)) = (t_min, t_max) {
            if a >= b {
                return Err(ConfigError::Invalid(format!("t_min = {a} must be below t_max = {b}")));
            }
        }
        if kind == RunKind::Solve && t.is_none() {
            return Err(ConfigError::Invalid("solve needs a horizon `t`".into()));
        }

        let directions = match s.get("direction").unwrap_or("both") {
            "increasing" => Directions::Increasing,
            "decreasing" => Directions::Decreasing,
            "both" => Directions::Both,
            other => return Err(bad("direction", other, "expected increasing, decreasing or both")),
        };
        let workers = s.parsed::<usize>("workers")?.unwrap_or(1);
        if workers == 0 {
            return Err(bad("workers", "0", "must be at least 1"));
        }

        Ok(RunConfig {
            kind,
            experiment,
            model,
            nx,
            nt,
            t,
            t_min,
            t_max,
            eps,
            branch: s.get("branch").map(parse_branch).transpose()?,
            directions,
            n_max: s.parsed("n_max")?.unwrap_or(3),
            k_max: s.parsed("k_max")?.unwrap_or(3),
            out: s.get("out").map(PathBuf::from),
            workers,
            newton,
            continuation,
        })
    }
}
