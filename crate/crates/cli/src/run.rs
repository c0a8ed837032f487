//! The four operations behind the subcommands, and the branch-tracing
//! pipelines they share.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use mfg_branches::continuation::{
    antiphase_correlation, homotopy, oscillation_count_mode, shape_correlation, KeepStates,
};
use mfg_branches::{
    bifurcation_times, continue_branch, local_guess, newton_solve, seed_branch, BifurcationPoint,
    Branch, BranchPoint, ContinuationPolicy, Direction, EigenMode, Experiment, Grid,
    HamiltonianSpec, ModelSpec, SpectralError, Termination,
};
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::output::{branch_csv, dump_fields, write_json};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Model(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("{failed} of {total} branches failed; see the manifest")]
    Partial { failed: usize, total: usize },
    #[error("output error: {0}")]
    Io(#[from] io::Error),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Model(_) | RunError::Io(_) => 2,
            RunError::Solver(_) => 3,
            RunError::Partial { .. } => 4,
        }
    }
}

impl From<SpectralError> for RunError {
    fn from(e: SpectralError) -> Self {
        RunError::Model(e.to_string())
    }
}

/// One row of the bifurcation table.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub n: usize,
    pub k: usize,
    pub lambda: f64,
    pub t_star_continuous: f64,
    /// `T*` with the finite-difference eigenvalue of the run grid.
    pub t_star_discrete: Option<f64>,
    pub omega: f64,
    pub tau: f64,
    pub resonant: bool,
}

/// Model whose linearization predicts the branches: the model itself, or its
/// quadratic companion when the Hamiltonian is a power law.
pub fn linear_model(model: &ModelSpec) -> ModelSpec {
    let mut m = *model;
    if !m.hamiltonian.is_quadratic() {
        m.hamiltonian = HamiltonianSpec::default();
    }
    m
}

fn predictions(model: &ModelSpec, mode: EigenMode, n_max: usize, k_max: usize) -> Result<Vec<BifurcationPoint>, RunError> {
    let lin = linear_model(model);
    let tj = lin.linearization().map_err(|e| RunError::Model(e.to_string()))?;
    Ok(bifurcation_times(&tj, lin.sigma, mode, n_max, k_max)?)
}

pub fn predict(cfg: &RunConfig) -> Result<Vec<PredictionRow>, RunError> {
    let cont = predictions(&cfg.model, EigenMode::Continuous, cfg.n_max, cfg.k_max)?;
    let disc = predictions(&cfg.model, EigenMode::Discrete { nx: cfg.nx }, cfg.n_max, cfg.k_max)?;
    let rows = cont
        .iter()
        .map(|p| PredictionRow {
            n: p.n,
            k: p.k,
            lambda: p.lambda,
            t_star_continuous: p.t_star,
            t_star_discrete: disc.iter().find(|d| d.n == p.n && d.k == p.k).map(|d| d.t_star),
            omega: p.omega,
            tau: p.tau,
            resonant: p.resonant,
        })
        .collect();
    Ok(rows)
}

pub const PREDICTION_HEADER: &str = "n,k,lambda,T_star_continuous,T_star_discrete,omega,tau,resonant";

pub fn prediction_csv(rows: &[PredictionRow]) -> String {
    use crate::output::num;
    let mut s = format!("{PREDICTION_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.n,
            r.k,
            num(r.lambda),
            num(r.t_star_continuous),
            r.t_star_discrete.map(num).unwrap_or_default(),
            num(r.omega),
            num(r.tau),
            u8::from(r.resonant)
        ));
    }
    s
}

pub fn prediction_table(rows: &[PredictionRow]) -> String {
    let mut s = format!(
        "{:>3} {:>3} {:>12} {:>12} {:>12} {:>10} {:>10} {}\n",
        "n", "k", "lambda", "T*", "T*(h)", "omega", "tau", "resonant"
    );
    for r in rows {
        s.push_str(&format!(
            "{:>3} {:>3} {:>12.6} {:>12.6} {:>12} {:>10.6} {:>10.6} {}\n",
            r.n,
            r.k,
            r.lambda,
            r.t_star_continuous,
            r.t_star_discrete.map(|t| format!("{t:.6}")).unwrap_or_else(|| "-".into()),
            r.omega,
            r.tau,
            if r.resonant { "yes" } else { "no" }
        ));
    }
    s
}

fn grid(cfg: &RunConfig) -> Result<Grid, RunError> {
    Grid::new(cfg.nx, cfg.nt).map_err(|e| RunError::Model(e.to_string()))
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, RunError> {
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn discrete_point(cfg: &RunConfig, label: (usize, usize)) -> Result<BifurcationPoint, RunError> {
    let n_max = cfg.n_max.max(label.0);
    let k_max = cfg.k_max.max(label.1);
    predictions(&cfg.model, EigenMode::Discrete { nx: cfg.nx }, n_max, k_max)?
        .into_iter()
        .find(|p| (p.n, p.k) == label)
        .ok_or_else(|| {
            RunError::Model(format!(
                "mode k = {} has no bifurcation point for this model and grid",
                label.1
            ))
        })
}

/// Newton from the local guess of branch `(n, k)` at horizon `cfg.t`; writes
/// the four fields and `solve.json`.
pub fn solve(cfg: &RunConfig) -> Result<PathBuf, RunError> {
    let t = cfg.t.ok_or_else(|| ConfigError::Invalid("solve needs a horizon `t`".into()))?;
    let label = cfg.branch.unwrap_or((1, 1));
    let g = grid(cfg)?;
    let bp = discrete_point(cfg, label)?;
    let guess = local_guess(&bp, cfg.eps, g, t, &cfg.model);
    let (state, rep) = newton_solve(&guess, t, &cfg.model, &cfg.newton);
    let dir = out_dir(cfg)?;
    let files = dump_fields(&dir, "solve", &state, t)?;
    let summary = json!({
        "branch": [label.0, label.1],
        "eps": cfg.eps,
        "files": files,
        "grid": {"nx": g.nx, "nt": g.nt},
        "iterations": rep.iterations,
        "mass_drift": mfg_branches::discretization::mass_drift(&state),
        "model": model_json(&cfg.model),
        "residual_history": rep.residual_history,
        "status": format!("{:?}", rep.status),
        "sup_norm_m1": state.density_deviation(0) + 1.0,
        "sup_norm_m2": state.density_deviation(1) + 1.0,
        "t": t,
    });
    write_json(&dir.join("solve.json"), &summary)?;
    if rep.converged() {
        Ok(dir)
    } else {
        Err(RunError::Solver(format!("Newton ended with {:?}", rep.status)))
    }
}

/// Continuation runs of one branch, in path order.
#[derive(Debug, Clone)]
pub struct TracedBranch {
    pub label: (usize, usize),
    pub predicted: BifurcationPoint,
    pub seed: BranchPoint,
    pub runs: Vec<Branch>,
}

impl TracedBranch {
    /// All points along the path: decreasing runs reversed, then increasing
    /// runs, without repeating the shared seed.
    pub fn path(&self) -> Vec<&BranchPoint> {
        let mut out: Vec<&BranchPoint> = Vec::new();
        for r in self.runs.iter().filter(|r| r.direction == Direction::DecreasingT) {
            out.extend(r.points.iter().rev());
        }
        for r in self.runs.iter().filter(|r| r.direction == Direction::IncreasingT) {
            let skip = usize::from(!out.is_empty());
            out.extend(r.points.iter().skip(skip));
        }
        out
    }

    pub fn run(&self, direction: Direction) -> Option<&Branch> {
        self.runs.iter().find(|r| r.direction == direction)
    }
}

/// Horizon bounds of a branch run.
#[derive(Debug, Clone, Copy)]
pub struct Limits {
    pub t_min: f64,
    pub t_max: f64,
}

/// Seeds branch `bp` and follows it in each of `directions`. The run heading
/// back towards `T*` starts with half the distance from the seed to `T*`.
pub fn trace_quadratic(
    model: &ModelSpec,
    grid: Grid,
    bp: &BifurcationPoint,
    eps: f64,
    policy: &ContinuationPolicy,
    directions: &[Direction],
    limits: Limits,
) -> Result<TracedBranch, RunError> {
    let seed = seed_branch(bp, eps, model, grid, policy).map_err(|e| RunError::Solver(e.to_string()))?;
    let mut runs = Vec::new();
    for &d in directions {
        let (limit, sign) = match d {
            Direction::IncreasingT => (limits.t_max, 1.0),
            Direction::DecreasingT => (limits.t_min, -1.0),
        };
        if (limit - seed.t) * sign <= 0.0 {
            continue;
        }
        let mut pol = policy.clone();
        if d == Direction::DecreasingT {
            pol.reverse_limit = pol.reverse_limit.or(Some(limits.t_max));
        }
        let gap = 0.5 * (bp.t_star - seed.t) * sign;
        if gap > 0.0 {
            pol.initial_step = gap.clamp(pol.min_step, pol.initial_step);
        }
        let run = continue_branch(&seed, (bp.n, bp.k), d, limit, model, &pol)
            .map_err(|e| RunError::Solver(e.to_string()))?;
        runs.push(run);
    }
    Ok(TracedBranch {
        label: (bp.n, bp.k),
        predicted: *bp,
        seed,
        runs,
    })
}

/// Branches of a power-law model: the quadratic branch `bp` is followed up
/// to `t_start`, carried over to the power law by a homotopy in the exponent,
/// and then followed in decreasing `T` (through any turning point and back
/// up to `limits.t_max`).
pub fn trace_power_law(
    model: &ModelSpec,
    grid: Grid,
    bp: &BifurcationPoint,
    eps: f64,
    policy: &ContinuationPolicy,
    t_start: f64,
    limits: Limits,
) -> Result<TracedBranch, RunError> {
    let HamiltonianSpec::PowerLaw { gamma } = model.hamiltonian else {
        return Err(RunError::Model("power-law pipeline needs a power-law Hamiltonian".into()));
    };
    let quad = linear_model(model);
    let lift = trace_quadratic(
        &quad,
        grid,
        bp,
        eps,
        policy,
        &[Direction::IncreasingT],
        Limits { t_min: limits.t_min, t_max: t_start },
    )?;
    let top = lift
        .run(Direction::IncreasingT)
        .map(|r| r.last())
        .unwrap_or(&lift.seed);
    let stages = 10;
    let models: Vec<ModelSpec> = (1..=stages)
        .map(|i| {
            let mut m = *model;
            m.hamiltonian = HamiltonianSpec::PowerLaw {
                gamma: 2.0 + (gamma - 2.0) * i as f64 / stages as f64,
            };
            m
        })
        .collect();
    let state = top.state.as_ref().ok_or_else(|| RunError::Solver("quadratic branch kept no state".into()))?;
    let start = homotopy(state, top.t, &models, policy)
        .ok_or_else(|| RunError::Solver(format!("homotopy to gamma = {gamma} failed at T = {}", top.t)))?;
    let pol = ContinuationPolicy {
        reverse_limit: Some(limits.t_max),
        ..policy.clone()
    };
    let run = continue_branch(&start, (bp.n, bp.k), Direction::DecreasingT, limits.t_min, model, &pol)
        .map_err(|e| RunError::Solver(e.to_string()))?;
    Ok(TracedBranch {
        label: (bp.n, bp.k),
        predicted: *bp,
        seed: start,
        runs: vec![run],
    })
}

fn model_json(model: &ModelSpec) -> Value {
    serde_json::to_value(model).unwrap_or(Value::Null)
}

fn termination_name(t: Termination) -> &'static str {
    match t {
        Termination::ReachedTmax => "ReachedTmax",
        Termination::CollapsedToTrivial => "CollapsedToTrivial",
        Termination::StepUnderflow => "StepUnderflow",
        Termination::PointBudget => "PointBudget",
    }
}

/// Writes the branch file and the field dumps of a traced branch; returns its
/// manifest entry.
pub fn write_branch(dir: &Path, tb: &TracedBranch, model: &ModelSpec) -> io::Result<Value> {
    let (n, k) = tb.label;
    let stem = format!("branch_n{n}_k{k}");
    let path = tb.path();
    fs::write(dir.join(format!("{stem}.csv")), branch_csv(path.iter().copied()))?;

    let mut dumps = serde_json::Map::new();
    let near = tb
        .runs
        .iter()
        .find(|r| r.terminated_by == Termination::CollapsedToTrivial)
        .map(|r| r.last());
    let far = path.last().copied().filter(|p| p.state.is_some());
    for (tag, point) in [("near_bifurcation", near), ("t_limit", far)] {
        if let Some(p) = point.filter(|p| p.state.is_some()) {
            let files = dump_fields(dir, &format!("{stem}_{tag}"), p.state.as_ref().unwrap(), p.t)?;
            dumps.insert(tag.into(), json!({"t": p.t, "files": files}));
        }
    }

    let osc = |p: Option<&BranchPoint>| {
        p.filter(|_| k <= mfg_branches::continuation::PROJECTION_MODES)
            .map(|p| oscillation_count_mode(p, k))
    };
    let shape = near.and_then(|p| p.state.as_ref()).map(|s| {
        let pop = usize::from(tb.predicted.direction[0] == 0.0);
        shape_correlation(s, pop, k, tb.predicted.omega, near.unwrap().t)
    });
    let two_populations = !matches!(model.coupling, mfg_branches::CouplingSpec::LinearAggregation { .. });
    let antiphase = near
        .and_then(|p| p.state.as_ref())
        .filter(|_| two_populations)
        .map(antiphase_correlation);
    let runs: Vec<Value> = tb
        .runs
        .iter()
        .map(|r| {
            json!({
                "direction": format!("{:?}", r.direction),
                "endpoint": r.endpoint,
                "folds": r.folds,
                "points": r.points.len(),
                "t_last": r.last().t,
                "terminated_by": termination_name(r.terminated_by),
            })
        })
        .collect();
    Ok(json!({
        "antiphase_correlation": antiphase,
        "field_dumps": Value::Object(dumps),
        "file": format!("{stem}.csv"),
        "label": [n, k],
        "oscillation_count_near_bifurcation": osc(near),
        "oscillation_count_t_limit": osc(far),
        "runs": runs,
        "seed_t": tb.seed.t,
        "shape_correlation": shape,
        "status": "ok",
        "t_star_continuous": predictions(&linear_model(model), EigenMode::Continuous, n, k)
            .ok()
            .and_then(|v| v.into_iter().find(|p| (p.n, p.k) == (n, k)))
            .map(|p| p.t_star),
        "t_star_discrete": tb.predicted.t_star,
    }))
}

/// Runs `f` over `jobs` on at most `workers` threads; results keep job order.
pub fn run_pool<J: Sync, T: Send>(jobs: &[J], workers: usize, f: impl Fn(&J) -> T + Sync) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<T>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

fn experiment_limits(cfg: &RunConfig, exp: Option<Experiment>, bp: &BifurcationPoint) -> Limits {
    let default_max = exp.map_or(bp.t_star + 2.0, |e| e.t_limit(bp.t_star));
    Limits {
        t_min: cfg.t_min.unwrap_or(0.05),
        t_max: cfg.t_max.unwrap_or(default_max),
    }
}

fn trace_for(cfg: &RunConfig, label: (usize, usize), exp: Option<Experiment>) -> Result<TracedBranch, RunError> {
    let g = grid(cfg)?;
    let bp = discrete_point(cfg, label)?;
    let limits = experiment_limits(cfg, exp, &bp);
    let policy = ContinuationPolicy {
        keep_states: KeepStates::Ends,
        ..cfg.continuation.clone()
    };
    if cfg.model.hamiltonian.is_quadratic() {
        trace_quadratic(&cfg.model, g, &bp, cfg.eps, &policy, &cfg.directions.list(), limits)
    } else {
        let t_start = cfg.t.unwrap_or(2.0);
        trace_power_law(&cfg.model, g, &bp, cfg.eps, &policy, t_start, limits)
    }
}

fn manifest_base(cfg: &RunConfig) -> Value {
    let predicted = predict(cfg)
        .map(|rows| {
            rows.iter()
                .map(|r| {
                    json!({
                        "k": r.k,
                        "n": r.n,
                        "omega": r.omega,
                        "resonant": r.resonant,
                        "t_star_continuous": r.t_star_continuous,
                        "t_star_discrete": r.t_star_discrete,
                        "tau": r.tau,
                    })
                })
                .collect::<Vec<_>>()
        })
        .unwrap_or_default();
    json!({
        "experiment": cfg.experiment.map(|e| json!({"id": e.id(), "name": e.name()})),
        "grid": {"nx": cfg.nx, "nt": cfg.nt},
        "model": model_json(&cfg.model),
        "predicted": predicted,
        "eps": cfg.eps,
    })
}

fn finish_manifest(dir: &Path, mut manifest: Value, entries: Vec<Value>) -> Result<usize, RunError> {
    let failed = entries.iter().filter(|e| e["status"] != "ok").count();
    manifest["branches"] = Value::Array(entries);
    manifest["status"] = json!(if failed == 0 { "complete" } else { "FAILED" });
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(failed)
}

fn failed_entry(label: (usize, usize), err: &RunError) -> Value {
    json!({"label": [label.0, label.1], "status": "FAILED", "error": err.to_string()})
}

/// Seeds and follows one branch (default `(1, 1)`), writing its files and a
/// manifest.
pub fn continue_run(cfg: &RunConfig) -> Result<PathBuf, RunError> {
    let label = cfg.branch.unwrap_or((1, 1));
    let dir = out_dir(cfg)?;
    let manifest = manifest_base(cfg);
    let entry = match trace_for(cfg, label, cfg.experiment) {
        Ok(tb) => write_branch(&dir, &tb, &cfg.model)?,
        Err(e @ (RunError::Config(_) | RunError::Model(_))) => return Err(e),
        Err(e) => {
            finish_manifest(&dir, manifest, vec![failed_entry(label, &e)])?;
            return Err(e);
        }
    };
    finish_manifest(&dir, manifest, vec![entry])?;
    Ok(dir)
}

/// All default branches of a preset (or the configured one), traced on a
/// bounded worker pool.
pub fn experiment(cfg: &RunConfig) -> Result<PathBuf, RunError> {
    let exp = cfg
        .experiment
        .ok_or_else(|| ConfigError::Invalid("experiment id missing".into()))?;
    let labels = cfg.branch.map_or_else(|| exp.default_branches(), |b| vec![b]);
    let dir = out_dir(cfg)?;
    let manifest = manifest_base(cfg);
    let entries = run_pool(&labels, cfg.workers, |&label| {
        match trace_for(cfg, label, Some(exp)) {
            Ok(tb) => write_branch(&dir, &tb, &cfg.model)
                .unwrap_or_else(|e| failed_entry(label, &RunError::Io(e))),
            Err(e) => failed_entry(label, &e),
        }
    });
    let failed = finish_manifest(&dir, manifest, entries)?;
    if failed > 0 {
        return Err(RunError::Partial {
            failed,
            total: labels.len(),
        });
    }
    Ok(dir)
}
