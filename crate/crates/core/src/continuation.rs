//! Branch tracing in the horizon `T`: seeding from a predicted bifurcation
//! point, natural continuation with a secant predictor, and a
//! pseudo-arclength fallback that rounds turning points.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discretization::{
    assemble_jacobian, assemble_residual, mass_drift, residual_t_derivative, Field, Grid,
    SparseOperator, StateVector,
};
use crate::model::ModelSpec;
use crate::solver::{
    newton_solve, newton_with, FactorError, Factorization, LinearSolveFailure, NewtonOptions,
    SolveReport, SparseLu,
};
use crate::spectral::{local_guess, BifurcationPoint};

/// Number of cosine modes kept in [`BranchPoint::projection_coeffs`].
pub const PROJECTION_MODES: usize = 4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ContinuationError {
    #[error("no non-constant solution found within {tries} horizon increments past T* = {t_star}")]
    SeedFailure { t_star: f64, tries: usize },
    #[error("invalid continuation argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    IncreasingT,
    DecreasingT,
}

impl Direction {
    fn sign(self) -> f64 {
        match self {
            Direction::IncreasingT => 1.0,
            Direction::DecreasingT => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    /// The run reached its horizon bound.
    ReachedTmax,
    CollapsedToTrivial,
    StepUnderflow,
    /// `max_points` accepted points.
    PointBudget,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum KeepStates {
    All,
    /// First point, last point, and the points next to folds.
    Ends,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuationPolicy {
    pub initial_step: f64,
    pub min_step: f64,
    pub max_step: f64,
    pub growth: f64,
    /// Consecutive easy steps (at most `easy_iterations` Newton iterations)
    /// before the step grows.
    pub easy_steps: usize,
    pub easy_iterations: usize,
    /// `max_i ||m_i - 1||_inf` at or below this marks the constant state.
    pub collapse_threshold: f64,
    /// Secant slope `|dA/dT|` above which a failed corrector is read as a
    /// turning point.
    pub fold_slope: f64,
    /// Turning points are only looked for above this amplitude; below it a
    /// steep branch is the square-root approach to a bifurcation point.
    pub fold_min_amplitude: f64,
    /// Below this amplitude a decreasing branch is followed straight to its
    /// extrapolated collapse point.
    pub endpoint_amplitude: f64,
    pub allow_arclength: bool,
    pub max_arclength_step: f64,
    /// Horizon increment between seeding attempts.
    pub seed_step: f64,
    pub seed_tries: usize,
    /// Each seeding attempt also tries `eps * 2^i` for `i < seed_eps_levels`.
    pub seed_eps_levels: usize,
    /// Bound on the opposite side of the run, reached only after a fold.
    /// Defaults to the seed horizon for decreasing runs and to `T_limit / 100`
    /// for increasing ones.
    pub reverse_limit: Option<f64>,
    pub max_points: usize,
    pub keep_states: KeepStates,
    pub newton: NewtonOptions,
}

impl Default for ContinuationPolicy {
    fn default() -> Self {
        ContinuationPolicy {
            initial_step: 0.05,
            min_step: 1e-5,
            max_step: 0.1,
            growth: 1.5,
            easy_steps: 3,
            easy_iterations: 4,
            collapse_threshold: 1e-4,
            fold_slope: 2.0,
            fold_min_amplitude: 0.1,
            endpoint_amplitude: 0.01,
            allow_arclength: true,
            max_arclength_step: 0.1,
            seed_step: 0.005,
            seed_tries: 40,
            seed_eps_levels: 4,
            reverse_limit: None,
            max_points: 2000,
            keep_states: KeepStates::All,
            newton: NewtonOptions::default(),
        }
    }
}

impl ContinuationPolicy {
    pub fn validate(&self) -> Result<(), ContinuationError> {
        let ok = self.min_step > 0.0
            && self.min_step <= self.initial_step
            && self.initial_step <= self.max_step
            && self.growth >= 1.0
            && self.collapse_threshold > 0.0
            && self.seed_step > 0.0
            && self.max_points >= 2;
        if !ok {
            return Err(ContinuationError::InvalidArgument(format!(
                "inconsistent continuation policy: {self:?}"
            )));
        }
        self.newton
            .validate()
            .map_err(ContinuationError::InvalidArgument)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchPoint {
    pub t: f64,
    #[serde(skip)]
    pub state: Option<StateVector>,
    /// `||m_i - 1||_inf + 1`.
    pub sup_norm_m1: f64,
    pub sup_norm_m2: f64,
    /// `int cos(k pi x) (m_1(x, t_n) - 1) dx` for `k = 1..=4` at every time level.
    pub projection_coeffs: Vec<[f64; PROJECTION_MODES]>,
    pub newton_iters: usize,
    pub fold_flag: bool,
    pub mass_drift: f64,
    pub min_density: f64,
}

impl BranchPoint {
    pub fn from_state(state: StateVector, t: f64, report: &SolveReport) -> Self {
        BranchPoint {
            t,
            sup_norm_m1: state.density_deviation(0) + 1.0,
            sup_norm_m2: state.density_deviation(1) + 1.0,
            projection_coeffs: projection_coefficients(&state),
            newton_iters: report.iterations,
            fold_flag: false,
            mass_drift: mass_drift(&state),
            min_density: state.min_density(),
            state: Some(state),
        }
    }

    pub fn deviation(&self, pop: usize) -> f64 {
        [self.sup_norm_m1, self.sup_norm_m2][pop] - 1.0
    }

    /// `max_i ||m_i - 1||_inf`.
    pub fn amplitude(&self) -> f64 {
        self.deviation(0).max(self.deviation(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub label: (usize, usize),
    pub direction: Direction,
    pub points: Vec<BranchPoint>,
    pub folds: Vec<f64>,
    pub terminated_by: Termination,
    /// For collapsed runs: where the branch meets the constant state,
    /// extrapolated from the trailing points (see [`collapse_estimate`]).
    pub endpoint: Option<f64>,
}

impl Branch {
    pub fn last(&self) -> &BranchPoint {
        self.points.last().expect("a branch has at least its seed")
    }
}

/// Trapezoidal projections of `m_1 - 1` on `cos(k pi x)` for every time level.
pub fn projection_coefficients(state: &StateVector) -> Vec<[f64; PROJECTION_MODES]> {
    let g = state.grid();
    let w = g.weights();
    let basis: Vec<Vec<f64>> = (1..=PROJECTION_MODES)
        .map(|k| (0..g.np()).map(|j| (k as f64 * PI * g.x(j)).cos()).collect())
        .collect();
    (0..=g.nt)
        .map(|n| {
            let m = state.level(Field::M1, n);
            let mut c = [0.0; PROJECTION_MODES];
            for (k, b) in basis.iter().enumerate() {
                c[k] = m
                    .iter()
                    .zip(b)
                    .zip(&w)
                    .map(|((m, b), w)| (m - 1.0) * b * w)
                    .sum();
            }
            c
        })
        .collect()
}

/// Number of interior switches of a point on a `k = 1` branch: the number of
/// interior local extrema of the first projection coefficient in time, minus
/// one for the single rise to the first peak (the monotone approach after the
/// last extremum is not counted). Extrema are confirmed only by a reversal of
/// at least `1e-3 * max |coeff|`.
pub fn oscillation_count(point: &BranchPoint) -> usize {
    oscillation_count_mode(point, 1)
}

/// [`oscillation_count`] on the projection onto `cos(k pi x)`, for branches
/// of spatial mode `k <= PROJECTION_MODES`.
pub fn oscillation_count_mode(point: &BranchPoint, k: usize) -> usize {
    assert!((1..=PROJECTION_MODES).contains(&k), "mode {k} is not projected");
    let c: Vec<f64> = point.projection_coeffs.iter().map(|p| p[k - 1]).collect();
    count_extrema(&c).saturating_sub(1)
}

/// Projected mode `k` carrying most of the space-time energy of `m_1 - 1`,
/// or `None` when `m_1` is constant.
pub fn dominant_mode(point: &BranchPoint) -> Option<usize> {
    let energy: Vec<f64> = (0..PROJECTION_MODES)
        .map(|k| point.projection_coeffs.iter().map(|c| c[k] * c[k]).sum())
        .collect();
    let total: f64 = energy.iter().sum();
    if total < 1e-20 {
        return None;
    }
    let k = (0..PROJECTION_MODES)
        .max_by(|&a, &b| energy[a].total_cmp(&energy[b]))
        .unwrap_or(0);
    Some(k + 1)
}

/// Interior local extrema of a sequence, with a hysteresis floor of
/// `1e-3 * max |v|`.
pub fn count_extrema(v: &[f64]) -> usize {
    let scale = v.iter().fold(0.0, |a: f64, x| a.max(x.abs()));
    if scale == 0.0 || v.len() < 3 {
        return 0;
    }
    let floor = 1e-3 * scale;
    let mut dir = 0i8;
    let mut ext = v[0];
    let mut count = 0;
    for &x in &v[1..] {
        match dir {
            0 => {
                if x - ext > floor {
                    dir = 1;
                    ext = x;
                } else if ext - x > floor {
                    dir = -1;
                    ext = x;
                }
            }
            1 => {
                if x > ext {
                    ext = x;
                } else if ext - x > floor {
                    count += 1;
                    dir = -1;
                    ext = x;
                }
            }
            _ => {
                if x < ext {
                    ext = x;
                } else if x - ext > floor {
                    count += 1;
                    dir = 1;
                    ext = x;
                }
            }
        }
    }
    count
}

/// Normalized space-time correlation of `m_pop - 1` with
/// `cos(k pi x) sin(omega T t)`.
pub fn shape_correlation(state: &StateVector, pop: usize, k: usize, omega: f64, t: f64) -> f64 {
    let g = state.grid();
    let (mut dot, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for n in 0..=g.nt {
        let s = (omega * t * g.t(n)).sin();
        for (j, m) in state.level(Field::density(pop), n).iter().enumerate() {
            let b = (k as f64 * PI * g.x(j)).cos() * s;
            let a = m - 1.0;
            dot += a * b;
            aa += a * a;
            bb += b * b;
        }
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    dot / (aa * bb).sqrt()
}

/// Largest (least negative) spatial correlation of `m_1 - 1` and `m_2 - 1`
/// over the time levels where both deviations are non-negligible.
pub fn antiphase_correlation(state: &StateVector) -> f64 {
    let g = state.grid();
    let norms: Vec<(f64, f64)> = (0..=g.nt)
        .map(|n| {
            let n1 = state.level(Field::M1, n).iter().map(|m| (m - 1.0).powi(2)).sum::<f64>();
            let n2 = state.level(Field::M2, n).iter().map(|m| (m - 1.0).powi(2)).sum::<f64>();
            (n1.sqrt(), n2.sqrt())
        })
        .collect();
    let max1 = norms.iter().fold(0.0, |a: f64, p| a.max(p.0));
    let max2 = norms.iter().fold(0.0, |a: f64, p| a.max(p.1));
    let mut worst = -1.0f64;
    for (n, &(n1, n2)) in norms.iter().enumerate() {
        if n1 <= 1e-2 * max1 || n2 <= 1e-2 * max2 {
            continue;
        }
        let dot: f64 = state
            .level(Field::M1, n)
            .iter()
            .zip(state.level(Field::M2, n))
            .map(|(a, b)| (a - 1.0) * (b - 1.0))
            .sum();
        worst = worst.max(dot / (n1 * n2));
    }
    worst
}

fn density_inner(a: &StateVector, b: &StateVector) -> f64 {
    [Field::M1, Field::M2]
        .iter()
        .map(|&f| {
            a.field(f)
                .iter()
                .zip(b.field(f))
                .map(|(x, y)| (x - 1.0) * (y - 1.0))
                .sum::<f64>()
        })
        .sum()
}

/// First non-constant solution of mode `bp.k` near `bp`. Horizons
/// `T* + seed_step, T* - seed_step, T* + 2 seed_step, ...` are tried in turn
/// (branches may bend either way) until Newton from the local guess, with
/// amplitudes `eps, 2 eps, 4 eps, ...`, lands on a state above the collapse
/// threshold whose dominant spatial mode is `k`.
pub fn seed_branch(
    bp: &BifurcationPoint,
    eps: f64,
    model: &ModelSpec,
    grid: Grid,
    policy: &ContinuationPolicy,
) -> Result<BranchPoint, ContinuationError> {
    policy.validate()?;
    if !(eps.is_finite() && eps > 0.0) {
        return Err(ContinuationError::InvalidArgument(format!("eps = {eps}")));
    }
    let horizons = (1..=policy.seed_tries)
        .flat_map(|i| [1.0, -1.0].map(|s| bp.t_star + s * i as f64 * policy.seed_step))
        .filter(|&t| t > 0.0);
    for t in horizons {
        for level in 0..policy.seed_eps_levels.max(1) {
            let e = eps * f64::powi(2.0, level as i32);
            let guess = local_guess(bp, e, grid, t, model);
            let (state, rep) = newton_solve(&guess, t, model, &policy.newton);
            if rep.converged() {
                let p = BranchPoint::from_state(state, t, &rep);
                if p.amplitude() > policy.collapse_threshold
                    && (bp.k > PROJECTION_MODES || dominant_mode(&p).is_none_or(|m| m == bp.k))
                {
                    return Ok(p);
                }
            }
        }
    }
    Err(ContinuationError::SeedFailure {
        t_star: bp.t_star,
        tries: policy.seed_tries,
    })
}

// Weighted inner product on (unknowns, T): quadrature weight h dt on the
// fields so the state part approximates an L2 norm.
struct ArcMetric {
    theta: f64,
}

impl ArcMetric {
    fn dot(&self, a: &[f64], at: f64, b: &[f64], bt: f64) -> f64 {
        self.theta * a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() + at * bt
    }
}

/// Factorization of the bordered matrix `[[J, c], [r^T, d]]` by block
/// elimination on an LU of `J`: a dense border row would ruin the sparse
/// ordering.
struct Bordered {
    lu: SparseLu,
    /// `J^{-1} c`
    jc: Vec<f64>,
    row: Vec<f64>,
    schur: f64,
}

impl Bordered {
    fn new(j: SparseOperator, col: &[f64], row: Vec<f64>, corner: f64, tol: f64) -> Result<Self, FactorError> {
        let lu = SparseLu::factor(j).map_err(|_| FactorError::Singular)?;
        let jc = lu.solve(col, tol).map_err(|_| FactorError::Singular)?;
        let schur = corner - dot(&row, &jc);
        let scale = corner.abs() + row.iter().zip(&jc).map(|(r, c)| (r * c).abs()).sum::<f64>();
        if !(schur.abs() > 1e-14 * scale) {
            return Err(FactorError::Singular);
        }
        Ok(Bordered { lu, jc, row, schur })
    }
}

impl Factorization for Bordered {
    fn solve(&self, b: &[f64], rel_tol: f64) -> Result<Vec<f64>, LinearSolveFailure> {
        let n = self.jc.len();
        let mut x = self.lu.solve(&b[..n], rel_tol)?;
        let last = (b[n] - dot(&self.row, &x)) / self.schur;
        for (xi, c) in x.iter_mut().zip(&self.jc) {
            *xi -= c * last;
        }
        x.push(last);
        Ok(x)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Tracer<'a> {
    model: &'a ModelSpec,
    policy: &'a ContinuationPolicy,
    template: StateVector,
    lo: f64,
    hi: f64,
}

enum Step {
    Accepted(BranchPoint),
    Collapsed,
    Failed,
}

impl Tracer<'_> {
    fn state_of(&self, x: &[f64]) -> StateVector {
        let mut s = self.template.clone();
        s.set_unknowns(x);
        s
    }

    fn classify(&self, state: StateVector, t: f64, rep: &SolveReport, reference: &StateVector) -> Step {
        if !rep.converged() {
            return Step::Failed;
        }
        let p = BranchPoint::from_state(state, t, rep);
        if p.amplitude() <= self.policy.collapse_threshold {
            return Step::Collapsed;
        }
        // Landing on the mirror image of the branch is a jump, not progress.
        if density_inner(p.state.as_ref().unwrap(), reference) <= 0.0 {
            return Step::Failed;
        }
        Step::Accepted(p)
    }

    fn natural(&self, prev: Option<&BranchPoint>, last: &BranchPoint, t_new: f64) -> Step {
        let ls = last.state.as_ref().unwrap();
        let guess = match prev.and_then(|p| p.state.as_ref().map(|s| (p.t, s))) {
            Some((tp, ps)) if tp != last.t => {
                let c = (t_new - last.t) / (last.t - tp);
                let (a, b) = (ls.unknowns(), ps.unknowns());
                let x: Vec<f64> = a.iter().zip(&b).map(|(a, b)| a + c * (a - b)).collect();
                self.state_of(&x)
            }
            _ => ls.clone(),
        };
        let (state, rep) = newton_solve(&guess, t_new, self.model, &self.policy.newton);
        self.classify(state, t_new, &rep, ls)
    }

    fn arclength(
        &self,
        metric: &ArcMetric,
        last: &BranchPoint,
        tangent: &(Vec<f64>, f64),
        ds: f64,
    ) -> Step {
        let ls = last.state.as_ref().unwrap();
        let x0 = ls.unknowns();
        let n = x0.len();
        let mut y: Vec<f64> = x0.iter().zip(&tangent.0).map(|(a, d)| a + ds * d).collect();
        y.push(last.t + ds * tangent.1);
        let residual = |y: &[f64]| -> Option<Vec<f64>> {
            let t = y[n];
            if !(t > 0.0) {
                return None;
            }
            let mut r = assemble_residual(&self.state_of(&y[..n]), t, self.model).ok()?;
            let dx: Vec<f64> = y[..n].iter().zip(&x0).map(|(a, b)| a - b).collect();
            r.push(metric.dot(&dx, t - last.t, &tangent.0, tangent.1) - ds);
            Some(r)
        };
        let opts = &self.policy.newton;
        let factor = |y: &[f64]| -> Result<Bordered, FactorError> {
            let t = y[n];
            let s = self.state_of(&y[..n]);
            let j = assemble_jacobian(&s, t, self.model).map_err(|_| FactorError::Domain)?;
            let ft = residual_t_derivative(&s, t).map_err(|_| FactorError::Domain)?;
            let row: Vec<f64> = tangent.0.iter().map(|v| metric.theta * v).collect();
            Bordered::new(j, &ft, row, tangent.1, opts.linear_tol)
        };
        let (y, rep) = newton_with(y, residual, factor, opts);
        let t = y[n];
        self.classify(self.state_of(&y[..n]), t, &rep, ls)
    }

    fn out_of_range(&self, t: f64) -> bool {
        t >= self.hi - 1e-12 || t <= self.lo + 1e-12
    }
}

fn secant(metric: &ArcMetric, a: &BranchPoint, b: &BranchPoint) -> (Vec<f64>, f64) {
    let (xa, xb) = (a.state.as_ref().unwrap().unknowns(), b.state.as_ref().unwrap().unknowns());
    let dx: Vec<f64> = xb.iter().zip(&xa).map(|(b, a)| b - a).collect();
    let dt = b.t - a.t;
    let norm = metric.dot(&dx, dt, &dx, dt).sqrt();
    (dx.iter().map(|v| v / norm).collect(), dt / norm)
}

/// Follows a branch from `seed` in `direction` until `t_limit`, a collapse
/// onto the constant state, step underflow, or the point budget.
///
/// Natural continuation in `T` with a secant predictor; failed correctors
/// halve the step, runs of easy steps grow it. When the corrector fails on a
/// steep stretch of large amplitude the run switches to pseudo-arclength
/// steps for good and records every reversal of `T` as a fold.
pub fn continue_branch(
    seed: &BranchPoint,
    label: (usize, usize),
    direction: Direction,
    t_limit: f64,
    model: &ModelSpec,
    policy: &ContinuationPolicy,
) -> Result<Branch, ContinuationError> {
    policy.validate()?;
    let template = seed
        .state
        .clone()
        .ok_or_else(|| ContinuationError::InvalidArgument("seed has no state".into()))?;
    let ahead = direction.sign() * (t_limit - seed.t);
    if !(t_limit > 0.0) || !(ahead > 0.0) {
        return Err(ContinuationError::InvalidArgument(format!(
            "T_limit = {t_limit} does not lie {direction:?} of the seed at T = {}",
            seed.t
        )));
    }
    let reverse = policy.reverse_limit.unwrap_or(match direction {
        Direction::IncreasingT => t_limit / 100.0,
        Direction::DecreasingT => seed.t,
    });
    let (lo, hi) = match direction {
        Direction::IncreasingT => (reverse.min(seed.t), t_limit),
        Direction::DecreasingT => (t_limit, reverse.max(seed.t)),
    };
    let grid = template.grid();
    let tracer = Tracer {
        model,
        policy,
        template,
        lo,
        hi,
    };
    let metric = ArcMetric {
        theta: grid.h() * grid.dt(),
    };

    let mut points = vec![seed.clone()];
    let mut folds = Vec::new();
    let mut step = policy.initial_step;
    let mut easy = 0usize;
    let mut arc: Option<f64> = None;
    let mut collapse_seen = false;
    let sign = direction.sign();

    let termination = loop {
        if points.len() >= policy.max_points {
            break Termination::PointBudget;
        }
        let last = points.last().unwrap();
        let prev = points.len().checked_sub(2).map(|i| &points[i]);

        if let Some(ds) = arc {
            if tracer.out_of_range(last.t) && points.len() > 1 {
                break Termination::ReachedTmax;
            }
            let tangent = secant(&metric, prev.unwrap(), last);
            match tracer.arclength(&metric, last, &tangent, ds) {
                Step::Accepted(p) => {
                    let iters = p.newton_iters;
                    let dir_before = last.t - prev.unwrap().t;
                    let dir_now = p.t - last.t;
                    if dir_before * dir_now < 0.0 {
                        let i = points.len() - 1;
                        points[i].fold_flag = true;
                        folds.push(points[i].t);
                    }
                    points.push(p);
                    let mut ds_new = ds;
                    if iters <= policy.easy_iterations {
                        easy += 1;
                        if easy >= policy.easy_steps {
                            ds_new = (ds * policy.growth).min(policy.max_arclength_step);
                            easy = 0;
                        }
                    } else {
                        easy = 0;
                    }
                    arc = Some(ds_new);
                }
                Step::Collapsed => break Termination::CollapsedToTrivial,
                Step::Failed => {
                    easy = 0;
                    let ds_new = 0.5 * ds;
                    if ds_new < policy.min_step {
                        break Termination::StepUnderflow;
                    }
                    arc = Some(ds_new);
                }
            }
            continue;
        }

        if tracer.out_of_range(last.t) && points.len() > 1 {
            break Termination::ReachedTmax;
        }
        // Near a collapse the amplitude follows a square-root law; steps are
        // capped by its extrapolated zero, and once the amplitude is small a
        // single trial past the zero confirms the collapse.
        let mut trial = step;
        let mut confirming = false;
        if let Some(te) = extrapolated_zero(&points) {
            let dist = (te - last.t).abs();
            if last.amplitude() < policy.endpoint_amplitude {
                trial = 2.0 * dist.max(policy.min_step);
                confirming = true;
            } else {
                trial = trial.min(0.75 * dist).max(policy.min_step);
            }
        }
        let t_new = (last.t + sign * trial).clamp(lo, hi);
        let outcome = tracer.natural(prev, last, t_new);
        if confirming && matches!(outcome, Step::Collapsed) {
            break Termination::CollapsedToTrivial;
        }
        match outcome {
            Step::Accepted(p) => {
                collapse_seen = false;
                let iters = p.newton_iters;
                points.push(p);
                if iters <= policy.easy_iterations {
                    easy += 1;
                    if easy >= policy.easy_steps {
                        step = (step * policy.growth).min(policy.max_step);
                        easy = 0;
                    }
                } else {
                    easy = 0;
                }
            }
            outcome => {
                easy = 0;
                collapse_seen |= matches!(outcome, Step::Collapsed);
                // Past a turning point there is no nearby solution, so the
                // corrector fails or drops to the constant state. A large,
                // steep branch reads as a fold rather than a collapse.
                if policy.allow_arclength {
                    if let Some(p) = prev {
                        let slope = (last.amplitude() - p.amplitude()).abs() / (last.t - p.t).abs();
                        if slope > policy.fold_slope && last.amplitude() > policy.fold_min_amplitude {
                            let tangent = secant(&metric, p, last);
                            let ds = (step * tangent.1.abs().recip()).min(policy.max_arclength_step)
                                * 0.5;
                            arc = Some(ds.max(policy.min_step));
                            continue;
                        }
                    }
                }
                step = 0.5 * trial;
                if step < policy.min_step {
                    break if collapse_seen {
                        Termination::CollapsedToTrivial
                    } else {
                        Termination::StepUnderflow
                    };
                }
            }
        }
    };

    let endpoint = (termination == Termination::CollapsedToTrivial)
        .then(|| collapse_estimate(&points))
        .flatten();
    if policy.keep_states == KeepStates::Ends {
        let n = points.len();
        for i in 1..n.saturating_sub(1) {
            let near_fold = points[i].fold_flag
                || points.get(i + 1).is_some_and(|p| p.fold_flag)
                || points[i - 1].fold_flag;
            if !near_fold {
                points[i].state = None;
            }
        }
    }
    Ok(Branch {
        label,
        direction,
        points,
        folds,
        terminated_by: termination,
        endpoint,
    })
}

/// Transfers a branch point to another grid by bilinear resampling and a
/// Newton solve at the same horizon. `None` if Newton fails or lands on the
/// constant state.
pub fn refine_point(
    point: &BranchPoint,
    grid: Grid,
    model: &ModelSpec,
    policy: &ContinuationPolicy,
) -> Option<BranchPoint> {
    let coarse = point.state.as_ref()?;
    let (state, rep) = newton_solve(&coarse.resample(grid), point.t, model, &policy.newton);
    if !rep.converged() {
        return None;
    }
    let p = BranchPoint::from_state(state, point.t, &rep);
    (p.amplitude() > policy.collapse_threshold).then_some(p)
}

/// Carries a solution of `models[0]` at horizon `t` over to the last model of
/// the sequence, solving each intermediate model from the previous solution.
/// Returns the final point, or `None` when a stage fails or collapses.
pub fn homotopy(
    start: &StateVector,
    t: f64,
    models: &[ModelSpec],
    policy: &ContinuationPolicy,
) -> Option<BranchPoint> {
    let mut state = start.clone();
    let mut last = None;
    for model in models {
        let (next, rep) = newton_solve(&state, t, model, &policy.newton);
        if !rep.converged() {
            return None;
        }
        let p = BranchPoint::from_state(next.clone(), t, &rep);
        if p.amplitude() <= policy.collapse_threshold {
            return None;
        }
        state = next;
        last = Some(p);
    }
    last
}

/// Horizon where the amplitude of the last two points extrapolates to zero,
/// assuming `amplitude^2` is linear in `T` near a symmetric bifurcation.
/// Falls back to the last point when the extrapolation is not sensible.
pub fn collapse_estimate(points: &[BranchPoint]) -> Option<f64> {
    let last = points.last()?;
    Some(extrapolated_zero(points).unwrap_or(last.t))
}

/// Horizon where the amplitude of the trailing points extrapolates to zero,
/// if the amplitude is decreasing and the zero lies ahead of the last point
/// within ten times the last spacing.
///
/// With three points `T` is interpolated as a quadratic in the amplitude,
/// which covers both the square-root law `T - T0 ~ A^2` of a smooth symmetric
/// bifurcation and the linear law `T - T0 ~ A` that the upwind scheme shows
/// once `A` is of the order of the mesh size. With two points the
/// square-root law is assumed.
fn extrapolated_zero(points: &[BranchPoint]) -> Option<f64> {
    let n = points.len();
    if n < 2 {
        return None;
    }
    let (prev, last) = (&points[n - 2], &points[n - 1]);
    let dt = last.t - prev.t;
    if !(last.amplitude() < prev.amplitude()) || dt == 0.0 {
        return None;
    }
    let three = (n >= 3).then(|| &points[n - 3]).filter(|p| {
        p.amplitude() > prev.amplitude() && (prev.t - p.t) * dt > 0.0
    });
    let t0 = match three {
        Some(first) => {
            let (a, t): (Vec<f64>, Vec<f64>) = [first, prev, last]
                .iter()
                .map(|p| (p.amplitude(), p.t))
                .unzip();
            // Lagrange interpolation evaluated at A = 0.
            (0..3)
                .map(|i| {
                    let w: f64 = (0..3)
                        .filter(|&j| j != i)
                        .map(|j| a[j] / (a[j] - a[i]))
                        .product();
                    w * t[i]
                })
                .sum()
        }
        None => {
            let (a2, b2) = (prev.amplitude().powi(2), last.amplitude().powi(2));
            last.t + b2 * dt / (a2 - b2)
        }
    };
    let ahead = (t0 - last.t) * dt >= 0.0;
    (ahead && (t0 - last.t).abs() <= 10.0 * dt.abs()).then_some(t0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point_with(coeffs: Vec<f64>) -> BranchPoint {
        BranchPoint {
            t: 1.0,
            state: None,
            sup_norm_m1: 1.0,
            sup_norm_m2: 1.0,
            projection_coeffs: coeffs.into_iter().map(|c| [c, 0.0, 0.0, 0.0]).collect(),
            newton_iters: 0,
            fold_flag: false,
            mass_drift: 0.0,
            min_density: 1.0,
        }
    }

    fn sine_profile(n: usize, levels: usize) -> Vec<f64> {
        let theta = n as f64 * PI - 0.25 * PI;
        (0..=levels)
            .map(|i| (theta * i as f64 / levels as f64).sin())
            .collect()
    }

    #[test]
    fn oscillation_count_follows_mode_number() {
        for n in 1..=4 {
            assert_eq!(oscillation_count(&point_with(sine_profile(n, 200))), n - 1);
        }
        assert_eq!(oscillation_count(&point_with(vec![0.0; 50])), 0);
    }

    #[test]
    fn small_wiggles_are_ignored() {
        let mut v = sine_profile(2, 400);
        for (i, x) in v.iter_mut().enumerate() {
            *x += 1e-5 * if i % 2 == 0 { 1.0 } else { -1.0 };
        }
        assert_eq!(oscillation_count(&point_with(v)), 1);
    }

    #[test]
    fn collapse_estimate_extrapolates_square_root_law() {
        let mk = |t: f64| {
            let mut p = point_with(vec![0.0]);
            p.t = t;
            p.sup_norm_m1 = 1.0 + (3.0 * (t - 0.7)).sqrt();
            p
        };
        let pts = vec![mk(0.75), mk(0.72)];
        assert!((collapse_estimate(&pts).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn collapse_estimate_handles_linear_law_with_three_points() {
        let mk = |a: f64| {
            let mut p = point_with(vec![0.0]);
            p.t = 0.7 + 0.3 * a + 2.0 * a * a;
            p.sup_norm_m1 = 1.0 + a;
            p
        };
        let pts = vec![mk(0.04), mk(0.02), mk(0.01)];
        assert!((collapse_estimate(&pts).unwrap() - 0.7).abs() < 1e-12);
        // Amplitude growing: no extrapolation, the last point stands.
        let rising = vec![mk(0.01), mk(0.02)];
        assert_eq!(collapse_estimate(&rising), Some(rising[1].t));
    }

    #[test]
    fn bordered_solve_matches_dense_elimination() {
        // J = [[2,1],[0,3]], c = (1,2), r = (4,5), d = 6.
        let j = SparseOperator {
            n: 2,
            row_ptr: vec![0, 2, 3],
            col_idx: vec![0, 1, 1],
            values: vec![2.0, 1.0, 3.0],
        };
        let b = Bordered::new(j, &[1.0, 2.0], vec![4.0, 5.0], 6.0, 1e-14).unwrap();
        let x = b.solve(&[1.0, 2.0, 3.0], 1e-14).unwrap();
        let full = [[2.0, 1.0, 1.0], [0.0, 3.0, 2.0], [4.0, 5.0, 6.0]];
        for (row, rhs) in full.iter().zip([1.0, 2.0, 3.0]) {
            let ax: f64 = row.iter().zip(&x).map(|(a, x)| a * x).sum();
            assert!((ax - rhs).abs() < 1e-13);
        }
    }
}
