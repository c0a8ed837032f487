//! Neumann eigenpairs, bifurcation-time prediction from the linearized
//! system, the local branch shape, and an ODE oracle for cross-checks.
//!
//! Projecting the linearization at the constant state onto `cos(k pi x)` and
//! onto the eigenvector of `a1` leaves the scalar problem
//!
//! ```text
//! h'' = T^2 lambda (sigma^2 lambda + a1) h,   h(0) = 0,   h'(1) + sigma T lambda h(1) = 0
//! ```
//!
//! which has the non-zero solution `sin(omega T t)`, with
//! `omega^2 = lambda (-a1 - sigma^2 lambda)`, exactly when
//! `tan(omega T) = -(1/sigma) sqrt((-a1 - sigma^2 lambda) / lambda)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discretization::{Field, Grid, StateVector};
use crate::model::{ModelSpec, TrivialJacobian};

/// Fixed step count of the fourth-order integrators below (step `1e-4`).
pub const ORACLE_STEPS: usize = 10_000;

/// Two predicted times closer than this are flagged as resonant.
pub const RESONANCE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpectralError {
    #[error("mode k = {k} is out of range for a grid with {nx} intervals")]
    ModeOutOfRange { k: usize, nx: usize },
    #[error("sigma^2 lambda = {scaled} is outside (0, -a1) = (0, {bound}): no kernel for this mode")]
    OutOfBand { scaled: f64, bound: f64 },
    #[error("a1 = {0} is not negative: the constant state has no bifurcation points")]
    NoNegativeEigenvalue(f64),
    #[error("linear boundary value problem could not be solved")]
    BvpSolveFailure,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Which Neumann spectrum to use: the exact one or the one of the 3-point
/// Laplacian on a grid with `nx` intervals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EigenMode {
    Continuous,
    Discrete { nx: usize },
}

/// `k`-th eigenvalue of `-d^2/dx^2` on `(0,1)` with Neumann conditions,
/// eigenfunction `cos(k pi x)`.
pub fn neumann_eigenvalue(k: usize, mode: EigenMode) -> Result<f64, SpectralError> {
    match mode {
        EigenMode::Continuous => {
            let kp = k as f64 * PI;
            Ok(kp * kp)
        }
        EigenMode::Discrete { nx } => {
            if nx < 2 || k > nx {
                return Err(SpectralError::ModeOutOfRange { k, nx });
            }
            let h = 1.0 / nx as f64;
            // 2(1 - cos(x))/h^2 written without cancellation
            let s = (0.5 * k as f64 * PI * h).sin();
            Ok(4.0 * s * s / (h * h))
        }
    }
}

fn band_check(lambda: f64, a1: f64, sigma: f64) -> Result<(), SpectralError> {
    let scaled = sigma * sigma * lambda;
    if !(scaled > 0.0 && scaled < -a1) {
        return Err(SpectralError::OutOfBand { scaled, bound: -a1 });
    }
    Ok(())
}

/// Temporal frequency `sqrt(lambda (-a1 - sigma^2 lambda))` of the kernel mode.
pub fn kernel_frequency(lambda: f64, a1: f64, sigma: f64) -> Result<f64, SpectralError> {
    band_check(lambda, a1, sigma)?;
    Ok((lambda * (-a1 - sigma * sigma * lambda)).sqrt())
}

/// `arctan((1/sigma) sqrt((-a1 - sigma^2 lambda) / lambda))`, in `(0, pi/2)`.
pub fn kernel_phase(lambda: f64, a1: f64, sigma: f64) -> Result<f64, SpectralError> {
    band_check(lambda, a1, sigma)?;
    Ok((((-a1 - sigma * sigma * lambda) / lambda).sqrt() / sigma).atan())
}

/// Residual of the kernel condition at horizon `t`.
///
/// With `theta = omega t` and `phi = kernel_phase`, the condition
/// `tan(theta) + tan(phi) = 0` is evaluated as `sin(theta + phi)`, which has
/// the same zeros and no poles.
pub fn kernel_residual(t: f64, lambda: f64, a1: f64, sigma: f64) -> Result<f64, SpectralError> {
    let omega = kernel_frequency(lambda, a1, sigma)?;
    let phi = kernel_phase(lambda, a1, sigma)?;
    Ok((omega * t + phi).sin())
}

/// A predicted bifurcation point `T*_{n,k}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BifurcationPoint {
    pub n: usize,
    pub k: usize,
    pub lambda: f64,
    pub t_star: f64,
    pub omega: f64,
    /// `2 pi / omega`.
    pub tau: f64,
    /// `n - 2 T* / tau`, in `(0, 1/2)`.
    pub delta: f64,
    /// Eigenvector of `a1`, the direction of the density perturbation.
    pub direction: [f64; 2],
    pub resonant: bool,
}

/// All `T*_{n,k}` for `1 <= n <= n_max`, `1 <= k <= k_max` with `sigma^2 lambda_k`
/// inside `(0, -a1)`, sorted by `T*`.
pub fn bifurcation_times(
    tj: &TrivialJacobian,
    sigma: f64,
    mode: EigenMode,
    n_max: usize,
    k_max: usize,
) -> Result<Vec<BifurcationPoint>, SpectralError> {
    let a1 = tj.a1();
    if a1.is_nan() || a1 >= 0.0 {
        return Err(SpectralError::NoNegativeEigenvalue(a1));
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(SpectralError::InvalidArgument(format!("sigma = {sigma}")));
    }
    let k_top = match mode {
        EigenMode::Continuous => k_max,
        EigenMode::Discrete { nx } => k_max.min(nx),
    };
    let mut points = Vec::new();
    for k in 1..=k_top {
        let lambda = neumann_eigenvalue(k, mode)?;
        if sigma * sigma * lambda >= -a1 {
            // The band is an interval in lambda and the spectrum is increasing.
            break;
        }
        let omega = kernel_frequency(lambda, a1, sigma)?;
        let phi = kernel_phase(lambda, a1, sigma)?;
        for n in 1..=n_max {
            let t_star = (n as f64 * PI - phi) / omega;
            points.push(BifurcationPoint {
                n,
                k,
                lambda,
                t_star,
                omega,
                tau: 2.0 * PI / omega,
                delta: phi / PI,
                direction: tj.direction(),
                resonant: false,
            });
        }
    }
    points.sort_by(|p, q| p.t_star.total_cmp(&q.t_star).then(p.k.cmp(&q.k)));
    flag_resonances(&mut points);
    Ok(points)
}

/// Marks points of a sorted list whose times coincide within [`RESONANCE_TOL`].
pub fn flag_resonances(points: &mut [BifurcationPoint]) {
    for i in 1..points.len() {
        if (points[i].t_star - points[i - 1].t_star).abs() <= RESONANCE_TOL {
            points[i].resonant = true;
            points[i - 1].resonant = true;
        }
    }
}

/// First-order branch shape at `t`:
/// `m = (1,1) + eps cos(k pi x) direction sin(omega t s)`.
///
/// The value functions get the matching kernel perturbation
/// `v_i = -eps d_i (omega cos(omega t s) + sigma lambda sin(omega t s)) / (kappa_i lambda)`
/// on top of the constant-state value; without it Newton on the full system
/// is pulled straight back to the constant state.
pub fn local_guess(
    bp: &BifurcationPoint,
    eps: f64,
    grid: Grid,
    t: f64,
    model: &ModelSpec,
) -> StateVector {
    let mut state = StateVector::trivial(grid, t, model);
    if eps == 0.0 {
        return state;
    }
    let kappa = model.hamiltonian.curvature_at_zero().unwrap_or([0.0, 0.0]);
    let space: Vec<f64> = (0..grid.np())
        .map(|j| (bp.k as f64 * PI * grid.x(j)).cos())
        .collect();
    for n in 0..=grid.nt {
        let arg = bp.omega * t * grid.t(n);
        let (s, c) = arg.sin_cos();
        for pop in 0..2 {
            let amp = eps * bp.direction[pop] * s;
            for (v, x) in state.level_mut(Field::density(pop), n).iter_mut().zip(&space) {
                *v = 1.0 + amp * x;
            }
            if n < grid.nt && kappa[pop] > 0.0 {
                let vamp = -eps * bp.direction[pop] * (bp.omega * c + model.sigma * bp.lambda * s)
                    / (kappa[pop] * bp.lambda);
                for (v, x) in state.level_mut(Field::value(pop), n).iter_mut().zip(&space) {
                    *v += vamp * x;
                }
            }
        }
    }
    state
}

fn rk4<const D: usize>(
    mut y: [f64; D],
    steps: usize,
    rhs: impl Fn(f64, &[f64; D]) -> [f64; D],
) -> [f64; D] {
    let dt = 1.0 / steps as f64;
    let axpy = |y: &[f64; D], k: &[f64; D], c: f64| {
        let mut o = *y;
        for i in 0..D {
            o[i] += c * k[i];
        }
        o
    };
    for s in 0..steps {
        let t = s as f64 * dt;
        let k1 = rhs(t, &y);
        let k2 = rhs(t + 0.5 * dt, &axpy(&y, &k1, 0.5 * dt));
        let k3 = rhs(t + 0.5 * dt, &axpy(&y, &k2, 0.5 * dt));
        let k4 = rhs(t + dt, &axpy(&y, &k3, dt));
        for i in 0..D {
            y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    y
}

/// Robin boundary value `h'(1) + sigma T lambda h(1)` of the solution of
/// `h'' = T^2 lambda (sigma^2 lambda + a1) h`, `h(0) = 0`, `h'(0) = 1`,
/// integrated numerically. Its zeros in `T` are the kernel points.
pub fn linearized_bvp_oracle(t: f64, lambda: f64, a1: f64, sigma: f64) -> f64 {
    let c = t * t * lambda * (sigma * sigma * lambda + a1);
    let y = rk4([0.0, 1.0], ORACLE_STEPS, |_, y| [y[1], c * y[0]]);
    y[1] + sigma * t * lambda * y[0]
}

/// Both sides of the transversality identity at a kernel point:
/// `lhs = -T*^2 a1 int_0^1 w(t) sin(omega T* t) dt`, where `w` solves
///
/// ```text
/// -w'' = 2 T lambda (sigma^2 lambda + a1) eta - sigma^2 T^2 lambda^2 w,
/// w(0) = 0,  w'(1) + sigma T lambda w(1) = sigma lambda eta(1),  eta = sin(omega T t),
/// ```
///
/// and `rhs = T* (sigma^2 lambda + a1)`. A negative `rhs` equal to `lhs`
/// means the derivative of the linearization in `T` leaves its range.
pub fn transversality_check(
    bp: &BifurcationPoint,
    a1: f64,
    sigma: f64,
) -> Result<(f64, f64), SpectralError> {
    let (t, lambda) = (bp.t_star, bp.lambda);
    band_check(lambda, a1, sigma)?;
    let rho = sigma * sigma * lambda + a1;
    let beta = sigma * t * lambda;
    let wt = bp.omega * t;
    let eta = |s: f64| (wt * s).sin();
    // particular solution (w, w') from zero data, homogeneous (y, y') from
    // y'(0) = 1, and their moments against eta
    let end = rk4([0.0, 0.0, 0.0, 1.0, 0.0, 0.0], ORACLE_STEPS, |s, v| {
        let e = eta(s);
        [
            v[1],
            beta * beta * v[0] - 2.0 * t * lambda * rho * e,
            v[3],
            beta * beta * v[2],
            v[0] * e,
            v[2] * e,
        ]
    });
    let robin_p = end[1] + beta * end[0];
    let robin_h = end[3] + beta * end[2];
    if !robin_h.is_finite() || robin_h.abs() < 1e-300 || !robin_p.is_finite() {
        return Err(SpectralError::BvpSolveFailure);
    }
    let c = (sigma * lambda * eta(1.0) - robin_p) / robin_h;
    let moment = end[4] + c * end[5];
    let lhs = -t * t * a1 * moment;
    if !lhs.is_finite() {
        return Err(SpectralError::BvpSolveFailure);
    }
    Ok((lhs, t * rho))
}
