//! Running costs, numerical Hamiltonians and the linearization of the
//! coupling at the constant state `(m1, m2) = (1, 1)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Row-major 2x2 matrix, `m[row][col]`.
pub type Mat2 = [[f64; 2]; 2];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("non-finite input: {0}")]
    NonFiniteInput(&'static str),
    #[error("Schelling coupling is undefined where m1 + m2 = 0")]
    SchellingZeroTotal,
    #[error("coupling Jacobian at (1,1) has complex eigenvalues")]
    ComplexEigenvalues,
    #[error("coupling Jacobian at (1,1) is defective (not diagonalizable)")]
    DefectiveMatrix,
    #[error("Hamiltonian is not twice differentiable at p = 0 (power-law exponent {0} < 2)")]
    NonSmoothHamiltonian(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Running-cost family `V(m1, m2) = (V1, V2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum CouplingSpec {
    /// `V1 = -a g(m1)`, `V2 = 0`, with `g(m) = m` on `[0, saturation]` and a
    /// bounded exponential cap beyond it.
    LinearAggregation { a: f64, saturation: f64 },
    /// `Vi = K_i (m_i / (m1 + m2) - alpha_i)^-`, the negative part being
    /// replaced by a C^1 quadratic spline on `(-eta, eta)`.
    Schelling { k: [f64; 2], alpha: [f64; 2], eta: f64 },
    /// `V(m) = A (m - 1)`.
    ExplicitLinear { matrix: Mat2 },
}

pub const DEFAULT_SATURATION: f64 = 10.0;
pub const DEFAULT_SCHELLING_ETA: f64 = 1e-3;

impl CouplingSpec {
    pub fn aggregation(a: f64) -> Self {
        CouplingSpec::LinearAggregation {
            a,
            saturation: DEFAULT_SATURATION,
        }
    }

    pub fn schelling(k: [f64; 2], alpha: [f64; 2]) -> Self {
        CouplingSpec::Schelling {
            k,
            alpha,
            eta: DEFAULT_SCHELLING_ETA,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidParameter(msg));
        match *self {
            CouplingSpec::LinearAggregation { a, saturation } => {
                if !(a.is_finite() && a > 0.0) {
                    return bad(format!("aggregation strength a = {a} must be > 0"));
                }
                if !(saturation.is_finite() && saturation > 1.0) {
                    return bad(format!("saturation level M = {saturation} must be > 1"));
                }
            }
            CouplingSpec::Schelling { k, alpha, eta } => {
                for i in 0..2 {
                    if !(k[i].is_finite() && k[i] > 0.0) {
                        return bad(format!("K{} = {} must be > 0", i + 1, k[i]));
                    }
                    if !(0.0..=1.0).contains(&alpha[i]) {
                        return bad(format!("alpha{} = {} must lie in [0,1]", i + 1, alpha[i]));
                    }
                }
                if !(eta.is_finite() && (0.0..0.5).contains(&eta)) {
                    return bad(format!("smoothing half-width eta = {eta} must lie in [0, 0.5)"));
                }
            }
            CouplingSpec::ExplicitLinear { matrix } => {
                if matrix.iter().flatten().any(|v| !v.is_finite()) {
                    return bad("coupling matrix has non-finite entries".into());
                }
            }
        }
        Ok(())
    }

    /// Running costs `(V1, V2)` at `(m1, m2)`.
    pub fn eval(&self, m1: f64, m2: f64) -> Result<[f64; 2], ModelError> {
        self.check_point(m1, m2)?;
        Ok(self.eval_with_jacobian(m1, m2).0)
    }

    /// `J[i][j] = dV_i / dm_j` at `(m1, m2)`. Inside the Schelling smoothing
    /// band this is the derivative of the smoothed coupling.
    pub fn jacobian(&self, m1: f64, m2: f64) -> Result<Mat2, ModelError> {
        self.check_point(m1, m2)?;
        Ok(self.eval_with_jacobian(m1, m2).1)
    }

    fn check_point(&self, m1: f64, m2: f64) -> Result<(), ModelError> {
        if !m1.is_finite() || !m2.is_finite() {
            return Err(ModelError::NonFiniteInput("density"));
        }
        if let CouplingSpec::Schelling { .. } = self {
            if m1 + m2 == 0.0 {
                return Err(ModelError::SchellingZeroTotal);
            }
        }
        Ok(())
    }

    /// Values and Jacobian in one pass, without input checks. Non-finite
    /// results propagate as NaN, which the residual assembly reports.
    pub(crate) fn eval_with_jacobian(&self, m1: f64, m2: f64) -> ([f64; 2], Mat2) {
        match *self {
            CouplingSpec::LinearAggregation { a, saturation } => {
                let (g, dg) = saturate(m1, saturation);
                ([-a * g, 0.0], [[-a * dg, 0.0], [0.0, 0.0]])
            }
            CouplingSpec::Schelling { k, alpha, eta } => {
                let total = m1 + m2;
                let inv2 = 1.0 / (total * total);
                let (n1, d1) = smooth_negative_part(m1 / total - alpha[0], eta);
                let (n2, d2) = smooth_negative_part(m2 / total - alpha[1], eta);
                (
                    [k[0] * n1, k[1] * n2],
                    [
                        [k[0] * d1 * m2 * inv2, -k[0] * d1 * m1 * inv2],
                        [-k[1] * d2 * m2 * inv2, k[1] * d2 * m1 * inv2],
                    ],
                )
            }
            CouplingSpec::ExplicitLinear { matrix } => {
                let (z1, z2) = (m1 - 1.0, m2 - 1.0);
                (
                    [
                        matrix[0][0] * z1 + matrix[0][1] * z2,
                        matrix[1][0] * z1 + matrix[1][1] * z2,
                    ],
                    matrix,
                )
            }
        }
    }
}

/// `g(m) = m` on `[-cap, cap]`, `sign(m) (cap + 1 - exp(-(|m| - cap)))` outside.
/// Returns `(g, g')`.
pub fn saturate(m: f64, cap: f64) -> (f64, f64) {
    if m.abs() <= cap {
        (m, 1.0)
    } else {
        let e = (-(m.abs() - cap)).exp();
        (m.signum() * (cap + 1.0 - e), e)
    }
}

/// `x^- = max(-x, 0)`, with a quadratic spline on `(-eta, eta)` matching value
/// and slope at both ends. Returns `(value, derivative)`.
pub fn smooth_negative_part(x: f64, eta: f64) -> (f64, f64) {
    if x <= -eta {
        (-x, -1.0)
    } else if x >= eta {
        (0.0, 0.0)
    } else {
        let d = x - eta;
        (d * d / (4.0 * eta), d / (2.0 * eta))
    }
}

/// Hamiltonian family. The numerical Hamiltonian is the upwind form
/// `g(pl, pr) = (kappa/2) (max(pl,0)^2 + min(pr,0)^2)` for `Quadratic`, and
/// `(1/2) (max(pl,0)^2 + min(pr,0)^2)^(gamma/2)` for `PowerLaw`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum HamiltonianSpec {
    Quadratic { kappa: [f64; 2] },
    PowerLaw { gamma: f64 },
}

/// Value, gradient and Hessian of a numerical Hamiltonian with respect to
/// `(p_left, p_right)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpwindValue {
    pub value: f64,
    pub grad: [f64; 2],
    pub hess: Mat2,
}

impl Default for HamiltonianSpec {
    fn default() -> Self {
        HamiltonianSpec::Quadratic { kappa: [1.0, 1.0] }
    }
}

impl HamiltonianSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        match *self {
            HamiltonianSpec::Quadratic { kappa } => {
                if kappa.iter().any(|k| !(k.is_finite() && *k > 0.0)) {
                    return Err(ModelError::InvalidParameter(format!(
                        "kappa = {kappa:?} must be positive"
                    )));
                }
            }
            HamiltonianSpec::PowerLaw { gamma } => {
                if !(gamma.is_finite() && gamma > 1.0) {
                    return Err(ModelError::InvalidParameter(format!(
                        "power-law exponent gamma = {gamma} must be > 1"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn is_quadratic(&self) -> bool {
        match *self {
            HamiltonianSpec::Quadratic { .. } => true,
            HamiltonianSpec::PowerLaw { gamma } => gamma == 2.0,
        }
    }

    /// `D^2_p H(0) = kappa_i I` per population, when it exists.
    pub fn curvature_at_zero(&self) -> Result<[f64; 2], ModelError> {
        match *self {
            HamiltonianSpec::Quadratic { kappa } => Ok(kappa),
            HamiltonianSpec::PowerLaw { gamma } if gamma == 2.0 => Ok([1.0, 1.0]),
            HamiltonianSpec::PowerLaw { gamma } if gamma > 2.0 => Ok([0.0, 0.0]),
            HamiltonianSpec::PowerLaw { gamma } => Err(ModelError::NonSmoothHamiltonian(gamma)),
        }
    }

    /// Numerical Hamiltonian of population `pop` at the one-sided difference
    /// quotients `p_left` (backward) and `p_right` (forward).
    pub fn eval(&self, pop: usize, p_left: f64, p_right: f64) -> Result<f64, ModelError> {
        if !p_left.is_finite() || !p_right.is_finite() {
            return Err(ModelError::NonFiniteInput("difference quotient"));
        }
        Ok(self.upwind(pop, p_left, p_right).value)
    }

    /// Value with first and second derivatives. At a switching point
    /// (`p_left = 0` or `p_right = 0`) the second derivative of the active
    /// branch is the average of its one-sided values, so that the Hessians
    /// of the two nodes sharing an edge always sum to the Hessian of `p^2/2`.
    pub fn upwind(&self, pop: usize, p_left: f64, p_right: f64) -> UpwindValue {
        let lp = p_left.max(0.0);
        let rm = p_right.min(0.0);
        let wl = switch_weight(p_left, 1.0);
        let wr = switch_weight(p_right, -1.0);
        match *self {
            HamiltonianSpec::Quadratic { kappa } => {
                let k = kappa[pop];
                UpwindValue {
                    value: 0.5 * k * (lp * lp + rm * rm),
                    grad: [k * lp, k * rm],
                    hess: [[k * wl, 0.0], [0.0, k * wr]],
                }
            }
            HamiltonianSpec::PowerLaw { gamma } => {
                let s = lp * lp + rm * rm;
                if s == 0.0 {
                    let c = if gamma == 2.0 { 1.0 } else { 0.0 };
                    return UpwindValue {
                        value: 0.0,
                        grad: [0.0, 0.0],
                        hess: [[c * wl, 0.0], [0.0, c * wr]],
                    };
                }
                let half = 0.5 * gamma;
                let s1 = s.powf(half - 1.0);
                let s2 = (gamma - 2.0) * s.powf(half - 2.0);
                UpwindValue {
                    value: 0.5 * s.powf(half),
                    grad: [half * s1 * lp, half * s1 * rm],
                    hess: [
                        [half * (s1 * wl + s2 * lp * lp), half * s2 * lp * rm],
                        [half * s2 * lp * rm, half * (s1 * wr + s2 * rm * rm)],
                    ],
                }
            }
        }
    }
}

// Derivative of max(p,0) (sign = 1) or min(p,0) (sign = -1), averaged at 0.
fn switch_weight(p: f64, sign: f64) -> f64 {
    if p * sign > 0.0 {
        1.0
    } else if p == 0.0 {
        0.5
    } else {
        0.0
    }
}

/// One mean-field game instance: running costs, Hamiltonians and diffusion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub coupling: CouplingSpec,
    pub hamiltonian: HamiltonianSpec,
    pub sigma: f64,
}

impl ModelSpec {
    pub fn new(coupling: CouplingSpec, hamiltonian: HamiltonianSpec, sigma: f64) -> Self {
        ModelSpec {
            coupling,
            hamiltonian,
            sigma,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(ModelError::InvalidParameter(format!(
                "sigma = {} must be > 0",
                self.sigma
            )));
        }
        self.coupling.validate()?;
        self.hamiltonian.validate()
    }

    /// `V(1, 1)`, the running cost paid on the constant state.
    pub fn trivial_cost(&self) -> [f64; 2] {
        self.coupling.eval_with_jacobian(1.0, 1.0).0
    }

    /// Diagonalization of `diag(kappa) JV(1,1)`, the matrix that governs the
    /// linearized system. Equals [`trivial_jacobian`] for unit curvature.
    pub fn linearization(&self) -> Result<TrivialJacobian, ModelError> {
        let kappa = self.hamiltonian.curvature_at_zero()?;
        if kappa[0] == kappa[1] {
            let mut tj = trivial_jacobian(&self.coupling)?;
            let c = kappa[0];
            if c != 1.0 {
                tj.jv = scale_rows(tj.jv, kappa);
                tj.a = [c * tj.a[0], c * tj.a[1]];
            }
            Ok(tj)
        } else {
            let jv = self.coupling.jacobian(1.0, 1.0)?;
            diagonalize(scale_rows(jv, kappa))
        }
    }
}

fn scale_rows(m: Mat2, s: [f64; 2]) -> Mat2 {
    [
        [s[0] * m[0][0], s[0] * m[0][1]],
        [s[1] * m[1][0], s[1] * m[1][1]],
    ]
}

/// `JV(1,1)` together with its real diagonalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrivialJacobian {
    pub jv: Mat2,
    /// Eigenvalues, `a[0] <= a[1]`.
    pub a: [f64; 2],
    /// Columns are right eigenvectors: column `c` is `(xi[0][c], xi[1][c])`.
    pub xi: Mat2,
}

impl TrivialJacobian {
    pub fn a1(&self) -> f64 {
        self.a[0]
    }

    /// Eigenvector belonging to `a1`.
    pub fn direction(&self) -> [f64; 2] {
        [self.xi[0][0], self.xi[1][0]]
    }

    /// Max-norm of `Xi^-1 JV Xi - diag(a1, a2)`.
    pub fn diagonalization_defect(&self) -> f64 {
        let inv = invert(self.xi).unwrap_or([[f64::NAN; 2]; 2]);
        let d = mul(inv, mul(self.jv, self.xi));
        let mut worst: f64 = 0.0;
        for r in 0..2 {
            for c in 0..2 {
                let target = if r == c { self.a[r] } else { 0.0 };
                worst = worst.max((d[r][c] - target).abs());
            }
        }
        worst
    }
}

pub(crate) fn mul(a: Mat2, b: Mat2) -> Mat2 {
    let mut out = [[0.0; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            out[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c];
        }
    }
    out
}

pub(crate) fn invert(m: Mat2) -> Option<Mat2> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    Some([
        [m[1][1] / det, -m[0][1] / det],
        [-m[1][0] / det, m[0][0] / det],
    ])
}

/// Linearization of the coupling at `(1,1)`. Schelling models keep the
/// integer eigenvector columns `(K1, -K2)` (both populations intolerant) and
/// `(1, 0)` (only the first), with `(1, 1)` for the zero eigenvalue; other
/// models scale each column so its largest-magnitude entry is `+1`.
pub fn trivial_jacobian(spec: &CouplingSpec) -> Result<TrivialJacobian, ModelError> {
    spec.validate()?;
    let jv = spec.jacobian(1.0, 1.0)?;
    let mut tj = diagonalize(jv)?;
    if let CouplingSpec::Schelling { k, alpha, .. } = *spec {
        if alpha[0] > 0.5 && alpha[1] > 0.5 && tj.xi[0][0] != 0.0 {
            let s = k[0] / tj.xi[0][0];
            tj.xi[0][0] *= s;
            tj.xi[1][0] *= s;
        }
    }
    Ok(tj)
}

/// Real diagonalization of a 2x2 matrix with eigenvalues sorted ascending.
pub fn diagonalize(jv: Mat2) -> Result<TrivialJacobian, ModelError> {
    if jv.iter().flatten().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFiniteInput("coupling Jacobian"));
    }
    let scale = jv.iter().flatten().fold(0.0_f64, |s, v| s.max(v.abs()));
    if scale == 0.0 {
        return Ok(TrivialJacobian {
            jv,
            a: [0.0, 0.0],
            xi: [[1.0, 0.0], [0.0, 1.0]],
        });
    }
    let half_trace = 0.5 * (jv[0][0] + jv[1][1]);
    let det = jv[0][0] * jv[1][1] - jv[0][1] * jv[1][0];
    let disc = half_trace * half_trace - det;
    let tol = 1e-14 * scale * scale;
    if disc < -tol {
        return Err(ModelError::ComplexEigenvalues);
    }
    if disc.abs() <= tol {
        // Repeated eigenvalue: diagonalizable only as a multiple of I.
        if jv[0][1].abs() <= 1e-14 * scale && jv[1][0].abs() <= 1e-14 * scale {
            return Ok(TrivialJacobian {
                jv,
                a: [jv[0][0].min(jv[1][1]), jv[0][0].max(jv[1][1])],
                xi: [[1.0, 0.0], [0.0, 1.0]],
            });
        }
        return Err(ModelError::DefectiveMatrix);
    }
    let root = disc.sqrt();
    // Avoid cancellation in the smaller-magnitude eigenvalue.
    let big = half_trace + half_trace.signum() * root;
    let small = if big != 0.0 { det / big } else { -big };
    let (a1, a2) = if big < small { (big, small) } else { (small, big) };
    let v1 = eigenvector(jv, a1);
    let v2 = eigenvector(jv, a2);
    Ok(TrivialJacobian {
        jv,
        a: [a1, a2],
        xi: [[v1[0], v2[0]], [v1[1], v2[1]]],
    })
}

fn eigenvector(jv: Mat2, lambda: f64) -> [f64; 2] {
    let r0 = [jv[0][0] - lambda, jv[0][1]];
    let r1 = [jv[1][0], jv[1][1] - lambda];
    let n0 = r0[0].hypot(r0[1]);
    let n1 = r1[0].hypot(r1[1]);
    let row = if n0 >= n1 { r0 } else { r1 };
    let v = if row[0] == 0.0 && row[1] == 0.0 {
        [1.0, 0.0]
    } else {
        [-row[1], row[0]]
    };
    let lead = if v[0].abs() >= v[1].abs() { v[0] } else { v[1] };
    [v[0] / lead, v[1] / lead]
}
