//! Damped Newton iteration on the full space-time system, with sparse LU
//! solves.

use std::cell::RefCell;
use std::sync::Arc;

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{SparseColMat, SymbolicSparseColMat};
use faer::MatMut;
use serde::{Deserialize, Serialize};

use crate::discretization::{assemble_jacobian, assemble_residual, sup_norm, SparseOperator, StateVector};
use crate::model::ModelSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonOptions {
    /// Sup-norm of the residual at which the iteration stops.
    pub tol_residual: f64,
    pub max_iters: usize,
    /// Step halvings tried before giving up on an iteration.
    pub max_backtracks: usize,
    /// Target relative residual of each linear solve (reached by iterative
    /// refinement on top of the LU solve).
    pub linear_tol: f64,
    /// Keep the factorized Jacobian for later iterations while each reused
    /// step shrinks the residual at least by `chord_contraction`.
    pub chord_contraction: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            tol_residual: 1e-9,
            max_iters: 50,
            max_backtracks: 10,
            linear_tol: 1e-12,
            chord_contraction: 0.25,
        }
    }
}

impl NewtonOptions {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.tol_residual > 0.0 && self.linear_tol > 0.0) || self.max_iters == 0 {
            return Err(format!("Newton options must be positive: {self:?}"));
        }
        if !(0.0..1.0).contains(&self.chord_contraction) {
            return Err(format!("chord contraction must lie in [0, 1): {self:?}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    SingularJacobian,
    /// The residual became non-finite along every trial step.
    Diverged,
    /// No trial step reduced the residual.
    Stagnated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
    pub final_residual: f64,
}

impl SolveReport {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearSolveFailure;

type Pattern = Arc<(Vec<usize>, Vec<usize>)>;

thread_local! {
    // Symbolic factorizations keyed by sparsity pattern.
    static SYMBOLIC: RefCell<Vec<(Pattern, SymbolicLu<usize>)>> = const { RefCell::new(Vec::new()) };
}

const SYMBOLIC_CACHE_LEN: usize = 4;

fn symbolic_for(op: &SparseOperator) -> Result<SymbolicLu<usize>, LinearSolveFailure> {
    SYMBOLIC.with(|cache| {
        let mut cache = cache.borrow_mut();
        if let Some((_, sym)) = cache
            .iter()
            .find(|(p, _)| p.0 == op.row_ptr && p.1 == op.col_idx)
        {
            return Ok(sym.clone());
        }
        let structure = transposed_structure(op);
        let sym = SymbolicLu::try_new(structure.as_ref()).map_err(|_| LinearSolveFailure)?;
        if cache.len() == SYMBOLIC_CACHE_LEN {
            cache.remove(0);
        }
        cache.push((Arc::new((op.row_ptr.clone(), op.col_idx.clone())), sym.clone()));
        Ok(sym)
    })
}

// A row-compressed matrix read as column-compressed is its transpose.
fn transposed_structure(op: &SparseOperator) -> SymbolicSparseColMat<usize> {
    SymbolicSparseColMat::new_checked(op.n, op.n, op.row_ptr.clone(), None, op.col_idx.clone())
}

/// Sparse LU factorization of a [`SparseOperator`].
pub struct SparseLu {
    op: SparseOperator,
    lu: Lu<usize, f64>,
}

impl SparseLu {
    pub fn factor(op: SparseOperator) -> Result<Self, LinearSolveFailure> {
        let sym = symbolic_for(&op)?;
        let mat = SparseColMat::new(transposed_structure(&op), op.values.clone());
        let lu = Lu::try_new_with_symbolic(sym, mat.as_ref()).map_err(|_| LinearSolveFailure)?;
        Ok(SparseLu { op, lu })
    }

    fn raw_solve(&self, b: &mut [f64]) {
        let n = b.len();
        // The factorization is of the transpose.
        self.lu
            .solve_transpose_in_place(MatMut::from_column_major_slice_mut(b, n, 1));
    }

    /// Solves `A x = b` with up to three steps of iterative refinement.
    pub fn solve(&self, b: &[f64], rel_tol: f64) -> Result<Vec<f64>, LinearSolveFailure> {
        let bnorm = sup_norm(b);
        let mut x = b.to_vec();
        self.raw_solve(&mut x);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(LinearSolveFailure);
        }
        if bnorm == 0.0 {
            return Ok(x);
        }
        let mut rel = f64::INFINITY;
        for _ in 0..3 {
            let ax = self.op.matvec(&x);
            let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
            rel = sup_norm(&r) / bnorm;
            if rel <= rel_tol {
                break;
            }
            self.raw_solve(&mut r);
            if r.iter().any(|v| !v.is_finite()) {
                return Err(LinearSolveFailure);
            }
            for (xi, ri) in x.iter_mut().zip(&r) {
                *xi += ri;
            }
        }
        // A factorization that cannot get within a loose tolerance of the
        // target is treated as singular.
        if !(rel <= rel_tol.sqrt()) {
            let ax = self.op.matvec(&x);
            let r = b.iter().zip(&ax).map(|(b, a)| (b - a).abs()).fold(0.0, f64::max);
            if !(r / bnorm <= rel_tol.sqrt()) {
                return Err(LinearSolveFailure);
            }
        }
        Ok(x)
    }
}

/// A factorized linear operator.
pub trait Factorization {
    fn solve(&self, b: &[f64], rel_tol: f64) -> Result<Vec<f64>, LinearSolveFailure>;
}

impl Factorization for SparseLu {
    fn solve(&self, b: &[f64], rel_tol: f64) -> Result<Vec<f64>, LinearSolveFailure> {
        SparseLu::solve(self, b, rel_tol)
    }
}

/// Why a Jacobian could not be factorized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorError {
    /// The Jacobian is undefined at this point.
    Domain,
    Singular,
}

/// Damped Newton on a generic system `F(x) = 0`. `residual` returns `None`
/// outside the domain of `F`.
///
/// After a full Newton step that contracts the residual by
/// `chord_contraction`, the factorization is reused (chord steps) for as long
/// as full reused steps keep contracting at that rate; otherwise the
/// Jacobian is refactorized and the step is damped by halving.
pub fn newton_core(
    x0: Vec<f64>,
    residual: impl Fn(&[f64]) -> Option<Vec<f64>>,
    jacobian: impl Fn(&[f64]) -> Option<SparseOperator>,
    opts: &NewtonOptions,
) -> (Vec<f64>, SolveReport) {
    newton_with(
        x0,
        residual,
        |x| {
            let j = jacobian(x).ok_or(FactorError::Domain)?;
            SparseLu::factor(j).map_err(|_| FactorError::Singular)
        },
        opts,
    )
}

/// [`newton_core`] with a caller-supplied factorization of the Jacobian.
pub fn newton_with<F: Factorization>(
    x0: Vec<f64>,
    residual: impl Fn(&[f64]) -> Option<Vec<f64>>,
    factor: impl Fn(&[f64]) -> Result<F, FactorError>,
    opts: &NewtonOptions,
) -> (Vec<f64>, SolveReport) {
    let report = |status, hist: Vec<f64>, iterations| SolveReport {
        status,
        iterations,
        final_residual: *hist.last().unwrap_or(&f64::NAN),
        residual_history: hist,
    };
    let step = |x: &[f64], dx: &[f64], c: f64| -> Vec<f64> {
        x.iter().zip(dx).map(|(a, d)| a + c * d).collect()
    };
    let mut x = x0;
    let Some(mut r) = residual(&x) else {
        return (x, report(SolveStatus::Diverged, vec![f64::INFINITY], 0));
    };
    let mut rn = sup_norm(&r);
    let mut hist = vec![rn];
    let mut frozen: Option<F> = None;
    for it in 0..opts.max_iters {
        if rn <= opts.tol_residual {
            return (x, report(SolveStatus::Converged, hist, it));
        }
        let neg: Vec<f64> = r.iter().map(|v| -v).collect();

        if let Some(lu) = &frozen {
            let chord = lu.solve(&neg, opts.linear_tol).ok().and_then(|dx| {
                let xt = step(&x, &dx, 1.0);
                let rt = residual(&xt)?;
                let tn = sup_norm(&rt);
                (tn <= opts.chord_contraction * rn).then_some((xt, rt, tn))
            });
            if let Some((xt, rt, tn)) = chord {
                x = xt;
                r = rt;
                rn = tn;
                hist.push(rn);
                continue;
            }
            frozen = None;
        }

        let lu = match factor(&x) {
            Ok(lu) => lu,
            Err(FactorError::Domain) => return (x, report(SolveStatus::Diverged, hist, it)),
            Err(FactorError::Singular) => {
                return (x, report(SolveStatus::SingularJacobian, hist, it))
            }
        };
        let Ok(dx) = lu.solve(&neg, opts.linear_tol) else {
            return (x, report(SolveStatus::SingularJacobian, hist, it));
        };
        let mut c = 1.0;
        let mut any_finite = false;
        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            let trial = step(&x, &dx, c);
            if let Some(rt) = residual(&trial) {
                any_finite = true;
                let tn = sup_norm(&rt);
                if tn < rn {
                    accepted = Some((trial, rt, tn));
                    break;
                }
            }
            c *= 0.5;
        }
        match accepted {
            Some((xt, rt, tn)) => {
                if c == 1.0 && tn <= opts.chord_contraction * rn {
                    frozen = Some(lu);
                }
                x = xt;
                r = rt;
                rn = tn;
                hist.push(rn);
            }
            None => {
                let status = if any_finite {
                    SolveStatus::Stagnated
                } else {
                    SolveStatus::Diverged
                };
                return (x, report(status, hist, it + 1));
            }
        }
    }
    let status = if rn <= opts.tol_residual {
        SolveStatus::Converged
    } else {
        SolveStatus::MaxIterations
    };
    (x, report(status, hist, opts.max_iters))
}

/// Damped Newton for the discrete system at horizon `t`, starting from `initial`.
pub fn newton_solve(
    initial: &StateVector,
    t: f64,
    model: &ModelSpec,
    opts: &NewtonOptions,
) -> (StateVector, SolveReport) {
    let template = initial.clone();
    let with = |x: &[f64]| {
        let mut s = template.clone();
        s.set_unknowns(x);
        s
    };
    let (x, report) = newton_core(
        initial.unknowns(),
        |x| assemble_residual(&with(x), t, model).ok(),
        |x| assemble_jacobian(&with(x), t, model).ok(),
        opts,
    );
    (with(&x), report)
}
