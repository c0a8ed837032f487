//! Space-time grid, discrete state, and the residual and Jacobian of the
//! discretized system.
//!
//! Space: vertex grid `x_j = j h`, second-order Laplacian and upwind numerical
//! Hamiltonian, Neumann conditions by even reflection (`u_{-1} = u_1`,
//! `u_{Nx+1} = u_{Nx-1}`). The Fokker-Planck transport is the weighted
//! transpose of the derivative of the Hamiltonian term, so the trapezoidal
//! mass of each density is conserved exactly.
//!
//! Time: second-order backward differences, starting with one implicit Euler
//! step at `t = 1` (HJB, marching backwards) and at `t = 0` (FP). The HJB row
//! at level `n` sees the densities at level `n`, the FP row at level `n` the
//! value functions at level `n`.
//!
//! Unknowns are `u_i` at levels `0..Nt-1` and `m_i` at levels `1..Nt`, ordered
//! `(u1, u2, m1, m2)`, then by level, then by space node. Residual rows use the
//! same order: the HJB row of `u_i` at `(n, j)` and the FP row of `m_i` at `(n, j)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelSpec, UpwindValue};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiscretizationError {
    #[error("grid needs at least 8 intervals in space and time (got {nx} x {nt})")]
    GridTooSmall { nx: usize, nt: usize },
    #[error("state contains non-finite values")]
    NonFiniteState,
    #[error("residual is non-finite (state outside the model's domain)")]
    NonFiniteResidual,
    #[error("horizon T = {0} must be positive and finite")]
    InvalidHorizon(f64),
    #[error("state belongs to a different grid")]
    GridMismatch,
}

/// Uniform mesh on `(0,1) x (0,1)`: `Nx` space and `Nt` time intervals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid {
    pub nx: usize,
    pub nt: usize,
}

impl Grid {
    pub const MIN_INTERVALS: usize = 8;

    pub fn new(nx: usize, nt: usize) -> Result<Self, DiscretizationError> {
        if nx < Self::MIN_INTERVALS || nt < Self::MIN_INTERVALS {
            return Err(DiscretizationError::GridTooSmall { nx, nt });
        }
        Ok(Grid { nx, nt })
    }

    pub fn h(&self) -> f64 {
        1.0 / self.nx as f64
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.nt as f64
    }

    /// Space nodes per time level.
    pub fn np(&self) -> usize {
        self.nx + 1
    }

    pub fn x(&self, j: usize) -> f64 {
        j as f64 / self.nx as f64
    }

    pub fn t(&self, n: usize) -> f64 {
        n as f64 / self.nt as f64
    }

    /// Trapezoidal weights `h (1/2, 1, ..., 1, 1/2)`.
    pub fn weights(&self) -> Vec<f64> {
        let h = self.h();
        let mut w = vec![h; self.np()];
        w[0] = 0.5 * h;
        w[self.nx] = 0.5 * h;
        w
    }

    pub fn n_unknowns(&self) -> usize {
        4 * self.nt * self.np()
    }

    /// Position of `(field, level, node)` in the unknown vector, or `None` for
    /// the fixed levels `u(., Nt)` and `m(., 0)`.
    pub fn unknown_index(&self, field: Field, n: usize, j: usize) -> Option<usize> {
        let slot = if field.is_value() {
            if n >= self.nt {
                return None;
            }
            n
        } else {
            if n == 0 {
                return None;
            }
            n - 1
        };
        Some((field.index() * self.nt + slot) * self.np() + j)
    }

    /// Inverse of [`Grid::unknown_index`].
    pub fn unknown_location(&self, idx: usize) -> (Field, usize, usize) {
        let np = self.np();
        let j = idx % np;
        let rest = idx / np;
        let slot = rest % self.nt;
        let field = Field::ALL[rest / self.nt];
        let n = if field.is_value() { slot } else { slot + 1 };
        (field, n, j)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Field {
    U1,
    U2,
    M1,
    M2,
}

impl Field {
    pub const ALL: [Field; 4] = [Field::U1, Field::U2, Field::M1, Field::M2];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_value(self) -> bool {
        matches!(self, Field::U1 | Field::U2)
    }

    /// Population 0 or 1.
    pub fn population(self) -> usize {
        self.index() % 2
    }

    pub fn value(pop: usize) -> Field {
        [Field::U1, Field::U2][pop]
    }

    pub fn density(pop: usize) -> Field {
        [Field::M1, Field::M2][pop]
    }

    pub fn name(self) -> &'static str {
        ["u1", "u2", "m1", "m2"][self.index()]
    }
}

/// The four fields on every grid node, including the fixed levels.
/// Layout: field-major, then time level, then space node.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    grid: Grid,
    data: Vec<f64>,
}

impl StateVector {
    /// `u = 0`, `m = 1` everywhere.
    pub fn zero_cost(grid: Grid) -> Self {
        let block = (grid.nt + 1) * grid.np();
        let mut data = vec![0.0; 4 * block];
        data[2 * block..].fill(1.0);
        StateVector { grid, data }
    }

    /// The constant solution `u_i = T (1 - t) V_i(1,1)`, `m_i = 1`.
    pub fn trivial(grid: Grid, t: f64, model: &ModelSpec) -> Self {
        let mut s = Self::zero_cost(grid);
        let v = model.trivial_cost();
        for pop in 0..2 {
            for n in 0..=grid.nt {
                let val = t * v[pop] * ((grid.nt - n) as f64 / grid.nt as f64);
                s.level_mut(Field::value(pop), n).fill(val);
            }
        }
        s
    }

    pub fn from_raw(grid: Grid, data: Vec<f64>) -> Option<Self> {
        (data.len() == 4 * (grid.nt + 1) * grid.np()).then_some(StateVector { grid, data })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }

    fn offset(&self, field: Field, n: usize) -> usize {
        (field.index() * (self.grid.nt + 1) + n) * self.grid.np()
    }

    pub fn get(&self, field: Field, n: usize, j: usize) -> f64 {
        self.data[self.offset(field, n) + j]
    }

    pub fn set(&mut self, field: Field, n: usize, j: usize, v: f64) {
        let o = self.offset(field, n);
        self.data[o + j] = v;
    }

    pub fn level(&self, field: Field, n: usize) -> &[f64] {
        let o = self.offset(field, n);
        &self.data[o..o + self.grid.np()]
    }

    pub fn level_mut(&mut self, field: Field, n: usize) -> &mut [f64] {
        let o = self.offset(field, n);
        let np = self.grid.np();
        &mut self.data[o..o + np]
    }

    /// All levels of one field, row = time level.
    pub fn field(&self, field: Field) -> &[f64] {
        let o = self.offset(field, 0);
        &self.data[o..o + (self.grid.nt + 1) * self.grid.np()]
    }

    pub fn unknowns(&self) -> Vec<f64> {
        let g = self.grid;
        let per = g.nt * g.np();
        let mut out = Vec::with_capacity(4 * per);
        for f in Field::ALL {
            let first = if f.is_value() { 0 } else { 1 };
            let o = self.offset(f, first);
            out.extend_from_slice(&self.data[o..o + per]);
        }
        out
    }

    pub fn set_unknowns(&mut self, x: &[f64]) {
        let g = self.grid;
        let per = g.nt * g.np();
        assert_eq!(x.len(), 4 * per, "unknown vector has the wrong length");
        for (i, f) in Field::ALL.into_iter().enumerate() {
            let first = if f.is_value() { 0 } else { 1 };
            let o = self.offset(f, first);
            self.data[o..o + per].copy_from_slice(&x[i * per..(i + 1) * per]);
        }
    }

    /// `self + c * dx` on the unknowns; fixed levels are kept.
    pub fn with_step(&self, dx: &[f64], c: f64) -> Self {
        let mut x = self.unknowns();
        for (xi, di) in x.iter_mut().zip(dx) {
            *xi += c * di;
        }
        let mut s = self.clone();
        s.set_unknowns(&x);
        s
    }

    /// Mirror image under `x -> 1 - x`.
    pub fn reflected(&self) -> Self {
        let np = self.grid.np();
        let mut s = self.clone();
        for chunk in s.data.chunks_mut(np) {
            chunk.reverse();
        }
        s
    }

    /// Bilinear interpolation onto another grid of the unit square. Used to
    /// start a fine-grid solve from a coarse-grid solution.
    pub fn resample(&self, grid: Grid) -> Self {
        let src = self.grid;
        let locate = |y: f64, cells: usize| {
            let s = y * cells as f64;
            let i = (s.floor() as usize).min(cells - 1);
            (i, s - i as f64)
        };
        let mut out = Self::zero_cost(grid);
        for f in Field::ALL {
            for n in 0..=grid.nt {
                let (a, wt) = locate(grid.t(n), src.nt);
                for j in 0..grid.np() {
                    let (b, wx) = locate(grid.x(j), src.nx);
                    let v = (1.0 - wt) * ((1.0 - wx) * self.get(f, a, b) + wx * self.get(f, a, b + 1))
                        + wt * ((1.0 - wx) * self.get(f, a + 1, b) + wx * self.get(f, a + 1, b + 1));
                    out.set(f, n, j, v);
                }
            }
        }
        out
    }

    /// `max |m_i - 1|` over all nodes.
    pub fn density_deviation(&self, pop: usize) -> f64 {
        self.field(Field::density(pop))
            .iter()
            .fold(0.0, |a: f64, v| a.max((v - 1.0).abs()))
    }

    pub fn min_density(&self) -> f64 {
        self.data[2 * (self.grid.nt + 1) * self.grid.np()..]
            .iter()
            .fold(f64::INFINITY, |a, &v| a.min(v))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Compressed-row sparse matrix. The structure depends only on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOperator {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseOperator {
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn max_row_nnz(&self) -> usize {
        self.row_ptr.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0)
    }

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
        (&self.col_idx[a..b], &self.values[a..b])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        cols.binary_search(&c).map(|i| vals[i]).unwrap_or(0.0)
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|r| {
                let (cols, vals) = self.row(r);
                cols.iter().zip(vals).map(|(&c, v)| v * x[c]).sum()
            })
            .collect()
    }

    pub fn same_pattern(&self, other: &SparseOperator) -> bool {
        self.n == other.n && self.row_ptr == other.row_ptr && self.col_idx == other.col_idx
    }
}

// Neighbours of node j after reflection at both ends.
fn stencil(j: usize, nx: usize) -> (usize, usize) {
    let a = if j == 0 { 1 } else { j - 1 };
    let b = if j == nx { nx - 1 } else { j + 1 };
    (a, b)
}

fn check(state: &StateVector, t: f64) -> Result<(), DiscretizationError> {
    if !(t.is_finite() && t > 0.0) {
        return Err(DiscretizationError::InvalidHorizon(t));
    }
    if !state.is_finite() {
        return Err(DiscretizationError::NonFiniteState);
    }
    Ok(())
}

// Numerical Hamiltonian data for every node of one value-function level.
fn upwind_level(model: &ModelSpec, pop: usize, u: &[f64], h: f64, out: &mut Vec<UpwindValue>) {
    let nx = u.len() - 1;
    out.clear();
    out.extend((0..=nx).map(|j| {
        let (a, b) = stencil(j, nx);
        model
            .hamiltonian
            .upwind(pop, (u[j] - u[a]) / h, (u[b] - u[j]) / h)
    }));
}

// Transport term of the FP row: (1/w_l) sum_j w_j m_j dg_j/du_l.
fn transport(hv: &[UpwindValue], m: &[f64], w: &[f64], h: f64, out: &mut [f64]) {
    let nx = m.len() - 1;
    out.fill(0.0);
    for j in 0..=nx {
        let (a, b) = stencil(j, nx);
        let c = w[j] * m[j] / h;
        let (gl, gr) = (hv[j].grad[0], hv[j].grad[1]);
        out[j] += c * (gl - gr);
        out[a] -= c * gl;
        out[b] += c * gr;
    }
    for (o, wl) in out.iter_mut().zip(w) {
        *o /= wl;
    }
}

/// Residual of the discrete system at horizon `t`, in unknown order.
pub fn assemble_residual(
    state: &StateVector,
    t: f64,
    model: &ModelSpec,
) -> Result<Vec<f64>, DiscretizationError> {
    check(state, t)?;
    let g = state.grid;
    let (nx, nt, np) = (g.nx, g.nt, g.np());
    let (h, dt) = (g.h(), g.dt());
    let sigma = model.sigma;
    let w = g.weights();
    let mut r = vec![0.0; g.n_unknowns()];
    let mut hv = Vec::with_capacity(np);
    let mut tr = vec![0.0; np];
    let inv_h2 = 1.0 / (h * h);
    let c1 = 1.0 / (t * dt);
    let c2 = 0.5 / (t * dt);

    for pop in 0..2 {
        let uf = Field::value(pop);
        let mf = Field::density(pop);
        for n in 0..nt {
            let u = state.level(uf, n);
            let u1 = state.level(uf, n + 1);
            let m1 = state.level(Field::M1, n);
            let m2 = state.level(Field::M2, n);
            upwind_level(model, pop, u, h, &mut hv);
            let base = g.unknown_index(uf, n, 0).unwrap();
            for j in 0..=nx {
                let (a, b) = stencil(j, nx);
                let time = if n + 2 <= nt {
                    c2 * (3.0 * u[j] - 4.0 * u1[j] + state.get(uf, n + 2, j))
                } else {
                    c1 * (u[j] - u1[j])
                };
                let lap = (u[a] - 2.0 * u[j] + u[b]) * inv_h2;
                let v = model.coupling.eval_with_jacobian(m1[j], m2[j]).0[pop];
                r[base + j] = time - sigma * lap + hv[j].value - v;
            }
        }
        for n in 1..=nt {
            let m = state.level(mf, n);
            let mp = state.level(mf, n - 1);
            upwind_level(model, pop, state.level(uf, n), h, &mut hv);
            transport(&hv, m, &w, h, &mut tr);
            let base = g.unknown_index(mf, n, 0).unwrap();
            for l in 0..=nx {
                let (a, b) = stencil(l, nx);
                let time = if n >= 2 {
                    c2 * (3.0 * m[l] - 4.0 * mp[l] + state.get(mf, n - 2, l))
                } else {
                    c1 * (m[l] - mp[l])
                };
                let lap = (m[a] - 2.0 * m[l] + m[b]) * inv_h2;
                r[base + l] = time - sigma * lap + tr[l];
            }
        }
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(DiscretizationError::NonFiniteResidual);
    }
    Ok(r)
}

/// Derivative of the residual with respect to the horizon `T`. Only the time
/// differences carry `T` (as `1/T`).
pub fn residual_t_derivative(
    state: &StateVector,
    t: f64,
) -> Result<Vec<f64>, DiscretizationError> {
    check(state, t)?;
    let g = state.grid;
    let (nx, nt) = (g.nx, g.nt);
    let c1 = -1.0 / (t * t * g.dt());
    let c2 = 0.5 * c1;
    let mut r = vec![0.0; g.n_unknowns()];
    for pop in 0..2 {
        let uf = Field::value(pop);
        let mf = Field::density(pop);
        for n in 0..nt {
            let base = g.unknown_index(uf, n, 0).unwrap();
            for j in 0..=nx {
                r[base + j] = if n + 2 <= nt {
                    c2 * (3.0 * state.get(uf, n, j) - 4.0 * state.get(uf, n + 1, j)
                        + state.get(uf, n + 2, j))
                } else {
                    c1 * (state.get(uf, n, j) - state.get(uf, n + 1, j))
                };
            }
        }
        for n in 1..=nt {
            let base = g.unknown_index(mf, n, 0).unwrap();
            for l in 0..=nx {
                r[base + l] = if n >= 2 {
                    c2 * (3.0 * state.get(mf, n, l) - 4.0 * state.get(mf, n - 1, l)
                        + state.get(mf, n - 2, l))
                } else {
                    c1 * (state.get(mf, n, l) - state.get(mf, n - 1, l))
                };
            }
        }
    }
    Ok(r)
}

// Accumulates (column, value) pairs of one row, merging duplicates.
struct RowBuilder {
    entries: Vec<(usize, f64)>,
}

impl RowBuilder {
    fn push(&mut self, c: usize, v: f64) {
        self.entries.push((c, v));
    }

    fn flush(&mut self, op: &mut SparseOperator) {
        self.entries.sort_unstable_by_key(|e| e.0);
        let mut last = usize::MAX;
        for &(c, v) in &self.entries {
            if c == last {
                *op.values.last_mut().unwrap() += v;
            } else {
                op.col_idx.push(c);
                op.values.push(v);
                last = c;
            }
        }
        op.row_ptr.push(op.col_idx.len());
        self.entries.clear();
    }
}

// Hessian of g_j with respect to (u_j, u_a, u_b), as coefficients on the
// node triple; ghost duplicates are merged by the row builder.
fn local_hessian(hv: &UpwindValue, h: f64) -> [[f64; 3]; 3] {
    // dp_l/du = (1, -1, 0)/h, dp_r/du = (-1, 0, 1)/h over (j, a, b)
    let cl = [1.0, -1.0, 0.0];
    let cr = [-1.0, 0.0, 1.0];
    let [[hll, hlr], [_, hrr]] = hv.hess;
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = (hll * cl[r] * cl[c] + hlr * (cl[r] * cr[c] + cr[r] * cl[c])
                + hrr * cr[r] * cr[c])
                / (h * h);
        }
    }
    out
}

/// Analytic Jacobian of [`assemble_residual`] with respect to the unknowns.
pub fn assemble_jacobian(
    state: &StateVector,
    t: f64,
    model: &ModelSpec,
) -> Result<SparseOperator, DiscretizationError> {
    check(state, t)?;
    let g = state.grid;
    let (nx, nt, np) = (g.nx, g.nt, g.np());
    let (h, dt) = (g.h(), g.dt());
    let sigma = model.sigma;
    let w = g.weights();
    let n = g.n_unknowns();
    let mut op = SparseOperator {
        n,
        row_ptr: Vec::with_capacity(n + 1),
        col_idx: Vec::with_capacity(9 * n),
        values: Vec::with_capacity(9 * n),
    };
    op.row_ptr.push(0);
    let mut row = RowBuilder {
        entries: Vec::with_capacity(32),
    };
    let mut hv = Vec::with_capacity(np);
    let inv_h2 = 1.0 / (h * h);
    let c1 = 1.0 / (t * dt);
    let c2 = 0.5 / (t * dt);
    let ui = |f: Field, lvl: usize, j: usize| g.unknown_index(f, lvl, j);

    // HJB rows
    for pop in 0..2 {
        let uf = Field::value(pop);
        for lvl in 0..nt {
            let u = state.level(uf, lvl);
            upwind_level(model, pop, u, h, &mut hv);
            let bdf2 = lvl + 2 <= nt;
            for j in 0..=nx {
                let (a, b) = stencil(j, nx);
                let (gl, gr) = (hv[j].grad[0], hv[j].grad[1]);
                let here = |jj| ui(uf, lvl, jj).unwrap();
                let diag_time = if bdf2 { 3.0 * c2 } else { c1 };
                row.push(here(j), diag_time + 2.0 * sigma * inv_h2 + (gl - gr) / h);
                row.push(here(a), -sigma * inv_h2 - gl / h);
                row.push(here(b), -sigma * inv_h2 + gr / h);
                if let Some(c) = ui(uf, lvl + 1, j) {
                    row.push(c, if bdf2 { -4.0 * c2 } else { -c1 });
                }
                if bdf2 {
                    if let Some(c) = ui(uf, lvl + 2, j) {
                        row.push(c, c2);
                    }
                }
                if lvl >= 1 {
                    let jv = model
                        .coupling
                        .eval_with_jacobian(state.get(Field::M1, lvl, j), state.get(Field::M2, lvl, j))
                        .1;
                    row.push(ui(Field::M1, lvl, j).unwrap(), -jv[pop][0]);
                    row.push(ui(Field::M2, lvl, j).unwrap(), -jv[pop][1]);
                }
                row.flush(&mut op);
            }
        }
    }

    // FP rows
    for pop in 0..2 {
        let uf = Field::value(pop);
        let mf = Field::density(pop);
        for lvl in 1..=nt {
            let m = state.level(mf, lvl);
            upwind_level(model, pop, state.level(uf, lvl), h, &mut hv);
            let u_unknown = lvl < nt;
            for l in 0..=nx {
                let (a, b) = stencil(l, nx);
                let here = |jj| ui(mf, lvl, jj).unwrap();
                let diag_time = if lvl >= 2 { 3.0 * c2 } else { c1 };
                row.push(here(l), diag_time + 2.0 * sigma * inv_h2);
                row.push(here(a), -sigma * inv_h2);
                row.push(here(b), -sigma * inv_h2);
                if lvl >= 2 {
                    row.push(ui(mf, lvl - 1, l).unwrap(), -4.0 * c2);
                }
                if lvl >= 3 {
                    row.push(ui(mf, lvl - 2, l).unwrap(), c2);
                }
                // Nodes j whose stencil contains l. At the ends the reflected
                // neighbour appears twice in the stencil of the boundary node.
                let lo = l.saturating_sub(1);
                let hi = (l + 1).min(nx);
                for j in lo..=hi {
                    let (ja, jb) = stencil(j, nx);
                    let nodes = [j, ja, jb];
                    let (gl, gr) = (hv[j].grad[0], hv[j].grad[1]);
                    let dg = [(gl - gr) / h, -gl / h, gr / h];
                    // dg_j/du_l, summing over the positions where l occurs
                    let mut d = 0.0;
                    for (k, &node) in nodes.iter().enumerate() {
                        if node == l {
                            d += dg[k];
                        }
                    }
                    row.push(here(j), w[j] / w[l] * d);
                    if u_unknown {
                        let hs = local_hessian(&hv[j], h);
                        let c = w[j] * m[j] / w[l];
                        for (r, &rn) in nodes.iter().enumerate() {
                            if rn != l {
                                continue;
                            }
                            for (k, &cn) in nodes.iter().enumerate() {
                                row.push(ui(uf, lvl, cn).unwrap(), c * hs[r][k]);
                            }
                        }
                    }
                }
                row.flush(&mut op);
            }
        }
    }
    if op.values.iter().any(|v| !v.is_finite()) {
        return Err(DiscretizationError::NonFiniteResidual);
    }
    Ok(op)
}

/// Trapezoidal mass of `m_1` and `m_2` at every time level.
pub fn mass_vector(state: &StateVector) -> [Vec<f64>; 2] {
    let g = state.grid;
    let w = g.weights();
    let per_pop = |pop| {
        (0..=g.nt)
            .map(|n| {
                state
                    .level(Field::density(pop), n)
                    .iter()
                    .zip(&w)
                    .map(|(m, w)| m * w)
                    .sum()
            })
            .collect()
    };
    [per_pop(0), per_pop(1)]
}

/// Largest deviation of the mass from its value at `t = 0`.
pub fn mass_drift(state: &StateVector) -> f64 {
    mass_vector(state)
        .iter()
        .flat_map(|m| m.iter().map(move |v| (v - m[0]).abs()))
        .fold(0.0, f64::max)
}

/// Permutation of the unknown vector induced by `x -> 1 - x`.
pub fn reflection_permutation(grid: Grid) -> Vec<usize> {
    (0..grid.n_unknowns())
        .map(|i| {
            let j = i % grid.np();
            i - j + (grid.nx - j)
        })
        .collect()
}

pub fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a: f64, x| a.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CouplingSpec, HamiltonianSpec};
    use crate::spectral::{bifurcation_times, local_guess, EigenMode};

    #[test]
    fn resample_reproduces_bilinear_fields() {
        let coarse = Grid::new(10, 8).unwrap();
        let fine = Grid::new(30, 24).unwrap();
        let f = |x: f64, t: f64| 0.5 + 2.0 * x - 3.0 * t + 1.5 * x * t;
        let mut s = StateVector::zero_cost(coarse);
        for field in Field::ALL {
            for n in 0..=coarse.nt {
                for j in 0..coarse.np() {
                    s.set(field, n, j, f(coarse.x(j), coarse.t(n)));
                }
            }
        }
        let r = s.resample(fine);
        for n in 0..=fine.nt {
            for j in 0..fine.np() {
                assert!((r.get(Field::M2, n, j) - f(fine.x(j), fine.t(n))).abs() < 1e-13);
            }
        }
        assert_eq!(s.resample(coarse), s);
    }
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    const SIGMA: f64 = 1.0 / PI;

    fn aggregation() -> ModelSpec {
        ModelSpec::new(CouplingSpec::aggregation(2.0), HamiltonianSpec::default(), SIGMA)
    }

    #[test]
    fn grid_indexing_round_trips() {
        let g = Grid::new(10, 12).unwrap();
        for i in 0..g.n_unknowns() {
            let (f, n, j) = g.unknown_location(i);
            assert_eq!(g.unknown_index(f, n, j), Some(i));
        }
        assert_eq!(g.unknown_index(Field::U1, 12, 0), None);
        assert_eq!(g.unknown_index(Field::M2, 0, 3), None);
        assert!(Grid::new(7, 20).is_err());
    }

    #[test]
    fn unknowns_round_trip() {
        let g = Grid::new(8, 9).unwrap();
        let mut s = StateVector::trivial(g, 1.3, &aggregation());
        let mut x = s.unknowns();
        for (i, v) in x.iter_mut().enumerate() {
            *v += i as f64 * 1e-3;
        }
        s.set_unknowns(&x);
        assert_eq!(s.unknowns(), x);
        assert_eq!(s.level(Field::M1, 0), vec![1.0; 9].as_slice());
        assert_eq!(s.level(Field::U2, 9), vec![0.0; 9].as_slice());
    }

    #[test]
    fn trivial_state_is_exact() {
        let model = aggregation();
        for (nx, nt) in [(16, 16), (50, 50)] {
            let g = Grid::new(nx, nt).unwrap();
            for t in [0.1, 1.0, 5.0, 20.0] {
                let s = StateVector::trivial(g, t, &model);
                let r = assemble_residual(&s, t, &model).unwrap();
                assert!(sup_norm(&r) <= 1e-12, "{nx} {t}: {}", sup_norm(&r));
                assert!(mass_vector(&s).iter().flatten().all(|&v| (v - 1.0).abs() < 1e-15));
            }
        }
        let zero = ModelSpec::new(
            CouplingSpec::ExplicitLinear { matrix: [[0.0; 2]; 2] },
            HamiltonianSpec::default(),
            SIGMA,
        );
        let s = StateVector::zero_cost(Grid::new(16, 16).unwrap());
        assert!(sup_norm(&assemble_residual(&s, 1.0, &zero).unwrap()) == 0.0);
    }

    #[test]
    fn perturbation_residual_is_first_order() {
        let model = aggregation();
        let g = Grid::new(50, 50).unwrap();
        let bp = bifurcation_times(&model.linearization().unwrap(), SIGMA, EigenMode::Continuous, 1, 1)
            .unwrap()[0];
        let eps = 1e-3;
        let s = local_guess(&bp, eps, g, bp.t_star, &model);
        let r = sup_norm(&assemble_residual(&s, bp.t_star, &model).unwrap());
        assert!(r < 10.0 * eps, "{r}");
        assert!(r > 0.0);
    }

    fn random_state(g: Grid, t: f64, model: &ModelSpec, rng: &mut ChaCha8Rng, amp: f64) -> StateVector {
        let mut s = StateVector::trivial(g, t, model);
        let mut x = s.unknowns();
        for (i, v) in x.iter_mut().enumerate() {
            let (f, _, _) = g.unknown_location(i);
            let scale = if f.is_value() { amp } else { 0.5 * amp };
            *v += scale * rng.random_range(-1.0..1.0);
        }
        s.set_unknowns(&x);
        s
    }

    fn check_directional_derivatives(model: &ModelSpec, seed: u64) -> f64 {
        let g = Grid::new(20, 20).unwrap();
        let t = 1.3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_state(g, t, model, &mut rng, 0.3);
        let j = assemble_jacobian(&s, t, model).unwrap();
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let v: Vec<f64> = (0..g.n_unknowns()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let e = 1e-6;
            let rp = assemble_residual(&s.with_step(&v, e), t, model).unwrap();
            let rm = assemble_residual(&s.with_step(&v, -e), t, model).unwrap();
            let jv = j.matvec(&v);
            let diff: Vec<f64> = rp
                .iter()
                .zip(&rm)
                .zip(&jv)
                .map(|((p, m), a)| (p - m) / (2.0 * e) - a)
                .collect();
            let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
            worst = worst.max(norm(&diff) / norm(&jv));
        }
        worst
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let models = [
            aggregation(),
            ModelSpec::new(CouplingSpec::schelling([5.0, 3.0], [0.7, 0.55]), HamiltonianSpec::default(), SIGMA),
            ModelSpec::new(CouplingSpec::aggregation(2.0), HamiltonianSpec::PowerLaw { gamma: 2.1 }, SIGMA),
            ModelSpec::new(CouplingSpec::aggregation(2.0), HamiltonianSpec::Quadratic { kappa: [0.7, 1.4] }, SIGMA),
            ModelSpec::new(
                CouplingSpec::ExplicitLinear { matrix: [[-1.0, 0.5], [0.3, 0.2]] },
                HamiltonianSpec::default(),
                0.4,
            ),
        ];
        for (i, m) in models.iter().enumerate() {
            let err = check_directional_derivatives(m, 7 + i as u64);
            assert!(err <= 1e-6, "model {i}: relative error {err}");
        }
    }

    #[test]
    fn jacobian_structure() {
        let g = Grid::new(12, 10).unwrap();
        let model = aggregation();
        let a = assemble_jacobian(&StateVector::trivial(g, 1.0, &model), 1.0, &model).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = assemble_jacobian(&random_state(g, 1.0, &model, &mut rng, 0.2), 1.0, &model).unwrap();
        assert!(a.same_pattern(&b));
        assert!(a.max_row_nnz() <= 13);
        assert_eq!(a.n, g.n_unknowns());
    }

    #[test]
    fn linear_coupling_block() {
        let g = Grid::new(10, 10).unwrap();
        let mat = [[-1.5, 0.25], [0.75, 2.0]];
        let model = ModelSpec::new(CouplingSpec::ExplicitLinear { matrix: mat }, HamiltonianSpec::default(), SIGMA);
        let s = StateVector::zero_cost(g);
        let jac = assemble_jacobian(&s, 2.0, &model).unwrap();
        for pop in 0..2 {
            for n in 1..g.nt {
                for j in 0..g.np() {
                    let r = g.unknown_index(Field::value(pop), n, j).unwrap();
                    for q in 0..2 {
                        let c = g.unknown_index(Field::density(q), n, j).unwrap();
                        assert_eq!(jac.get(r, c), -mat[pop][q]);
                    }
                }
            }
        }
    }

    #[test]
    fn jacobian_commutes_with_reflection() {
        let g = Grid::new(16, 16).unwrap();
        let model = ModelSpec::new(CouplingSpec::schelling([5.0, 3.0], [0.7, 0.55]), HamiltonianSpec::default(), SIGMA);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = random_state(g, 0.9, &model, &mut rng, 0.2);
        let j = assemble_jacobian(&s, 0.9, &model).unwrap();
        let jr = assemble_jacobian(&s.reflected(), 0.9, &model).unwrap();
        let p = reflection_permutation(g);
        for r in 0..g.n_unknowns() {
            let (cols, vals) = j.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                let got = jr.get(p[r], p[c]);
                assert!((got - v).abs() <= 1e-12 * (1.0 + v.abs()), "({r},{c}): {v} vs {got}");
            }
        }
        let rr = assemble_residual(&s.reflected(), 0.9, &model).unwrap();
        let r = assemble_residual(&s, 0.9, &model).unwrap();
        for i in 0..r.len() {
            assert!((rr[p[i]] - r[i]).abs() <= 1e-12 * (1.0 + r[i].abs()));
        }
    }

    #[test]
    fn fp_rows_conserve_mass() {
        // Solve the FP rows exactly for a fixed random u (they are linear in m)
        // by marching in time, then check the mass.
        let g = Grid::new(16, 16).unwrap();
        let model = aggregation();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = random_state(g, 1.0, &model, &mut rng, 0.5);
        for n in 1..=g.nt {
            for pop in 0..2 {
                // Newton on the rows of this level only; they are affine in m^n.
                let rows: Vec<usize> = (0..g.np())
                    .map(|j| g.unknown_index(Field::density(pop), n, j).unwrap())
                    .collect();
                for _ in 0..2 {
                    let r = assemble_residual(&s, 1.0, &model).unwrap();
                    let jac = assemble_jacobian(&s, 1.0, &model).unwrap();
                    let np = g.np();
                    let mut a = vec![vec![0.0; np + 1]; np];
                    for (ri, &row) in rows.iter().enumerate() {
                        for (ci, &col) in rows.iter().enumerate() {
                            a[ri][ci] = jac.get(row, col);
                        }
                        a[ri][np] = -r[row];
                    }
                    let dx = gauss(a);
                    for (j, d) in dx.iter().enumerate() {
                        let v = s.get(Field::density(pop), n, j);
                        s.set(Field::density(pop), n, j, v + d);
                    }
                }
            }
        }
        assert!(mass_drift(&s) <= 1e-12, "{}", mass_drift(&s));
        // A state that violates the FP rows generally does not conserve mass.
        let mut bad = s.clone();
        bad.set(Field::M1, 5, 3, 1.5);
        assert!(mass_drift(&bad) > 1e-3);
    }

    fn gauss(mut a: Vec<Vec<f64>>) -> Vec<f64> {
        let n = a.len();
        for c in 0..n {
            let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
            a.swap(c, p);
            for r in c + 1..n {
                let f = a[r][c] / a[c][c];
                for k in c..=n {
                    a[r][k] -= f * a[c][k];
                }
            }
        }
        let mut x = vec![0.0; n];
        for r in (0..n).rev() {
            let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
            x[r] = (a[r][n] - s) / a[r][r];
        }
        x
    }

    #[test]
    fn t_derivative_matches_differences() {
        let g = Grid::new(12, 12).unwrap();
        let model = aggregation();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = random_state(g, 1.1, &model, &mut rng, 0.3);
        let d = residual_t_derivative(&s, 1.1).unwrap();
        let e = 1e-6;
        let rp = assemble_residual(&s, 1.1 + e, &model).unwrap();
        let rm = assemble_residual(&s, 1.1 - e, &model).unwrap();
        for i in 0..d.len() {
            let fd = (rp[i] - rm[i]) / (2.0 * e);
            assert!((fd - d[i]).abs() <= 1e-5 * (1.0 + d[i].abs()));
        }
    }

    #[test]
    fn non_finite_state_is_rejected() {
        let g = Grid::new(8, 8).unwrap();
        let mut s = StateVector::zero_cost(g);
        s.set(Field::U1, 2, 2, f64::NAN);
        assert_eq!(
            assemble_residual(&s, 1.0, &aggregation()),
            Err(DiscretizationError::NonFiniteState)
        );
    }
}
