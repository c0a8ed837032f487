//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export takes plain numbers and returns either a `Float64Array` or a
//! JSON string, so the page needs no glue beyond the generated module.

use mfg_branches::{
    bifurcation_times, kernel_residual, neumann_eigenvalue, seed_branch, BifurcationPoint,
    ContinuationPolicy, EigenMode, Experiment, Field, Grid, ModelSpec,
};
use serde_json::json;
use wasm_bindgen::prelude::*;

fn preset(id: u32) -> Result<Experiment, JsError> {
    Experiment::from_id(id).ok_or_else(|| JsError::new(&format!("no experiment {id}")))
}

fn mode(nx: usize) -> EigenMode {
    if nx == 0 {
        EigenMode::Continuous
    } else {
        EigenMode::Discrete { nx }
    }
}

fn table(model: &ModelSpec, nx: usize, n_max: usize, k_max: usize) -> Result<Vec<BifurcationPoint>, JsError> {
    let tj = model.linearization().map_err(|e| JsError::new(&e.to_string()))?;
    bifurcation_times(&tj, model.sigma, mode(nx), n_max, k_max).map_err(|e| JsError::new(&e.to_string()))
}

/// Bifurcation table of a preset as a JSON array; `nx = 0` uses the exact
/// Laplacian eigenvalues.
#[wasm_bindgen]
pub fn bifurcation_table(experiment: u32, nx: usize, n_max: usize, k_max: usize) -> Result<String, JsError> {
    let points = table(&preset(experiment)?.seed_model(), nx, n_max, k_max)?;
    let rows: Vec<_> = points
        .iter()
        .map(|p| {
            json!({
                "n": p.n, "k": p.k, "lambda": p.lambda, "t_star": p.t_star,
                "omega": p.omega, "tau": p.tau, "resonant": p.resonant,
            })
        })
        .collect();
    Ok(serde_json::Value::Array(rows).to_string())
}

/// `sin(omega T + phi)` for mode `k` at `samples` evenly spaced horizons in
/// `(0, t_max]`; its zeros are the bifurcation times.
#[wasm_bindgen]
pub fn kernel_curve(experiment: u32, k: usize, t_max: f64, samples: usize) -> Result<Vec<f64>, JsError> {
    let model = preset(experiment)?.seed_model();
    let tj = model.linearization().map_err(|e| JsError::new(&e.to_string()))?;
    let lambda = neumann_eigenvalue(k, EigenMode::Continuous).map_err(|e| JsError::new(&e.to_string()))?;
    (1..=samples)
        .map(|i| {
            let t = t_max * i as f64 / samples as f64;
            kernel_residual(t, lambda, tj.a1(), model.sigma).map_err(|e| JsError::new(&e.to_string()))
        })
        .collect()
}

/// Finds a point on branch `(n, 1)` just past its bifurcation on an
/// `nx x nx` grid. Returns JSON with the horizon, Newton iterations and both
/// density fields, row-major by time level.
#[wasm_bindgen]
pub fn branch_point(experiment: u32, n: usize, nx: usize) -> Result<String, JsError> {
    let model = preset(experiment)?.seed_model();
    let bp = table(&model, nx, n, 1)?
        .into_iter()
        .find(|p| p.n == n)
        .ok_or_else(|| JsError::new(&format!("no branch n = {n}")))?;
    let grid = Grid::new(nx, nx).map_err(|e| JsError::new(&e.to_string()))?;
    let p = seed_branch(&bp, 0.1, &model, grid, &ContinuationPolicy::default())
        .map_err(|e| JsError::new(&e.to_string()))?;
    let state = p.state.as_ref().expect("seed keeps its state");
    Ok(json!({
        "t": p.t,
        "t_star": bp.t_star,
        "levels": nx + 1,
        "nodes": grid.np(),
        "newton_iters": p.newton_iters,
        "sup_norm_m1": p.sup_norm_m1,
        "sup_norm_m2": p.sup_norm_m2,
        "m1": state.field(Field::M1),
        "m2": state.field(Field::M2),
    })
    .to_string())
}
