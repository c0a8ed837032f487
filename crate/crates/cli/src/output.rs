//! CSV and manifest writers. Numbers are written with 17 significant digits
//! so files round-trip exactly.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use mfg_branches::{BranchPoint, Field, StateVector};

pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

pub const BRANCH_HEADER: &str = "T,sup_norm_m1,sup_norm_m2,newton_iters,fold_flag";

pub fn branch_csv<'a>(points: impl IntoIterator<Item = &'a BranchPoint>) -> String {
    let mut s = String::from(BRANCH_HEADER);
    s.push('\n');
    for p in points {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            num(p.t),
            num(p.sup_norm_m1),
            num(p.sup_norm_m2),
            p.newton_iters,
            u8::from(p.fold_flag)
        );
    }
    s
}

/// One field of a state: a `Nx,Nt,T,field` header, the matching values, then
/// one row per time level with one column per space node.
pub fn field_csv(state: &StateVector, t: f64, field: Field) -> String {
    let g = state.grid();
    let mut s = format!("Nx,Nt,T,field\n{},{},{},{}\n", g.nx, g.nt, num(t), field.name());
    for n in 0..=g.nt {
        let row: Vec<String> = state.level(field, n).iter().map(|&v| num(v)).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Writes all four fields of `state` as `{stem}_{field}.csv` and returns the
/// file names.
pub fn dump_fields(dir: &Path, stem: &str, state: &StateVector, t: f64) -> io::Result<Vec<String>> {
    let mut names = Vec::new();
    for f in Field::ALL {
        let name = format!("{stem}_{}.csv", f.name());
        fs::write(dir.join(&name), field_csv(state, t, f))?;
        names.push(name);
    }
    Ok(names)
}

/// Parsed branch file, as `(T, sup_norm_m1, sup_norm_m2, newton_iters, fold_flag)`.
pub type BranchRow = (f64, f64, f64, usize, bool);

pub fn parse_branch_csv(text: &str) -> Option<Vec<BranchRow>> {
    let mut lines = text.lines();
    if lines.next()? != BRANCH_HEADER {
        return None;
    }
    lines
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            if c.len() != 5 {
                return None;
            }
            Some((
                c[0].parse().ok()?,
                c[1].parse().ok()?,
                c[2].parse().ok()?,
                c[3].parse().ok()?,
                match c[4] {
                    "1" => true,
                    "0" => false,
                    _ => return None,
                },
            ))
        })
        .collect()
}

/// Parsed field file: grid sizes, horizon, field name and the value rows.
pub fn parse_field_csv(text: &str) -> Option<(usize, usize, f64, String, Vec<Vec<f64>>)> {
    let mut lines = text.lines();
    if lines.next()? != "Nx,Nt,T,field" {
        return None;
    }
    let meta: Vec<&str> = lines.next()?.split(',').collect();
    if meta.len() != 4 {
        return None;
    }
    let rows = lines
        .map(|l| l.split(',').map(|v| v.parse().ok()).collect::<Option<Vec<f64>>>())
        .collect::<Option<Vec<_>>>()?;
    Some((meta[0].parse().ok()?, meta[1].parse().ok()?, meta[2].parse().ok()?, meta[3].to_string(), rows))
}

/// Pretty JSON with keys in sorted order.
pub fn write_json(path: &Path, value: &serde_json::Value) -> io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    text.push('\n');
    fs::write(path, text)
}
