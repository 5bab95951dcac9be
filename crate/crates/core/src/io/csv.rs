//! Diagnostics tables. Floats are written with 17 significant digits so the
//! text round-trips to the same bits.

use std::fmt::Write as _;
use std::path::Path;

use crate::elliptic::ContinuationBranch;
use crate::energy::{energy, DiagnosticsRow};
use crate::error::Result;
use crate::io::field::write_atomic;

pub const TRAJECTORY_HEADER: &str =
    "t,energy,volume,raw_volume_drift,sublevel_volume,Y,max_u,min_u,dt,residual";
pub const BRANCH_HEADER: &str = "k,energy,max_u,min_u,residual,newton_iterations,converged";

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn trajectory_csv(rows: &[DiagnosticsRow]) -> String {
    let mut out = String::with_capacity(256 * (rows.len() + 1));
    out.push_str(TRAJECTORY_HEADER);
    out.push('\n');
    for r in rows {
        let cells = [
            r.t,
            r.energy,
            r.conformal_volume,
            r.raw_volume_drift,
            r.sublevel_volume,
            r.y,
            r.max_u,
            r.min_u,
            r.dt,
            r.residual_norm,
        ];
        let line: Vec<String> = cells.iter().map(|&c| num(c)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn emit_diagnostics(rows: &[DiagnosticsRow], path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), trajectory_csv(rows).as_bytes())
}

pub fn branch_csv(branch: &ContinuationBranch) -> Result<String> {
    let mut out = String::new();
    out.push_str(BRANCH_HEADER);
    out.push('\n');
    for (k, sol) in branch.k_values.iter().zip(&branch.solutions) {
        let e = energy(&sol.u, &sol.p)?.total;
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            num(*k),
            num(e),
            num(sol.u.max()),
            num(sol.u.min()),
            num(sol.residual_norm),
            sol.iterations,
            sol.converged
        )
        .expect("writing to a String");
    }
    Ok(out)
}

/// Parses a table written by this module back into rows of numbers.
pub fn read_table(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    use crate::error::Error;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Format("empty table".into()))?
        .split(',')
        .map(str::to_owned)
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let row: std::result::Result<Vec<f64>, _> = line
            .split(',')
            .map(|c| match c {
                "true" => Ok(1.0),
                "false" => Ok(0.0),
                c => c.parse::<f64>(),
            })
            .collect();
        let row = row.map_err(|e| Error::Format(format!("line {}: {e}", i + 2)))?;
        if row.len() != header.len() {
            return Err(Error::Format(format!(
                "line {}: {} cells, header has {}",
                i + 2,
                row.len(),
                header.len()
            )));
        }
        rows.push(row);
    }
    Ok((header, rows))
}
