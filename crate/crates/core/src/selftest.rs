//! Quick invariant checks on small grids, run by `qflow selftest`.

use std::f64::consts::PI;

use crate::bubbles::{bubble_mass, Bubble, CRITICAL_CURVATURE};
use crate::elliptic::{newton_solve, DEFAULT_TOL};
use crate::energy::{conformal_volume, energy, energy_gradient, ProblemData};
use crate::flow::{step, FlowOptions, FlowState};
use crate::grid::{forward_transform, inner_product, inverse_transform, make_grid, ScalarField};
use crate::io::field::{decode_field, encode_field};
use crate::operators::{paneitz, solve_paneitz};
use crate::synth::{cosine_datum, smooth_random_field};

pub type Check = fn() -> std::result::Result<(), String>;

fn ensure(ok: bool, what: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(what())
    }
}

fn fft_round_trip() -> std::result::Result<(), String> {
    let g = make_grid(8, 1.0).map_err(|e| e.to_string())?;
    let u = smooth_random_field(g, 1, 3, 1.0);
    let back = inverse_transform(&forward_transform(&u)).map_err(|e| e.to_string())?;
    let err = back.max_abs_diff(&u);
    ensure(err <= 1e-13, || format!("round-trip error {err:.3e}"))
}

fn bilaplacian_of_cosine() -> std::result::Result<(), String> {
    let g = make_grid(16, 2.0).map_err(|e| e.to_string())?;
    let mode = [1, -2, 0, 3];
    let u = cosine_datum(g, 1.0, 1.0, mode).add_scalar(-1.0);
    let k2: f64 = mode.iter().map(|&m| g.wavenumber(m).powi(2)).sum();
    let expected = u.map(|v| k2 * k2 * v);
    let err = paneitz(&u).max_abs_diff(&expected) / (k2 * k2);
    ensure(err <= 1e-12, || format!("relative error {err:.3e}"))
}

fn inverse_solve() -> std::result::Result<(), String> {
    let g = make_grid(8, 1.0).map_err(|e| e.to_string())?;
    let u = smooth_random_field(g, 2, 2, 1.0);
    let u = u.add_scalar(-u.mean());
    let v = solve_paneitz(&paneitz(&u), 0.0).map_err(|e| e.to_string())?;
    let err = v.max_abs_diff(&u);
    ensure(err <= 1e-11, || format!("error {err:.3e}"))
}

fn gradient_matches_difference_quotient() -> std::result::Result<(), String> {
    let g = make_grid(8, 1.0).map_err(|e| e.to_string())?;
    let p = ProblemData::new(cosine_datum(g, 10.0, 0.3, [1, 0, 0, 0]));
    let u = smooth_random_field(g, 3, 2, 0.2);
    let v = smooth_random_field(g, 4, 2, 1.0);
    let e = |s: f64| -> std::result::Result<f64, String> {
        let w = u.zip_map(&v, |a, b| a + s * b).map_err(|e| e.to_string())?;
        Ok(energy(&w, &p).map_err(|e| e.to_string())?.total)
    };
    let h = 1e-4;
    let fd = (8.0 * (e(h)? - e(-h)?) - (e(2.0 * h)? - e(-2.0 * h)?)) / (12.0 * h);
    let grad = energy_gradient(&u, &p).map_err(|e| e.to_string())?;
    let exact = inner_product(&grad, &v);
    let err = (fd - exact).abs() / exact.abs().max(1.0);
    ensure(err <= 1e-6, || format!("difference quotient {fd}, gradient pairing {exact}"))
}

fn constant_is_stationary() -> std::result::Result<(), String> {
    let g = make_grid(8, 1.0).map_err(|e| e.to_string())?;
    let p = ProblemData::new(ScalarField::constant(g, 10.0));
    let u = ScalarField::zeros(g);
    let grad = energy_gradient(&u, &p).map_err(|e| e.to_string())?.max_abs();
    let state = FlowState::new(u.clone(), p, 1e-3).map_err(|e| e.to_string())?;
    let moved = step(&state, &FlowOptions::default()).map_err(|e| e.to_string())?.state.u.max_abs_diff(&u);
    ensure(grad <= 1e-12 && moved <= 1e-12, || format!("gradient {grad:.3e}, step moved {moved:.3e}"))
}

fn flow_step_dissipates() -> std::result::Result<(), String> {
    let g = make_grid(8, 1.0).map_err(|e| e.to_string())?;
    let p = ProblemData::new(ScalarField::constant(g, 10.0));
    let u = smooth_random_field(g, 5, 1, 0.2);
    let state = FlowState::new(u, p, 1e-4).map_err(|e| e.to_string())?;
    let v0 = state.conformal_volume();
    let r = step(&state, &FlowOptions::default()).map_err(|e| e.to_string())?;
    let v1 = conformal_volume(&r.state.u).map_err(|e| e.to_string())?;
    ensure(r.energy_after < r.energy_before && (v1 / v0 - 1.0).abs() <= 1e-12, || {
        format!("energy {} -> {}, volume {v0} -> {v1}", r.energy_before, r.energy_after)
    })
}

fn newton_converges_on_cosine() -> std::result::Result<(), String> {
    let g = make_grid(8, 1.0).map_err(|e| e.to_string())?;
    let p = ProblemData::new(cosine_datum(g, 10.0, 0.3, [1, 0, 0, 0]));
    let sol = newton_solve(&p, &ScalarField::zeros(g), DEFAULT_TOL, 30).map_err(|e| e.to_string())?;
    ensure(sol.converged, || format!("residual history {:?}", sol.history))
}

fn bubble_mass_identity() -> std::result::Result<(), String> {
    let b = Bubble::new([0.0; 4], 3.0, CRITICAL_CURVATURE).map_err(|e| e.to_string())?;
    let total = bubble_mass(&b, f64::INFINITY);
    let near = bubble_mass(&b, 1e6);
    ensure((total - 1.0).abs() <= 1e-14 && (near - 1.0).abs() <= 1e-10, || {
        format!("total {total}, mass within 1e6 {near}")
    })
}

fn field_file_round_trip() -> std::result::Result<(), String> {
    let g = make_grid(8, PI).map_err(|e| e.to_string())?;
    let u = smooth_random_field(g, 6, 3, 2.0);
    let back = decode_field(&encode_field(&u)).map_err(|e| e.to_string())?;
    ensure(back == u && back.grid() == u.grid(), || "decoded field differs".into())
}

pub const CHECKS: [(&str, Check); 9] = [
    ("fft_round_trip", fft_round_trip),
    ("bilaplacian_of_cosine", bilaplacian_of_cosine),
    ("inverse_solve", inverse_solve),
    ("gradient_matches_difference_quotient", gradient_matches_difference_quotient),
    ("constant_is_stationary", constant_is_stationary),
    ("flow_step_dissipates", flow_step_dissipates),
    ("newton_converges_on_cosine", newton_converges_on_cosine),
    ("bubble_mass_identity", bubble_mass_identity),
    ("field_file_round_trip", field_file_round_trip),
];

/// Runs every check, returning `(name, outcome)` in order.
pub fn run_all() -> Vec<(&'static str, std::result::Result<(), String>)> {
    CHECKS.iter().map(|(name, check)| (*name, check())).collect()
}
