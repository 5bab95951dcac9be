//! Newton solver for the stationary equation `P₀u + f = k e^{4u}` under the
//! normalization `∫e^{4u} = 1`, and warm-started continuation in `k`.
//!
//! Newton iterates on the translation-invariant residual
//! `g(u) = P₀u + f - k e^{4u} / ∫e^{4u}` (the L² gradient of the energy),
//! which coincides with the equation residual once `u` is normalized. Its
//! Jacobian is the energy Hessian
//! `H v = P₀v - 4kρv + 4kρ ∫ρv`, `ρ = e^{4u}/∫e^{4u}`,
//! symmetric with the constants as kernel; it is inverted on mean-zero
//! fields by conjugate gradients preconditioned with `(P₀ + σ)⁻¹`,
//! `σ = 4k·mean(e^{4u})`. After each step `u` is shifted back to unit
//! conformal volume.

use crate::energy::{energy_gradient, normalize, normalized_density, ProblemData};
use crate::error::{Error, Result};
use crate::grid::{integrate, ScalarField};
use crate::krylov::{dot, pcg, remove_mean, spectral_multiply};

pub const DEFAULT_TOL: f64 = 1e-9;
const INNER_REL_TOL: f64 = 1e-12;
const INNER_MAX_ITER: usize = 500;

#[derive(Clone, Debug)]
pub struct EllipticSolution {
    pub u: ScalarField,
    pub p: ProblemData,
    /// `max |P₀u + f - k e^{4u}|`
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Residual max-norm before each Newton step and after the last one.
    pub history: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ContinuationBranch {
    pub k_values: Vec<f64>,
    pub solutions: Vec<EllipticSolution>,
    pub max_u_trace: Vec<f64>,
    /// First requested `k` at which Newton failed even after bisection.
    pub truncated_at: Option<f64>,
}

fn hessian_apply(u_density: &[f64], k: f64, cell: f64, grid: &crate::grid::TorusGrid, v: &[f64]) -> Vec<f64> {
    let pv = spectral_multiply(grid, v, |k2| k2 * k2);
    let rho_v = cell * dot(u_density, v);
    pv.iter()
        .zip(v)
        .zip(u_density)
        .map(|((p, x), r)| p - 4.0 * k * r * x + 4.0 * k * r * rho_v)
        .collect()
}

/// One damped Newton direction for the normalized equation.
fn newton_direction(u: &ScalarField, p: &ProblemData, grad: &ScalarField) -> Result<Vec<f64>> {
    let grid = *u.grid();
    let cell = grid.cell_volume();
    let density = normalized_density(u);
    let rho = density.values().to_vec();
    let k = p.k;
    // mean(e^{4u}) of the normalized state is 1/|M|
    let sigma = (4.0 * k * density.mean()).max(f64::MIN_POSITIVE);
    let rhs: Vec<f64> = grad.values().iter().map(|g| -g).collect();
    let out = pcg(
        &rhs,
        |v| hessian_apply(&rho, k, cell, &grid, v),
        |r| spectral_multiply(&grid, r, |k2| 1.0 / (k2 * k2 + sigma)),
        INNER_REL_TOL,
        INNER_MAX_ITER,
        Some(remove_mean),
    )?;
    Ok(out.x)
}

pub fn newton_solve(
    p: &ProblemData,
    u_init: &ScalarField,
    tol: f64,
    max_iter: usize,
) -> Result<EllipticSolution> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    if u_init.grid() != p.grid() {
        return Err(Error::GridMismatch);
    }
    let mut u = normalize(u_init)?;
    let mut grad = energy_gradient(&u, p)?;
    let mut res = grad.max_abs();
    let mut history = vec![res];
    let mut iterations = 0;
    while res > tol && iterations < max_iter {
        let dir = newton_direction(&u, p, &grad)?;
        let mut alpha = 1.0;
        let (next, next_grad, next_res) = loop {
            let trial = ScalarField::from_raw(
                *u.grid(),
                u.values().iter().zip(&dir).map(|(a, d)| a + alpha * d).collect(),
            );
            let trial = normalize(&trial)?;
            let tg = energy_gradient(&trial, p)?;
            let tr = tg.max_abs();
            if tr < res || alpha < 1.0 / 64.0 {
                break (trial, tg, tr);
            }
            alpha *= 0.5;
        };
        iterations += 1;
        if !(next_res < res) {
            // no descent even with a short step: keep the best iterate
            history.push(next_res);
            break;
        }
        u = next;
        grad = next_grad;
        res = next_res;
        history.push(res);
    }
    Ok(EllipticSolution {
        u,
        p: p.clone(),
        residual_norm: res,
        iterations,
        converged: res <= tol,
        history,
    })
}

/// Solves for each `k` in increasing order with datum `k · f_shape`,
/// warm-starting from the previous solution. A failed `k` is approached by
/// bisecting the gap from the last success; if that also fails the branch
/// is truncated there.
pub fn continuation(
    f_shape: &ScalarField,
    k_list: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<ContinuationBranch> {
    let mass = integrate(f_shape);
    if (mass - 1.0).abs() > 1e-8 {
        return Err(Error::InvalidArgument(format!("datum shape must integrate to 1, got {mass}")));
    }
    if k_list.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument("k values must be strictly increasing".into()));
    }
    const MAX_BISECTIONS: usize = 6;
    let grid = *f_shape.grid();
    let mut branch = ContinuationBranch {
        k_values: Vec::new(),
        solutions: Vec::new(),
        max_u_trace: Vec::new(),
        truncated_at: None,
    };
    let mut warm = ScalarField::zeros(grid);
    let mut last_k: Option<f64> = None;
    let solve_at = |k: f64, start: &ScalarField| -> Option<EllipticSolution> {
        let p = ProblemData::new(f_shape.map(|v| k * v));
        match newton_solve(&p, start, tol, max_iter) {
            Ok(sol) if sol.converged => Some(sol),
            _ => None,
        }
    };
    for &k in k_list {
        let mut solved = solve_at(k, &warm);
        if let (None, Some(k0)) = (&solved, last_k) {
            // walk towards k, halving the stride after each failure
            let mut start = warm.clone();
            let mut lo = k0;
            let mut stride = 0.5 * (k - k0);
            let mut failures = 0;
            while failures <= MAX_BISECTIONS {
                let target = (lo + stride).min(k);
                match solve_at(target, &start) {
                    Some(s) if target >= k => {
                        solved = Some(s);
                        break;
                    }
                    Some(s) => {
                        start = s.u;
                        lo = target;
                    }
                    None => {
                        stride *= 0.5;
                        failures += 1;
                    }
                }
            }
        }
        match solved {
            Some(sol) => {
                warm = sol.u.clone();
                last_k = Some(k);
                branch.k_values.push(k);
                branch.max_u_trace.push(sol.u.max());
                branch.solutions.push(sol);
            }
            None => {
                branch.truncated_at = Some(k);
                break;
            }
        }
    }
    Ok(branch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::conformal_volume;
    use crate::grid::make_grid;
    use crate::operators::solve_paneitz;
    use crate::synth::{cosine_datum, peaked_shape, smooth_random_field};

    #[test]
    fn constant_datum_is_solved_immediately() {
        let g = make_grid(8, 1.0).unwrap();
        let p = ProblemData::new(ScalarField::constant(g, 10.0));
        let sol = newton_solve(&p, &ScalarField::zeros(g), DEFAULT_TOL, 20).unwrap();
        assert!(sol.converged);
        assert!(sol.iterations <= 1);
        assert!(sol.residual_norm < 1e-12);
        assert!(sol.u.max_abs() < 1e-14);
    }

    #[test]
    fn cosine_datum_converges_quadratically() {
        let g = make_grid(16, 1.0).unwrap();
        let p = ProblemData::new(cosine_datum(g, 10.0, 0.3, [1, 0, 0, 0]));
        let sol = newton_solve(&p, &ScalarField::zeros(g), DEFAULT_TOL, 20).unwrap();
        assert!(sol.converged, "{:?}", sol.history);
        assert!((conformal_volume(&sol.u).unwrap() - 1.0).abs() <= 1e-10);
        let eq = crate::operators::paneitz(&sol.u)
            .zip_map(&p.f, |a, b| a + b)
            .unwrap()
            .zip_map(&sol.u, |a, u| a - p.k * (4.0 * u).exp())
            .unwrap();
        assert!(eq.max_abs() <= 1e-9);
        assert!(integrate(&eq).abs() <= 1e-8);
        for w in sol.history.windows(2) {
            if w[0] < 1e-3 && w[1] > 0.0 && w[1] > 1e-13 {
                assert!(w[1] / w[0] <= 0.3, "{:?}", sol.history);
            }
        }
    }

    #[test]
    fn zero_total_curvature_reduces_to_linear_solve() {
        let g = make_grid(16, 1.0).unwrap();
        let f = smooth_random_field(g, 12, 2, 5.0);
        let f = f.add_scalar(-f.mean());
        let p = ProblemData::new(f.clone());
        let sol = newton_solve(&p, &ScalarField::zeros(g), DEFAULT_TOL, 20).unwrap();
        assert!(sol.converged);
        let lin = solve_paneitz(&f.map(|v| -v), 0.0).unwrap();
        let lin = normalize(&lin).unwrap();
        assert!(sol.u.max_abs_diff(&lin) < 1e-10);
    }

    #[test]
    fn non_convergence_returns_best_iterate() {
        let g = make_grid(8, 1.0).unwrap();
        let p = ProblemData::new(cosine_datum(g, 10.0, 0.5, [1, 1, 0, 0]));
        let sol = newton_solve(&p, &ScalarField::zeros(g), 1e-14, 1).unwrap();
        assert!(!sol.converged);
        assert_eq!(sol.iterations, 1);
        assert!(sol.residual_norm < sol.history[0]);
    }

    #[test]
    fn invalid_tolerance_rejected() {
        let g = make_grid(8, 1.0).unwrap();
        let p = ProblemData::new(ScalarField::constant(g, 10.0));
        assert!(newton_solve(&p, &ScalarField::zeros(g), 0.0, 5).is_err());
    }

    #[test]
    fn single_k_continuation_matches_newton() {
        let g = make_grid(8, 1.0).unwrap();
        let shape = peaked_shape(g, 0.5);
        let branch = continuation(&shape, &[10.0], DEFAULT_TOL, 30).unwrap();
        assert_eq!(branch.solutions.len(), 1);
        let p = ProblemData::new(shape.map(|v| 10.0 * v));
        let direct = newton_solve(&p, &ScalarField::zeros(g), DEFAULT_TOL, 30).unwrap();
        assert_eq!(branch.solutions[0].u, direct.u);
    }

    #[test]
    fn continuation_validates_inputs() {
        let g = make_grid(8, 1.0).unwrap();
        let shape = peaked_shape(g, 0.5);
        assert!(continuation(&shape, &[10.0, 5.0], DEFAULT_TOL, 30).is_err());
        assert!(continuation(&shape.map(|v| 2.0 * v), &[10.0], DEFAULT_TOL, 30).is_err());
    }

    #[test]
    fn uniform_continuation_stays_bounded() {
        let g = make_grid(8, 1.0).unwrap();
        let shape = ScalarField::constant(g, 1.0);
        let branch = continuation(&shape, &[10.0, 50.0, 100.0], DEFAULT_TOL, 30).unwrap();
        assert_eq!(branch.solutions.len(), 3);
        assert!(branch.truncated_at.is_none());
        assert!(branch.max_u_trace.iter().all(|m| m.abs() <= 5.0));
    }
}
