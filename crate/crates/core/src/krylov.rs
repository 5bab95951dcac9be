//! Preconditioned conjugate gradients and spectral multipliers shared by the
//! elliptic and flow solvers.

use crate::error::{Error, Result};
use crate::grid::{forward_transform, inverse_unchecked, pairwise_sum, ScalarField, TorusGrid};

pub(crate) struct CgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let prod: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    pairwise_sum(&prod)
}

/// Applies `symbol(|κ|²)` to a real grid vector.
pub(crate) fn spectral_multiply(grid: &TorusGrid, v: &[f64], symbol: impl Fn(f64) -> f64) -> Vec<f64> {
    let field = ScalarField::from_raw(*grid, v.to_vec());
    let mut spec = forward_transform(&field);
    spec.apply_radial_symbol(symbol);
    inverse_unchecked(spec).into_values()
}

pub(crate) fn remove_mean(v: &mut [f64]) {
    let m = pairwise_sum(v) / v.len() as f64;
    for x in v.iter_mut() {
        *x -= m;
    }
}

/// Solves `A x = b` for symmetric positive definite `A` (on the subspace
/// preserved by `project`, when given), starting from zero.
pub(crate) fn pcg(
    b: &[f64],
    mut apply: impl FnMut(&[f64]) -> Vec<f64>,
    mut precond: impl FnMut(&[f64]) -> Vec<f64>,
    rel_tol: f64,
    max_iter: usize,
    project: Option<fn(&mut [f64])>,
) -> Result<CgOutcome> {
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    if let Some(pr) = project {
        pr(&mut r);
    }
    let b_norm = dot(&r, &r).sqrt();
    if b_norm == 0.0 {
        return Ok(CgOutcome { x, iterations: 0 });
    }
    let mut z = precond(&r);
    if let Some(pr) = project {
        pr(&mut z);
    }
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut history = vec![1.0];
    for it in 1..=max_iter {
        let ap = apply(&p);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::LinearSolveStagnation { iterations: it, history });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if let Some(pr) = project {
            pr(&mut r);
        }
        let rel = dot(&r, &r).sqrt() / b_norm;
        history.push(rel);
        if rel <= rel_tol {
            if let Some(pr) = project {
                pr(&mut x);
            }
            return Ok(CgOutcome { x, iterations: it });
        }
        z = precond(&r);
        if let Some(pr) = project {
            pr(&mut z);
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::LinearSolveStagnation { iterations: max_iter, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;

    #[test]
    fn pcg_solves_shifted_bilaplacian_with_variable_diagonal() {
        let g = make_grid(8, 1.0).unwrap();
        let d: Vec<f64> = (0..g.total_points()).map(|i| 1.0 + 0.5 * ((i % 7) as f64 / 7.0)).collect();
        let apply = |v: &[f64]| {
            let pv = spectral_multiply(&g, v, |k2| 1e-3 * k2 * k2);
            pv.iter().zip(v).zip(&d).map(|((a, b), c)| a + c * b).collect::<Vec<f64>>()
        };
        let b: Vec<f64> = (0..g.total_points()).map(|i| ((i * 31) % 17) as f64 - 8.0).collect();
        let out = pcg(&b, apply, |r| spectral_multiply(&g, r, |k2| 1.0 / (1.2 + 1e-3 * k2 * k2)), 1e-12, 200, None)
            .unwrap();
        let ax = apply(&out.x);
        let err: f64 = ax.iter().zip(&b).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn pcg_reports_indefinite_operator() {
        let b = vec![1.0, 2.0, 3.0];
        let res = pcg(&b, |v| v.iter().map(|x| -x).collect(), |r| r.to_vec(), 1e-12, 10, None);
        assert!(matches!(res, Err(Error::LinearSolveStagnation { .. })));
    }
}
