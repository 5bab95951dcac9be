//! The Q-curvature functional, its L² gradient, conformal volume, the Adams
//! deficit and the sublevel/Y diagnostics monitored along the flow.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::grid::{integrate, pairwise_sum, ScalarField, TorusGrid};
use crate::operators::{paneitz, paneitz_form};

/// Above this value of `4 max u` exponential integrals are evaluated with a
/// max shift.
const SHIFT_THRESHOLD: f64 = 300.0;
/// Largest representable `log` of a conformal volume.
const LOG_OVERFLOW: f64 = 709.0;

/// Datum `f` together with its cached total curvature `k = ∫f`.
#[derive(Clone, Debug)]
pub struct ProblemData {
    pub f: ScalarField,
    pub k: f64,
}

impl ProblemData {
    pub fn new(f: ScalarField) -> Self {
        let k = total_curvature(&f);
        Self { f, k }
    }

    pub fn grid(&self) -> &TorusGrid {
        self.f.grid()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyReport {
    pub total: f64,
    /// `½∫P₀u·u`
    pub quadratic: f64,
    /// `∫fu`
    pub linear: f64,
    /// `(k/4) log ∫e^{4u}`
    pub log_term: f64,
    pub conformal_volume: f64,
}

/// Monitored quantities of one flow snapshot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiagnosticsRow {
    pub t: f64,
    pub energy: f64,
    pub conformal_volume: f64,
    /// Volume drift of the last step before renormalization.
    pub raw_volume_drift: f64,
    pub sublevel_volume: f64,
    pub y: f64,
    pub max_u: f64,
    pub min_u: f64,
    pub dt: f64,
    pub residual_norm: f64,
}

pub fn total_curvature(f: &ScalarField) -> f64 {
    integrate(f)
}

/// `log ∫ e^{4u} dV`, finite for every finite field.
pub fn log_conformal_volume(u: &ScalarField) -> f64 {
    let shift = 4.0 * u.max();
    let w: Vec<f64> = u.values().iter().map(|&v| (4.0 * v - shift).exp()).collect();
    shift + (u.grid().cell_volume() * pairwise_sum(&w)).ln()
}

/// `∫ e^{4u} dV` evaluated pointwise on the grid.
pub fn conformal_volume(u: &ScalarField) -> Result<f64> {
    let top = 4.0 * u.max();
    if top <= SHIFT_THRESHOLD {
        let w: Vec<f64> = u.values().iter().map(|&v| (4.0 * v).exp()).collect();
        return Ok(u.grid().cell_volume() * pairwise_sum(&w));
    }
    let log_v = log_conformal_volume(u);
    if log_v > LOG_OVERFLOW {
        return Err(Error::Overflow { max_u: u.max() });
    }
    Ok(log_v.exp())
}

/// The density `e^{4u} / ∫e^{4u}`, which integrates to one.
pub fn normalized_density(u: &ScalarField) -> ScalarField {
    let shift = 4.0 * u.max();
    let w = u.map(|v| (4.0 * v - shift).exp());
    let total = integrate(&w);
    w.map(|v| v / total)
}

/// `u - ¼ log ∫e^{4u}`, whose conformal volume is one.
pub fn normalize(u: &ScalarField) -> Result<ScalarField> {
    if !u.is_finite() {
        return Err(Error::Overflow { max_u: u.max() });
    }
    let shift = 0.25 * log_conformal_volume(u);
    Ok(u.add_scalar(-shift))
}

pub fn energy(u: &ScalarField, p: &ProblemData) -> Result<EnergyReport> {
    let conformal_volume = conformal_volume(u)?;
    let quadratic = 0.5 * paneitz_form(u);
    let linear = crate::grid::inner_product(&p.f, u);
    let log_term = 0.25 * p.k * log_conformal_volume(u);
    Ok(EnergyReport {
        total: quadratic + linear - log_term,
        quadratic,
        linear,
        log_term,
        conformal_volume,
    })
}

/// The L² gradient `P₀u + f - k e^{4u} / ∫e^{4u}`.
pub fn energy_gradient(u: &ScalarField, p: &ProblemData) -> Result<ScalarField> {
    if !u.is_finite() {
        return Err(Error::Overflow { max_u: u.max() });
    }
    let pu = paneitz(u);
    let density = normalized_density(u);
    let k = p.k;
    let mut out = pu;
    for ((o, f), d) in out.values_mut().iter_mut().zip(p.f.values()).zip(density.values()) {
        *o += f - k * d;
    }
    Ok(out)
}

/// `log ∫e^{4(u-ū)} - (1/4π²) ∫P₀u·u`, bounded above uniformly in `u`.
pub fn adams_deficit(u: &ScalarField) -> f64 {
    let mean = u.mean();
    log_conformal_volume(&u.add_scalar(-mean)) - paneitz_form(u) / (4.0 * PI * PI)
}

/// `(|A_t|, Y)` with `A_t = {u >= α₀}`, `α₀ = ¼ log(V_ref / (2L⁴))` and
/// `Y = ∫u e^{4u}`.
pub fn sublevel_diagnostics(u: &ScalarField, reference_volume: f64) -> Result<(f64, f64)> {
    if !(reference_volume > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "reference volume must be positive, got {reference_volume}"
        )));
    }
    let grid = u.grid();
    let alpha0 = sublevel_threshold(grid, reference_volume);
    let count = u.values().iter().filter(|&&v| v >= alpha0).count();
    let y: Vec<f64> = u.values().iter().map(|&v| v * (4.0 * v).exp()).collect();
    Ok((grid.cell_volume() * count as f64, grid.cell_volume() * pairwise_sum(&y)))
}

pub fn sublevel_threshold(grid: &TorusGrid, reference_volume: f64) -> f64 {
    0.25 * (reference_volume / (2.0 * grid.volume())).ln()
}
