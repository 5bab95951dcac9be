//! Time integration of the Q-curvature flow
//! `∂ₜu = -½ e^{-4u}(P₀u + f) + ½ k / ∫e^{4u}`.
//!
//! Each step solves the linearly implicit system
//!
//! ```text
//! e^{4u} δ + (dt/2) P₀δ = -(dt/2)(P₀u + f) + (dt/2) k e^{4u} / V(u)
//! ```
//!
//! for the increment `δ` by preconditioned conjugate gradients and sets
//! `u⁺ = u + ¼ log(1 + 4δ)`. Integrating the system shows `∫e^{4u} δ = 0`,
//! so the logarithmic lift keeps `∫e^{4u⁺} = ∫e^{4u}(1 + 4δ)` equal to the
//! previous volume up to the linear-solver residual; to first order it is
//! the plain update `u + δ`.
//!
//! Steps are accepted when the energy does not increase and the energy
//! change agrees with the discrete dissipation `-2∫e^{4u_mid}(Δu/Δt)²Δt`
//! to a relative accuracy; otherwise `dt` is halved.

use std::fmt;

use crate::energy::{conformal_volume, sublevel_diagnostics, DiagnosticsRow, ProblemData};
use crate::error::{Error, Result};
use crate::grid::{pairwise_sum, ScalarField};
use crate::krylov::{dot, pcg, spectral_multiply, CgOutcome};

/// Largest `|4u|` for which `e^{±4u}` is formed pointwise.
const EXP_LIMIT: f64 = 700.0;
const INNER_MAX_ITER: usize = 300;
/// Fraction of the energy dissipated so far that a single step may
/// misaccount, relative to `accuracy_tol`.
const ACCURACY_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowOptions {
    pub dt_init: f64,
    pub dt_min: f64,
    pub dt_max: f64,
    pub t_end: f64,
    /// Allowed energy increase per accepted step; `None` means
    /// `1e-12·(1 + |E|)`.
    pub energy_tolerance: Option<f64>,
    pub volume_renormalize: bool,
    /// Relative residual of the inner linear solve.
    pub inner_tol: f64,
    pub diagnostics_stride: usize,
    /// Relative mismatch allowed between the energy change of a step and its
    /// discrete dissipation.
    pub accuracy_tol: f64,
    pub steady_tol: f64,
    pub steady_window: usize,
    /// Energy drop below `E(u₀)` that, with `max u > divergence_max_u`,
    /// declares divergence.
    pub divergence_drop: f64,
    pub divergence_max_u: f64,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self {
            dt_init: 1e-6,
            dt_min: 1e-12,
            dt_max: 1e-2,
            t_end: 1.0,
            energy_tolerance: None,
            volume_renormalize: true,
            inner_tol: 1e-10,
            diagnostics_stride: 1,
            accuracy_tol: 0.02,
            steady_tol: 1e-9,
            steady_window: 10,
            divergence_drop: 1e4,
            divergence_max_u: 50.0,
        }
    }
}

impl FlowOptions {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.dt_min > 0.0 && self.dt_min <= self.dt_init && self.dt_init <= self.dt_max) {
            return bad(format!(
                "need 0 < dt_min <= dt_init <= dt_max, got {}, {}, {}",
                self.dt_min, self.dt_init, self.dt_max
            ));
        }
        if !(self.t_end >= 0.0) || !self.t_end.is_finite() {
            return bad(format!("t_end must be finite and nonnegative, got {}", self.t_end));
        }
        if let Some(tol) = self.energy_tolerance {
            if !(tol >= 0.0) {
                return bad(format!("energy_tolerance must be nonnegative, got {tol}"));
            }
        }
        if !(self.inner_tol > 0.0 && self.inner_tol < 1.0) {
            return bad(format!("inner_tol must lie in (0, 1), got {}", self.inner_tol));
        }
        if self.diagnostics_stride == 0 || self.steady_window == 0 {
            return bad("diagnostics_stride and steady_window must be positive".into());
        }
        if !(self.accuracy_tol > 0.0) || !(self.steady_tol > 0.0) {
            return bad("accuracy_tol and steady_tol must be positive".into());
        }
        Ok(())
    }

    fn energy_tol(&self, energy: f64) -> f64 {
        self.energy_tolerance.unwrap_or(1e-12 * (1.0 + energy.abs()))
    }
}

/// Quantities of a state that every step needs.
#[derive(Clone, Debug)]
struct Cache {
    pu: Vec<f64>,
    energy: f64,
    volume: f64,
}

impl Cache {
    fn of(u: &ScalarField, p: &ProblemData) -> Result<Self> {
        check_exponent_range(u)?;
        let grid = u.grid();
        let pu = spectral_multiply(grid, u.values(), |k2| k2 * k2);
        let volume = conformal_volume(u)?;
        let cell = grid.cell_volume();
        let quadratic = 0.5 * cell * dot(&pu, u.values());
        let linear = cell * dot(p.f.values(), u.values());
        let energy = quadratic + linear - 0.25 * p.k * volume.ln();
        Ok(Self { pu, energy, volume })
    }

    fn rhs(&self, u: &ScalarField, p: &ProblemData) -> Vec<f64> {
        let mean_term = 0.5 * p.k / self.volume;
        u.values()
            .iter()
            .zip(&self.pu)
            .zip(p.f.values())
            .map(|((&v, &pu), &f)| -0.5 * (-4.0 * v).exp() * (pu + f) + mean_term)
            .collect()
    }
}

fn check_exponent_range(u: &ScalarField) -> Result<()> {
    if !u.is_finite() || 4.0 * u.max() > EXP_LIMIT || -4.0 * u.min() > EXP_LIMIT {
        return Err(Error::Overflow { max_u: u.max() });
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct FlowState {
    pub u: ScalarField,
    pub t: f64,
    /// Step size proposed for the next step.
    pub dt: f64,
    pub p: ProblemData,
    pub step_count: usize,
    /// Conformal volume that renormalization restores.
    pub reference_volume: f64,
    initial_energy: f64,
    cache: Cache,
}

impl FlowState {
    pub fn new(u: ScalarField, p: ProblemData, dt: f64) -> Result<Self> {
        if u.grid() != p.grid() {
            return Err(Error::GridMismatch);
        }
        let cache = Cache::of(&u, &p)?;
        Ok(Self {
            reference_volume: cache.volume,
            initial_energy: cache.energy,
            u,
            t: 0.0,
            dt,
            p,
            step_count: 0,
            cache,
        })
    }

    pub fn energy(&self) -> f64 {
        self.cache.energy
    }

    pub fn conformal_volume(&self) -> f64 {
        self.cache.volume
    }

    /// `max |∂ₜu|` at this state.
    pub fn residual_norm(&self) -> f64 {
        self.cache.rhs(&self.u, &self.p).iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Clone, Debug)]
pub struct StepReport {
    pub state: FlowState,
    pub energy_before: f64,
    pub energy_after: f64,
    /// `-2∫e^{4u_mid}(Δu/Δt)²Δt`
    pub dissipation: f64,
    /// `∫e^{4u⁺} - ∫e^{4u}` before renormalization.
    pub raw_volume_drift: f64,
    /// Step size actually taken.
    pub dt: f64,
    pub rejections: usize,
    /// Conjugate-gradient iterations of the accepted solve.
    pub inner_iterations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowOutcome {
    ReachedTEnd,
    ConvergedToSteady,
    EnergyDiverging,
    StepUnderflow,
}

impl FlowOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            FlowOutcome::ReachedTEnd => "reached_t_end",
            FlowOutcome::ConvergedToSteady => "converged_to_steady",
            FlowOutcome::EnergyDiverging => "energy_diverging",
            FlowOutcome::StepUnderflow => "step_underflow",
        }
    }
}

impl fmt::Display for FlowOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Running totals over the accepted steps of a trajectory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlowLedger {
    pub initial_energy: f64,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub inner_iterations: usize,
    /// Accepted steps whose energy rose by more than `1e-12·(1 + |E|)`.
    pub energy_increases: usize,
    /// `Σ 2∫e^{4u_mid}(Δu/Δt)²Δt`
    pub dissipation: f64,
    /// `Σ |raw volume drift|`
    pub absolute_volume_drift: f64,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub rows: Vec<DiagnosticsRow>,
    pub final_state: FlowState,
    pub outcome: FlowOutcome,
    pub ledger: FlowLedger,
}

impl Trajectory {
    pub fn energy_drop(&self) -> f64 {
        self.ledger.initial_energy - self.final_state.energy()
    }

    /// Raw volume drift per unit time relative to the initial volume.
    pub fn relative_drift_rate(&self) -> f64 {
        if self.final_state.t == 0.0 {
            return 0.0;
        }
        self.ledger.absolute_volume_drift / (self.final_state.t * self.final_state.reference_volume)
    }
}

pub fn flow_rhs(u: &ScalarField, p: &ProblemData) -> Result<ScalarField> {
    if u.grid() != p.grid() {
        return Err(Error::GridMismatch);
    }
    let cache = Cache::of(u, p)?;
    Ok(ScalarField::from_raw(*u.grid(), cache.rhs(u, p)))
}

/// `(ΔE, -2∫e^{4u_mid}(Δu/Δt)²Δt)` between two states of one trajectory.
pub fn dissipation_check(before: &FlowState, after: &FlowState) -> (f64, f64) {
    let delta_e = after.energy() - before.energy();
    (delta_e, dissipation_between(&before.u, &after.u, after.t - before.t))
}

fn dissipation_between(a: &ScalarField, b: &ScalarField, dt: f64) -> f64 {
    if dt <= 0.0 {
        return 0.0;
    }
    let terms: Vec<f64> = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| {
            let v = (y - x) / dt;
            (2.0 * (x + y)).exp() * v * v
        })
        .collect();
    -2.0 * a.grid().cell_volume() * pairwise_sum(&terms) * dt
}

enum Attempt {
    Accepted {
        state: FlowState,
        dissipation: f64,
        raw_drift: f64,
        mismatch_ratio: f64,
        inner_iterations: usize,
    },
    Rejected,
}

/// Solves the implicit system for the increment `δ`.
fn increment(state: &FlowState, dt: f64, inner_tol: f64) -> Result<CgOutcome> {
    let u = &state.u;
    let grid = *u.grid();
    let p = &state.p;
    let half = 0.5 * dt;
    let rho: Vec<f64> = u.values().iter().map(|v| (4.0 * v).exp()).collect();
    let scale: Vec<f64> = rho.iter().map(|r| r.sqrt().recip()).collect();
    let c = pairwise_sum(&rho.iter().map(|r| r.recip()).collect::<Vec<_>>()) / rho.len() as f64;
    let mean_term = half * p.k / state.cache.volume;
    let b: Vec<f64> = state
        .cache
        .pu
        .iter()
        .zip(p.f.values())
        .zip(&rho)
        .map(|((pu, f), r)| -half * (pu + f) + mean_term * r)
        .collect();
    let apply = |v: &[f64]| {
        let pv = spectral_multiply(&grid, v, |k2| k2 * k2);
        pv.iter().zip(v).zip(&rho).map(|((a, x), r)| r * x + half * a).collect::<Vec<f64>>()
    };
    let precond = |r: &[f64]| {
        let scaled: Vec<f64> = r.iter().zip(&scale).map(|(a, s)| a * s).collect();
        let mut z = spectral_multiply(&grid, &scaled, |k2| 1.0 / (1.0 + half * c * k2 * k2));
        for (zi, s) in z.iter_mut().zip(&scale) {
            *zi *= s;
        }
        z
    };
    Ok(pcg(&b, apply, precond, inner_tol, INNER_MAX_ITER, None)?)
}

fn attempt(state: &FlowState, dt: f64, opts: &FlowOptions) -> Result<Attempt> {
    let CgOutcome { x: delta, iterations: inner_iterations } = match increment(state, dt, opts.inner_tol) {
        Ok(out) => out,
        // a shorter step is closer to the diagonal and easier to solve
        Err(Error::LinearSolveStagnation { .. }) => return Ok(Attempt::Rejected),
        Err(e) => return Err(e),
    };
    if delta.iter().any(|d| !(4.0 * d > -1.0)) {
        return Ok(Attempt::Rejected);
    }
    let grid = *state.u.grid();
    let raw = ScalarField::from_raw(
        grid,
        state.u.values().iter().zip(&delta).map(|(u, d)| u + 0.25 * (4.0 * d).ln_1p()).collect(),
    );
    check_exponent_range(&raw)?;
    let raw_volume = conformal_volume(&raw)?;
    let raw_drift = raw_volume - state.cache.volume;
    let u_new = if opts.volume_renormalize {
        raw.add_scalar(-0.25 * (raw_volume / state.reference_volume).ln())
    } else {
        raw
    };
    let cache = Cache::of(&u_new, &state.p)?;
    let e_old = state.cache.energy;
    let tol_e = opts.energy_tol(e_old);
    let delta_e = cache.energy - e_old;
    if delta_e > tol_e {
        return Ok(Attempt::Rejected);
    }
    let dissipation = dissipation_between(&state.u, &u_new, dt);
    // once most of the energy has been dissipated, small relative errors in
    // the remaining tiny decrements no longer matter
    let progress = (state.initial_energy - e_old).max(0.0);
    let allowed = opts.accuracy_tol * (delta_e.abs() + ACCURACY_FLOOR * progress) + tol_e;
    let mismatch_ratio = (delta_e - dissipation).abs() / allowed;
    if mismatch_ratio > 1.0 {
        return Ok(Attempt::Rejected);
    }
    let next = FlowState {
        u: u_new,
        t: state.t + dt,
        dt,
        p: state.p.clone(),
        step_count: state.step_count + 1,
        reference_volume: state.reference_volume,
        initial_energy: state.initial_energy,
        cache,
    };
    Ok(Attempt::Accepted { state: next, dissipation, raw_drift, mismatch_ratio, inner_iterations })
}

/// Takes one accepted step of size at most `state.dt`, halving on rejection.
pub fn step(state: &FlowState, opts: &FlowOptions) -> Result<StepReport> {
    step_capped(state, opts, f64::INFINITY)
}

fn step_capped(state: &FlowState, opts: &FlowOptions, cap: f64) -> Result<StepReport> {
    let mut dt = state.dt.min(opts.dt_max).min(cap);
    let mut rejections = 0;
    loop {
        match attempt(state, dt, opts)? {
            Attempt::Accepted { state: mut next, dissipation, raw_drift, mismatch_ratio, inner_iterations } => {
                // a step shortened to land on t_end does not shrink the proposal
                let base = if rejections == 0 { state.dt.max(dt) } else { dt };
                // the mismatch is first order in dt
                let factor = if rejections == 0 { (0.7 / mismatch_ratio).clamp(1.0, 2.0) } else { 1.0 };
                next.dt = (factor * base).clamp(opts.dt_min, opts.dt_max);
                return Ok(StepReport {
                    energy_before: state.cache.energy,
                    energy_after: next.cache.energy,
                    state: next,
                    dissipation,
                    raw_volume_drift: raw_drift,
                    dt,
                    rejections,
                    inner_iterations,
                });
            }
            Attempt::Rejected => {
                rejections += 1;
                dt *= 0.5;
                if dt < opts.dt_min {
                    return Err(Error::StepUnderflow { t: state.t, dt });
                }
            }
        }
    }
}

fn diagnostics(state: &FlowState, raw_drift: f64, dt: f64) -> Result<DiagnosticsRow> {
    let (sublevel_volume, y) = sublevel_diagnostics(&state.u, state.reference_volume)?;
    Ok(DiagnosticsRow {
        t: state.t,
        energy: state.energy(),
        conformal_volume: state.conformal_volume(),
        raw_volume_drift: raw_drift,
        sublevel_volume,
        y,
        max_u: state.u.max(),
        min_u: state.u.min(),
        dt,
        residual_norm: state.residual_norm(),
    })
}

/// Integrates from `u0` until `t_end`, a steady state, divergence, or step
/// underflow.
pub fn run(u0: ScalarField, p: ProblemData, opts: &FlowOptions) -> Result<Trajectory> {
    opts.validate()?;
    let mut state = FlowState::new(u0, p, opts.dt_init)?;
    let e0 = state.energy();
    let mut ledger = FlowLedger { initial_energy: e0, ..FlowLedger::default() };
    let mut rows = vec![diagnostics(&state, 0.0, 0.0)?];
    let mut last_row_step = 0;
    let mut last = (0.0, 0.0);
    let mut steady_run = 0;
    // an exact fixed point needs no observation window
    let machine_zero = 1e-14 * (1.0 + state.p.k.abs() / state.conformal_volume());
    let outcome = loop {
        if state.t >= opts.t_end {
            break FlowOutcome::ReachedTEnd;
        }
        let report = match step_capped(&state, opts, opts.t_end - state.t) {
            Ok(r) => r,
            Err(Error::StepUnderflow { .. }) => break FlowOutcome::StepUnderflow,
            Err(e) => return Err(e),
        };
        ledger.accepted_steps += 1;
        ledger.rejected_steps += report.rejections;
        ledger.inner_iterations += report.inner_iterations;
        let delta_e = report.energy_after - report.energy_before;
        if delta_e > 1e-12 * (1.0 + report.energy_before.abs()) {
            ledger.energy_increases += 1;
        }
        ledger.dissipation -= report.dissipation;
        ledger.absolute_volume_drift += report.raw_volume_drift.abs();
        last = (report.raw_volume_drift, report.dt);
        state = report.state;
        if opts.t_end - state.t <= 1e-12 * report.dt {
            state.t = opts.t_end;
        }
        if state.step_count % opts.diagnostics_stride == 0 {
            rows.push(diagnostics(&state, last.0, last.1)?);
            last_row_step = state.step_count;
        }
        let residual = state.residual_norm();
        steady_run = if residual <= opts.steady_tol { steady_run + 1 } else { 0 };
        if steady_run >= opts.steady_window || residual <= machine_zero {
            break FlowOutcome::ConvergedToSteady;
        }
        if state.energy() < e0 - opts.divergence_drop && state.u.max() > opts.divergence_max_u {
            break FlowOutcome::EnergyDiverging;
        }
    };
    if last_row_step != state.step_count {
        rows.push(diagnostics(&state, last.0, last.1)?);
    }
    Ok(Trajectory { rows, final_state: state, outcome, ledger })
}
