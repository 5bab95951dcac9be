//! Reproducible synthetic data: smooth random fields and the constructive
//! datum families used by configs and tests.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::grid::{ScalarField, TorusGrid};

/// Random trigonometric polynomial with mode components in
/// `[-max_mode, max_mode]` and sup norm at most `amplitude`.
pub fn smooth_random_field(grid: TorusGrid, seed: u64, max_mode: i64, amplitude: f64) -> ScalarField {
    const TERMS: usize = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_mode = max_mode.max(1);
    let terms: Vec<([f64; 4], f64, f64)> = (0..TERMS)
        .map(|_| {
            let m = loop {
                let m: [i64; 4] = std::array::from_fn(|_| rng.gen_range(-max_mode..=max_mode));
                if m.iter().any(|&c| c != 0) {
                    break m;
                }
            };
            let k = m.map(|c| grid.wavenumber(c));
            let a = rng.gen_range(-1.0..1.0) * amplitude / TERMS as f64;
            let phase = rng.gen_range(0.0..2.0 * PI);
            (k, a, phase)
        })
        .collect();
    ScalarField::from_fn(grid, |x| {
        terms
            .iter()
            .map(|(k, a, ph)| a * (k[0] * x[0] + k[1] * x[1] + k[2] * x[2] + k[3] * x[3] + ph).cos())
            .sum()
    })
    .expect("trigonometric polynomial is finite")
}

/// `base · (1 + amplitude · cos(κ·x))` for the integer wavevector `mode`.
pub fn cosine_datum(grid: TorusGrid, base: f64, amplitude: f64, mode: [i64; 4]) -> ScalarField {
    let k = mode.map(|c| grid.wavenumber(c));
    ScalarField::from_fn(grid, |x| {
        base * (1.0 + amplitude * (k[0] * x[0] + k[1] * x[1] + k[2] * x[2] + k[3] * x[3]).cos())
    })
    .expect("cosine datum is finite")
}

/// Positive smooth profile `exp(β Σ cos(2π x_a / L))` scaled to unit integral.
pub fn peaked_shape(grid: TorusGrid, beta: f64) -> ScalarField {
    let l = grid.period();
    let raw = ScalarField::from_fn(grid, |x| {
        (beta * x.iter().map(|&c| (2.0 * PI * c / l).cos()).sum::<f64>()).exp()
    })
    .expect("peaked profile is finite");
    let total = crate::grid::integrate(&raw);
    raw.map(|v| v / total)
}
