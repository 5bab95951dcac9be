//! Spectral laboratory for the fourth-order Q-curvature equation
//! `P₀u + f = k e^{4u}` and its gradient flow on the flat 4-torus.

pub mod error;
pub mod elliptic;
pub mod bubbles;
pub mod cli;
pub mod energy;
pub mod flow;
pub mod grid;
pub mod io;
mod krylov;
pub mod operators;
pub mod selftest;
pub mod synth;

#[cfg(test)]
pub(crate) mod testutil {
    pub use crate::synth::smooth_random_field;
}

pub use error::{Error, Result};
pub use grid::{
    ball_integral, forward_transform, integrate, inverse_transform, make_grid, Point, ScalarField,
    SpectralField, TorusGrid,
};
