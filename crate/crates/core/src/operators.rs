//! The Paneitz operator of the flat torus (the bilaplacian), its inverse on
//! mean-zero data, and the Green function with its logarithmic singularity.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::{
    for_each_in_ball, forward_transform, integrate, inverse_unchecked, CompensatedSum, Point,
    ScalarField, SpectralField, TorusGrid,
};

/// The coefficient of `log|x - y|` in the Green function of `Δ²` in four
/// dimensions.
pub const GREEN_LOG_SLOPE: f64 = -1.0 / (8.0 * PI * PI);

/// `P₀u` in Fourier space: every coefficient times `|κ|⁴`.
pub fn apply_paneitz(u: &SpectralField) -> SpectralField {
    let mut out = u.clone();
    out.apply_radial_symbol(|k2| k2 * k2);
    out
}

/// `P₀u` for a grid field.
pub fn paneitz(u: &ScalarField) -> ScalarField {
    let mut spec = forward_transform(u);
    spec.apply_radial_symbol(|k2| k2 * k2);
    inverse_unchecked(spec)
}

/// `∫ P₀u · u dV`, evaluated spectrally.
pub fn paneitz_form(u: &ScalarField) -> f64 {
    let mut spec = forward_transform(u);
    spec.apply_radial_symbol(|k2| k2);
    spec.grid().volume() * spec.power_sum()
}

/// Solves `P₀u = rhs` with `mean(u) = mean_value`.
///
/// `rhs` must integrate to zero up to `1e-8 (1 + max|rhs|) L⁴`; its residual
/// mean is projected out.
pub fn solve_paneitz(rhs: &ScalarField, mean_value: f64) -> Result<ScalarField> {
    let grid = *rhs.grid();
    let total = integrate(rhs);
    if total.abs() > 1e-8 * (1.0 + rhs.max_abs()) * grid.volume() {
        return Err(Error::Incompatible { mean: total / grid.volume() });
    }
    let mut spec = forward_transform(rhs);
    invert_paneitz_in_place(&mut spec, mean_value);
    Ok(inverse_unchecked(spec))
}

/// Divides by `|κ|⁴` off the zero mode and sets the zero mode to `mean_value`.
pub(crate) fn invert_paneitz_in_place(spec: &mut SpectralField, mean_value: f64) {
    spec.apply_radial_symbol(|k2| if k2 > 0.0 { 1.0 / (k2 * k2) } else { 0.0 });
    spec.coeffs_mut()[0] = Complex64::new(mean_value, 0.0);
}

/// The mean-free Green function `G(·, source)` sampled on the grid.
#[derive(Clone, Debug)]
pub struct GreenFieldSample {
    pub source: Point,
    pub field: ScalarField,
    pub mean: f64,
}

/// Least-squares fit `G ≈ slope · log|x - source| + regular_estimate` over
/// an annulus.
#[derive(Clone, Debug, PartialEq)]
pub struct LogFit {
    pub slope: f64,
    pub regular_estimate: f64,
    pub fit_window: (f64, f64),
    /// Root-mean-square deviation of the samples from the fitted line.
    pub residual: f64,
    pub points: usize,
}

/// Band-limited solution of `Δ²G = δ_source − L⁻⁴`, every retained mode of
/// the delta weighted equally.
pub fn green_field(grid: &TorusGrid, source: &Point) -> GreenFieldSample {
    let n = grid.n();
    let h = n / 2 + 1;
    let inv_vol = 1.0 / grid.volume();
    let phase: Vec<Vec<Complex64>> = (0..4)
        .map(|a| {
            (0..n)
                .map(|i| {
                    let k = grid.wavenumber(grid.mode_of_index(i));
                    Complex64::from_polar(1.0, -k * source[a])
                })
                .collect()
        })
        .collect();
    let mut coeffs = vec![Complex64::new(0.0, 0.0); grid.half_len()];
    let mut p = 0;
    for i0 in 0..n {
        for i1 in 0..n {
            let p01 = phase[0][i0] * phase[1][i1];
            for i2 in 0..n {
                let p012 = p01 * phase[2][i2];
                for i3 in 0..h {
                    coeffs[p] = p012 * phase[3][i3];
                    p += 1;
                }
            }
        }
    }
    let mut spec = SpectralField::from_coeffs(*grid, coeffs);
    spec.apply_radial_symbol(|k2| if k2 > 0.0 { inv_vol / (k2 * k2) } else { 0.0 });
    symmetrize_self_paired(&mut spec);
    let field = inverse_unchecked(spec);
    GreenFieldSample { source: *source, field, mean: 0.0 }
}

/// Projects the planes `m3 ∈ {0, n/2}` onto Hermitian symmetry. Needed when
/// an off-grid phase makes a Nyquist coefficient complex.
fn symmetrize_self_paired(spec: &mut SpectralField) {
    let n = spec.grid().n();
    let h = n / 2 + 1;
    let coeffs = spec.coeffs_mut();
    for i3 in [0, n / 2] {
        for i0 in 0..n {
            for i1 in 0..n {
                for i2 in 0..n {
                    let a = ((i0 * n + i1) * n + i2) * h + i3;
                    let b = ((((n - i0) % n) * n + (n - i1) % n) * n + (n - i2) % n) * h + i3;
                    if b < a {
                        continue;
                    }
                    let avg = 0.5 * (coeffs[a] + coeffs[b].conj());
                    coeffs[a] = avg;
                    coeffs[b] = avg.conj();
                }
            }
        }
    }
}

fn check_window(grid: &TorusGrid, r_min: f64, r_max: f64) -> Result<()> {
    let h = grid.spacing();
    let l = grid.period();
    if !(r_min >= 4.0 * h * (1.0 - 1e-12) && r_min < r_max && r_max <= 0.25 * l * (1.0 + 1e-12)) {
        return Err(Error::InvalidArgument(format!(
            "fit window ({r_min}, {r_max}) must satisfy 4h = {} <= r_min < r_max <= L/4 = {}",
            4.0 * h,
            0.25 * l
        )));
    }
    Ok(())
}

/// Weighted linear regression of `y` on `x`.
struct LineFit {
    w: CompensatedSum,
    wx: CompensatedSum,
    wy: CompensatedSum,
    samples: Vec<(f64, f64, f64)>,
}

impl LineFit {
    fn new() -> Self {
        Self {
            w: CompensatedSum::default(),
            wx: CompensatedSum::default(),
            wy: CompensatedSum::default(),
            samples: Vec::new(),
        }
    }

    fn push(&mut self, x: f64, y: f64, weight: f64) {
        self.w.add(weight);
        self.wx.add(weight * x);
        self.wy.add(weight * y);
        self.samples.push((x, y, weight));
    }

    fn finish(self, window: (f64, f64)) -> Result<LogFit> {
        let points = self.samples.iter().map(|s| s.2).sum::<f64>().round() as usize;
        if points < 32 {
            return Err(Error::InvalidArgument(format!(
                "annulus ({}, {}) holds {points} cells, need at least 32",
                window.0, window.1
            )));
        }
        let w = self.w.value();
        let xm = self.wx.value() / w;
        let ym = self.wy.value() / w;
        let mut sxx = CompensatedSum::default();
        let mut sxy = CompensatedSum::default();
        for &(x, y, wt) in &self.samples {
            sxx.add(wt * (x - xm) * (x - xm));
            sxy.add(wt * (x - xm) * (y - ym));
        }
        let slope = sxy.value() / sxx.value();
        let intercept = ym - slope * xm;
        let mut ss = CompensatedSum::default();
        for &(x, y, wt) in &self.samples {
            let r = y - slope * x - intercept;
            ss.add(wt * r * r);
        }
        Ok(LogFit {
            slope,
            regular_estimate: intercept,
            fit_window: window,
            residual: (ss.value() / w).sqrt(),
            points,
        })
    }
}

/// Fits the sampled Green function against `a log|x - source| + b` over the
/// cells with `r_min <= |x - source| <= r_max`.
pub fn green_log_fit(sample: &GreenFieldSample, r_min: f64, r_max: f64) -> Result<LogFit> {
    let grid = *sample.field.grid();
    check_window(&grid, r_min, r_max)?;
    let values = sample.field.values();
    let mut fit = LineFit::new();
    let r2_min = r_min * r_min * (1.0 - 1e-12);
    for_each_in_ball(&grid, &sample.source, r_max, |i| {
        let x = grid.point(i);
        let d2: f64 =
            grid.min_image_displacement(&sample.source, &x).iter().map(|d| d * d).sum();
        if d2 >= r2_min {
            fit.push(0.5 * d2.ln(), values[i], 1.0);
        }
    });
    fit.finish((r_min, r_max))
}

/// Default annulus `(6h, L/8)`.
pub fn default_fit_window(grid: &TorusGrid) -> (f64, f64) {
    (6.0 * grid.spacing(), grid.period() / 8.0)
}

/// Values of the Green function with a grid-aligned source at the offsets
/// `(i0, i1, i2, i3) · h`, `0 <= ia < count`, returned row-major.
///
/// Evaluates the cosine series directly, contracting one axis at a time over
/// the nonnegative modes, so memory stays `O((n/2)⁴)` instead of the full
/// grid. Agrees with [`green_field`] at those cells.
pub fn green_values_near_source(grid: &TorusGrid, count: usize) -> Vec<f64> {
    let n = grid.n();
    let half = n / 2 + 1;
    let k2: Vec<f64> = (0..half)
        .map(|m| {
            let k = grid.wavenumber(m as i64);
            k * k
        })
        .collect();
    let inv_vol = 1.0 / grid.volume();
    let weight = |m: usize| if m == 0 || m == n / 2 { 1.0 } else { 2.0 };
    // basis[m][j] = w(m) cos(κ_m j h)
    let h = grid.spacing();
    let basis: Vec<f64> = (0..half)
        .flat_map(|m| {
            let k = grid.wavenumber(m as i64);
            (0..count).map(move |j| weight(m) * (k * j as f64 * h).cos())
        })
        .collect();

    // coefficients over (m0, m1, m2, m3), contracted over m0 first
    let mut coef = vec![0.0; half.pow(4)];
    let mut p = 0;
    for m0 in 0..half {
        for m1 in 0..half {
            for m2 in 0..half {
                for m3 in 0..half {
                    let s = k2[m0] + k2[m1] + k2[m2] + k2[m3];
                    coef[p] = if s > 0.0 { inv_vol / (s * s) } else { 0.0 };
                    p += 1;
                }
            }
        }
    }
    // Contract the leading axis of an array shaped (half, rest) into
    // (rest, count): the contracted index moves to the back, so four passes
    // return the axes to their original order.
    let contract = |src: &[f64], rest: usize| -> Vec<f64> {
        let mut out = vec![0.0; rest * count];
        for m in 0..half {
            let row = &src[m * rest..(m + 1) * rest];
            let b = &basis[m * count..(m + 1) * count];
            for (r, &v) in row.iter().enumerate() {
                if v == 0.0 {
                    continue;
                }
                let o = &mut out[r * count..(r + 1) * count];
                for (oj, bj) in o.iter_mut().zip(b) {
                    *oj += v * bj;
                }
            }
        }
        out
    };
    let a = contract(&coef, half.pow(3));
    drop(coef);
    let a = contract(&a, half * half * count);
    let a = contract(&a, half * count * count);
    contract(&a, count * count * count)
}

/// [`green_log_fit`] for a grid-aligned source without materialising the
/// whole field; usable at resolutions where `n⁴` values do not fit in memory.
pub fn green_log_fit_local(grid: &TorusGrid, r_min: f64, r_max: f64) -> Result<LogFit> {
    check_window(grid, r_min, r_max)?;
    let h = grid.spacing();
    let count = (r_max / h).floor() as usize + 1;
    let values = green_values_near_source(grid, count);
    let r2_min = r_min * r_min * (1.0 - 1e-12);
    let r2_max = r_max * r_max * (1.0 + 1e-12);
    let mult = |i: usize| if i == 0 { 1.0 } else { 2.0 };
    let mut fit = LineFit::new();
    let mut p = 0;
    for i0 in 0..count {
        for i1 in 0..count {
            for i2 in 0..count {
                for i3 in 0..count {
                    let d2 = ((i0 * i0 + i1 * i1 + i2 * i2 + i3 * i3) as f64) * h * h;
                    if d2 >= r2_min && d2 <= r2_max {
                        let w = mult(i0) * mult(i1) * mult(i2) * mult(i3);
                        fit.push(0.5 * d2.ln(), values[p], w);
                    }
                    p += 1;
                }
            }
        }
    }
    fit.finish((r_min, r_max))
}
