//! Standard bubbles, their torus samples, concentration detection with
//! plateau masses, rescaling about a point, bubble fitting and the integral
//! Harnack measurement.

use std::f64::consts::PI;

use crate::energy::{normalized_density, ProblemData};
use crate::error::{Error, Result};
use crate::grid::{
    ball_integral, for_each_in_ball, forward_transform, inverse_unchecked, pairwise_sum, Point,
    ScalarField, TorusGrid,
};

/// Total mass of a bubble with `k = 16π²`.
pub const CRITICAL_CURVATURE: f64 = 16.0 * PI * PI;
/// Relative mass increment below which a ball is on the plateau.
const PLATEAU_INCREMENT: f64 = 0.05;
/// Masking radius in units of the detection radius.
const MASK_FACTOR: f64 = 8.0;
const MAX_SITES: usize = 32;
const QUANTIZATION_BAND: f64 = 0.15;
const MAX_FIT_ITER: usize = 200;
/// Fits with a larger L² error are not taken as bubbles.
pub const FIT_REJECTION_L2: f64 = 0.5;

/// `ξ(z) = log(2λ / (1 + λ²|z - z₀|²)) - ¼ log(k/6)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bubble {
    pub z0: Point,
    pub lambda: f64,
    pub k: f64,
}

impl Bubble {
    pub fn new(z0: Point, lambda: f64, k: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) || !(k > 0.0 && k.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "bubble needs lambda > 0 and k > 0, got {lambda}, {k}"
            )));
        }
        Ok(Self { z0, lambda, k })
    }

    fn profile(&self, dist2: f64) -> f64 {
        let l = self.lambda;
        (2.0 * l / (1.0 + l * l * dist2)).ln() - 0.25 * (self.k / 6.0).ln()
    }

    pub fn total_mass(&self) -> f64 {
        CRITICAL_CURVATURE / self.k
    }
}

pub fn bubble_eval(b: &Bubble, z: &Point) -> f64 {
    let d2: f64 = z.iter().zip(&b.z0).map(|(a, c)| (a - c) * (a - c)).sum();
    b.profile(d2)
}

/// `∫_{B_R(z₀)} e^{4ξ} dz = (16π²/k)·s²(s + 3)/(1 + s)³` with `s = λ²R²`;
/// `R = ∞` gives `16π²/k`.
pub fn bubble_mass(b: &Bubble, radius: f64) -> f64 {
    if radius == f64::INFINITY {
        return b.total_mass();
    }
    let s = b.lambda * b.lambda * radius * radius;
    let w = 1.0 + s;
    b.total_mass() * (s / w) * (s / w) * ((s + 3.0) / w)
}

/// Mass of `e^{4ξ}` beyond `|z| = L/4`, which the torus sample does not keep.
pub fn discarded_tail_mass(b: &Bubble, period: f64) -> f64 {
    let s = b.lambda * b.lambda * period * period / 16.0;
    let w = 1.0 + s;
    b.total_mass() * (3.0 * w - 2.0) / (w * w * w)
}

/// `e^{-1/s} / (e^{-1/s} + e^{-1/(1-s)})`, rising smoothly from 0 to 1.
fn smooth_step(s: f64) -> f64 {
    if s <= 0.0 {
        return 0.0;
    }
    if s >= 1.0 {
        return 1.0;
    }
    let a = (-1.0 / s).exp();
    let b = (-1.0 / (1.0 - s)).exp();
    a / (a + b)
}

/// Samples `ξ` at the minimum-image displacement from `center`. Beyond
/// `L/4` the profile is blended smoothly into its value at `3L/8` and kept
/// constant from there on.
pub fn sample_bubble_on_torus(b: &Bubble, grid: TorusGrid, center: &Point) -> Result<ScalarField> {
    let l = grid.period();
    if b.lambda * l < 20.0 {
        return Err(Error::InvalidArgument(format!(
            "bubble too wide for the torus: lambda*L = {} < 20",
            b.lambda * l
        )));
    }
    let inner = 0.25 * l;
    let outer = 0.375 * l;
    let far = b.profile(outer * outer);
    ScalarField::from_fn(grid, |x| {
        let d = grid.min_image_displacement(center, &x);
        let r2: f64 = d.iter().map(|v| v * v).sum();
        let r = r2.sqrt();
        if r <= inner {
            b.profile(r2)
        } else if r >= outer {
            far
        } else {
            let w = smooth_step((r - inner) / (outer - inner));
            (1.0 - w) * b.profile(r2) + w * far
        }
    })
}

/// `¼ log Σ e^{4uᵢ}`, whose conformal density is the sum of the parts.
pub fn superpose(fields: &[ScalarField]) -> Result<ScalarField> {
    let first = fields
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to superpose".into()))?;
    let grid = *first.grid();
    if fields.iter().any(|f| *f.grid() != grid) {
        return Err(Error::GridMismatch);
    }
    let values = (0..grid.total_points())
        .map(|i| {
            let top = fields.iter().map(|f| f.values()[i]).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = fields.iter().map(|f| (4.0 * (f.values()[i] - top)).exp()).sum();
            top + 0.25 * s.ln()
        })
        .collect();
    ScalarField::new(grid, values)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConcentrationSite {
    pub center: Point,
    pub center_index: usize,
    /// Smallest grid-ball radius carrying the detection mass.
    pub radius: f64,
    /// `∫_{B_radius} e^{4u}` of the normalized field.
    pub mass: f64,
    pub plateau_radius: f64,
    pub plateau_mass: f64,
    /// False when no radius met the increment rule and the largest
    /// admissible ball was used.
    pub plateau_found: bool,
    /// `plateau_mass · k / 16π²`
    pub quantum_ratio: f64,
    /// `radius <= L/8`
    pub concentrated: bool,
}

impl ConcentrationSite {
    pub fn nearest_quantum(&self) -> f64 {
        self.quantum_ratio.round().max(1.0)
    }

    pub fn quantized(&self) -> bool {
        self.concentrated && (self.quantum_ratio - self.nearest_quantum()).abs() <= QUANTIZATION_BAND
    }

    /// Concentration scale `λ` of the bubble whose mass profile puts the
    /// fraction `mass / plateau_mass` inside the detection radius. Inverts
    /// `s²(s + 3)/(1 + s)³ = q` for `s = λ²R²` by bisection.
    pub fn bubble_scale(&self) -> Option<f64> {
        let q = self.mass / self.plateau_mass;
        if !(q > 0.0 && q < 1.0 && self.radius > 0.0) {
            return None;
        }
        let profile = |s: f64| s * s * (s + 3.0) / ((1.0 + s) * (1.0 + s) * (1.0 + s));
        let (mut lo, mut hi) = (-30.0f64, 30.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if profile(mid.exp()) < q {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some((0.5 * (lo + hi)).exp().sqrt() / self.radius)
    }
}

/// Sums of a cell density over every grid ball of squared index radius `j`.
struct BallScanner {
    grid: TorusGrid,
    spectrum: crate::grid::SpectralField,
}

impl BallScanner {
    fn new(density: &ScalarField) -> Self {
        Self { grid: *density.grid(), spectrum: forward_transform(density) }
    }

    fn indicator(&self, j: usize) -> ScalarField {
        let n = self.grid.n();
        let off2: Vec<usize> = (0..n)
            .map(|i| {
                let o = if i <= n / 2 { i } else { n - i };
                o * o
            })
            .collect();
        let mut values = vec![0.0; self.grid.total_points()];
        for (flat, v) in values.iter_mut().enumerate() {
            let idx = self.grid.multi_index(flat);
            if idx.iter().map(|&i| off2[i]).sum::<usize>() <= j {
                *v = 1.0;
            }
        }
        ScalarField::from_raw(self.grid, values)
    }

    /// Largest ball sum and the lowest index attaining it.
    fn best(&self, j: usize) -> (f64, usize) {
        let kernel = forward_transform(&self.indicator(j));
        let scale = self.grid.total_points() as f64;
        let mut product = self.spectrum.clone();
        for (c, kc) in product.coeffs_mut().iter_mut().zip(kernel.coeffs()) {
            *c *= kc * scale;
        }
        let sums = inverse_unchecked(product);
        let idx = sums.argmax();
        (sums.values()[idx], idx)
    }
}

/// Normalizes `u` to unit conformal volume and repeatedly finds the
/// smallest grid ball holding `rho` of the mass, masking each site before
/// searching for the next.
pub fn detect_concentration(u: &ScalarField, k: f64, rho: f64) -> Result<Vec<ConcentrationSite>> {
    if !(k > 0.0) {
        return Err(Error::InvalidArgument(format!("k must be positive, got {k}")));
    }
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "detection mass must lie in (0, 1) of the normalized volume, got {rho}"
        )));
    }
    let grid = *u.grid();
    let h = grid.spacing();
    let n = grid.n();
    let cell = grid.cell_volume();
    let density = normalized_density(u);
    let mut working = density.map(|v| v * cell);
    let j_max = (n / 2) * (n / 2);
    let mut sites = Vec::new();
    while sites.len() < MAX_SITES {
        let scanner = BallScanner::new(&working);
        let (top, _) = scanner.best(j_max);
        if top < rho {
            break;
        }
        // doubling then bisection for the smallest sufficient squared radius
        let mut lo = 0;
        let mut hi = 1;
        let mut hit = scanner.best(hi);
        while hit.0 < rho {
            lo = hi;
            hi = (2 * hi).min(j_max);
            hit = scanner.best(hi);
        }
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            let trial = scanner.best(mid);
            if trial.0 >= rho {
                hi = mid;
                hit = trial;
            } else {
                lo = mid;
            }
        }
        let (mass, center_index) = hit;
        let radius = (hi as f64).sqrt() * h;
        let center = grid.point(center_index);
        let (plateau_radius, plateau_mass, plateau_found) = plateau(&density, &center, radius)?;
        sites.push(ConcentrationSite {
            center,
            center_index,
            radius,
            mass,
            plateau_radius,
            plateau_mass,
            plateau_found,
            quantum_ratio: plateau_mass * k / CRITICAL_CURVATURE,
            concentrated: radius <= grid.period() / 8.0,
        });
        let mask = (MASK_FACTOR * radius).min(0.5 * grid.period());
        let values = working.values_mut();
        for_each_in_ball(&grid, &center, mask, |i| values[i] = 0.0);
    }
    Ok(sites)
}

/// Largest `b = b_max 2^{-i} >= 1`, `b_max = (L/4)/r`, whose mass increment
/// over `[b r, 2b r]` is below 5 %, with the mass at `b r`.
fn plateau(density: &ScalarField, center: &Point, radius: f64) -> Result<(f64, f64, bool)> {
    let quarter = 0.25 * density.grid().period();
    let mut b = quarter / radius;
    let mut first = None;
    while b >= 1.0 {
        let inner = ball_integral(density, center, b * radius)?;
        let outer = ball_integral(density, center, 2.0 * b * radius)?;
        first.get_or_insert((b * radius, inner));
        if inner > 0.0 && (outer - inner) / inner < PLATEAU_INCREMENT {
            return Ok((b * radius, inner, true));
        }
        b *= 0.5;
    }
    match first {
        Some((r, m)) => Ok((r, m, false)),
        None => Ok((radius, ball_integral(density, center, radius)?, false)),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizationReport {
    pub k: f64,
    pub rho: f64,
    pub sites: Vec<ConcentrationSite>,
    /// Conformal volume of the normalized field, one up to rounding.
    pub total_mass: f64,
    /// Sum of plateau masses of the concentrated sites.
    pub concentrated_mass: f64,
    /// Normalized mass outside every plateau ball.
    pub diffuse_mass: f64,
}

impl QuantizationReport {
    /// `Σ lⱼ` over quantized sites.
    pub fn quanta(&self) -> f64 {
        self.sites.iter().filter(|s| s.quantized()).map(|s| s.nearest_quantum()).sum()
    }

    /// `|total - concentrated - diffuse|`, zero when the plateau balls are
    /// disjoint.
    pub fn accounting_defect(&self) -> f64 {
        (self.total_mass - self.concentrated_mass - self.diffuse_mass).abs()
    }
}

/// Detection at `ρ = π²/k` followed by the mass accounting of the sites.
pub fn quantization_report(u: &ScalarField, k: f64) -> Result<QuantizationReport> {
    let rho = PI * PI / k;
    let sites = if rho < 1.0 { detect_concentration(u, k, rho)? } else { Vec::new() };
    let grid = *u.grid();
    let density = normalized_density(u);
    let mut outside = density.values().to_vec();
    let mut concentrated_mass = 0.0;
    for s in sites.iter().filter(|s| s.concentrated) {
        concentrated_mass += s.plateau_mass;
        for_each_in_ball(&grid, &s.center, s.plateau_radius, |i| outside[i] = 0.0);
    }
    Ok(QuantizationReport {
        k,
        rho,
        sites,
        total_mass: crate::grid::integrate(&density),
        concentrated_mass,
        diffuse_mass: grid.cell_volume() * pairwise_sum(&outside),
    })
}

/// `û(z) = u(center + r z) + log r` on a tensor grid over
/// `[-half_width, half_width]⁴`.
#[derive(Clone, Debug, PartialEq)]
pub struct RescaledField {
    pub center: Point,
    pub r: f64,
    pub half_width: f64,
    /// Sample coordinates along each axis.
    pub axis: Vec<f64>,
    /// Row-major values over `axis⁴`.
    pub values: Vec<f64>,
}

impl RescaledField {
    pub fn point(&self, flat: usize) -> Point {
        let m = self.axis.len();
        [flat / (m * m * m), (flat / (m * m)) % m, (flat / m) % m, flat % m].map(|i| self.axis[i])
    }

    pub fn cell_volume(&self) -> f64 {
        let dz = if self.axis.len() > 1 { self.axis[1] - self.axis[0] } else { 1.0 };
        dz.powi(4)
    }
}

/// Weights of the trigonometric interpolant at `x` along one axis; the
/// Nyquist mode is interpolated as a cosine.
fn interpolation_row(grid: &TorusGrid, x: f64) -> Vec<f64> {
    let n = grid.n();
    let h = grid.spacing();
    let l = grid.period();
    (0..n)
        .map(|j| {
            let theta = 2.0 * PI * (x - j as f64 * h) / l;
            let mut s = 1.0 + (0.5 * n as f64 * theta).cos();
            for q in 1..n / 2 {
                s += 2.0 * (q as f64 * theta).cos();
            }
            s / n as f64
        })
        .collect()
}

/// Contracts the leading grid axis of `data` (shape `[n, rest]`) with the
/// rows of `w` (shape `[m, n]`) and moves it last: output `[rest, m]`.
fn contract_axis(data: &[f64], n: usize, w: &[Vec<f64>]) -> Vec<f64> {
    let rest = data.len() / n;
    let m = w.len();
    let mut staged = vec![0.0; m * rest];
    for (row, out) in w.iter().zip(staged.chunks_exact_mut(rest)) {
        for (j, &wij) in row.iter().enumerate() {
            for (o, &v) in out.iter_mut().zip(&data[j * rest..(j + 1) * rest]) {
                *o += wij * v;
            }
        }
    }
    let mut out = vec![0.0; rest * m];
    for (i, src) in staged.chunks_exact(rest).enumerate() {
        for (t, &v) in src.iter().enumerate() {
            out[t * m + i] = v;
        }
    }
    out
}

pub fn rescale(
    u: &ScalarField,
    center: &Point,
    r: f64,
    half_width: f64,
    points_per_axis: usize,
) -> Result<RescaledField> {
    let grid = *u.grid();
    if !(r > 0.0 && half_width > 0.0) {
        return Err(Error::InvalidArgument("rescale needs r > 0 and half_width > 0".into()));
    }
    if r * half_width > 0.25 * grid.period() * (1.0 + 1e-12) {
        return Err(Error::InvalidArgument(format!(
            "rescale window r*half_width = {} exceeds L/4",
            r * half_width
        )));
    }
    if points_per_axis < 2 {
        return Err(Error::InvalidArgument("need at least two points per axis".into()));
    }
    let m = points_per_axis;
    let axis: Vec<f64> =
        (0..m).map(|i| -half_width + 2.0 * half_width * i as f64 / (m - 1) as f64).collect();
    let n = grid.n();
    let mut data = u.values().to_vec();
    // each pass contracts the leading axis and appends the new one, so after
    // four passes the axes are back in order
    for c in center {
        let w: Vec<Vec<f64>> = axis.iter().map(|z| interpolation_row(&grid, c + r * z)).collect();
        data = contract_axis(&data, n, &w);
    }
    let shift = r.ln();
    for v in data.iter_mut() {
        *v += shift;
    }
    Ok(RescaledField { center: *center, r, half_width, axis, values: data })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BubbleFit {
    pub z0_fit: Point,
    pub lambda_fit: f64,
    /// `(∫_{|z| <= half_width/2} (û - ξ)²)^{1/2}`
    pub l2_error: f64,
    pub sup_error: f64,
    pub fit_radius: f64,
    pub iterations: usize,
}

impl BubbleFit {
    /// Small error with the bubble core, of radius `1/λ`, inside the fit
    /// ball; a flat field is matched by arbitrarily wide bubbles.
    pub fn accepted(&self) -> bool {
        self.l2_error <= FIT_REJECTION_L2 && self.lambda_fit * self.fit_radius >= 1.0
    }
}

fn solve_small(mut a: [[f64; 5]; 5], mut b: [f64; 5]) -> Option<[f64; 5]> {
    for col in 0..5 {
        let piv = (col..5).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col] == 0.0 || !a[piv][col].is_finite() {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..5 {
            let f = a[row][col] / a[col][col];
            for c in col..5 {
                a[row][c] -= f * a[col][c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 5];
    for row in (0..5).rev() {
        let s: f64 = (row + 1..5).map(|c| a[row][c] * x[c]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

/// Levenberg–Marquardt fit of `ξ_{z₀,λ}` to the rescaled samples inside
/// the ball of radius `half_width/2`. Parameters are `z₀` and `log λ`.
pub fn bubble_fit(samples: &RescaledField, k: f64) -> Result<BubbleFit> {
    if !(k > 0.0) {
        return Err(Error::InvalidArgument(format!("k must be positive, got {k}")));
    }
    if samples.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("rescaled samples are not finite".into()));
    }
    let fit_radius = 0.5 * samples.half_width;
    let pts: Vec<(Point, f64)> = (0..samples.values.len())
        .map(|i| (samples.point(i), samples.values[i]))
        .filter(|(z, _)| z.iter().map(|c| c * c).sum::<f64>() <= fit_radius * fit_radius * (1.0 + 1e-12))
        .collect();
    if pts.len() < 5 {
        return Err(Error::InvalidArgument("too few samples inside the fit ball".into()));
    }
    let offset = 0.25 * (k / 6.0).ln();
    let (peak_z, peak_v) = pts
        .iter()
        .fold((pts[0].0, f64::NEG_INFINITY), |acc, (z, v)| if *v > acc.1 { (*z, *v) } else { acc });
    let mut params = [peak_z[0], peak_z[1], peak_z[2], peak_z[3], (0.5 * (peak_v + offset).exp()).ln()];
    let residuals = |p: &[f64; 5]| -> Vec<f64> {
        let l = p[4].exp();
        pts.iter()
            .map(|(z, v)| {
                let d2: f64 = (0..4).map(|a| (z[a] - p[a]).powi(2)).sum();
                v - ((2.0 * l / (1.0 + l * l * d2)).ln() - offset)
            })
            .collect()
    };
    let cost_of = |r: &[f64]| pairwise_sum(&r.iter().map(|x| x * x).collect::<Vec<_>>());
    let mut res = residuals(&params);
    let mut cost = cost_of(&res);
    let mut mu = 1e-3;
    let mut trace = vec![cost];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < MAX_FIT_ITER {
        iterations += 1;
        let l = params[4].exp();
        let mut jtj = [[0.0; 5]; 5];
        let mut jtr = [0.0; 5];
        for ((z, _), ri) in pts.iter().zip(&res) {
            let d: [f64; 4] = std::array::from_fn(|a| z[a] - params[a]);
            let q = l * l * d.iter().map(|x| x * x).sum::<f64>();
            // model derivatives; the residual derivatives are their negatives
            let mut g = [0.0; 5];
            for a in 0..4 {
                g[a] = 2.0 * l * l * d[a] / (1.0 + q);
            }
            g[4] = 1.0 - 2.0 * q / (1.0 + q);
            for a in 0..5 {
                jtr[a] += g[a] * ri;
                for b in 0..5 {
                    jtj[a][b] += g[a] * g[b];
                }
            }
        }
        let mut accepted = None;
        while mu < 1e12 {
            let mut a = jtj;
            for d in 0..5 {
                a[d][d] += mu * jtj[d][d].max(1e-30);
            }
            if let Some(step) = solve_small(a, jtr) {
                let trial: [f64; 5] = std::array::from_fn(|i| params[i] + step[i]);
                let tr = residuals(&trial);
                let tc = cost_of(&tr);
                if tc.is_finite() && tc <= cost {
                    accepted = Some((trial, tr, tc, step));
                    break;
                }
            }
            mu *= 4.0;
        }
        // no damping yields descent: the cost is minimal to rounding
        let Some((trial, tr, tc, step)) = accepted else {
            converged = true;
            break;
        };
        let decrease = cost - tc;
        params = trial;
        res = tr;
        cost = tc;
        mu = (mu / 3.0).max(1e-12);
        trace.push(cost);
        let step_size = step.iter().fold(0.0_f64, |m, s| m.max(s.abs()));
        if decrease <= 1e-14 * (cost + decrease) || step_size <= 1e-12 {
            converged = true;
            break;
        }
    }
    if !converged || !params.iter().all(|p| p.is_finite()) {
        let tail: Vec<String> = trace.iter().rev().take(5).map(|c| format!("{c:.3e}")).collect();
        return Err(Error::OptimizerFailure(format!(
            "bubble fit did not converge after {iterations} iterations; last costs {}",
            tail.join(", ")
        )));
    }
    let dv = samples.cell_volume();
    Ok(BubbleFit {
        z0_fit: [params[0], params[1], params[2], params[3]],
        lambda_fit: params[4].exp(),
        l2_error: (cost * dv).sqrt(),
        sup_error: res.iter().fold(0.0, |m, r| m.max(r.abs())),
        fit_radius,
        iterations,
    })
}

/// Terms of the integral Harnack inequality
/// `∫_{B_R(y)} e^{4u} <= C (R/r)^{4 - ‖h⁺‖_{L¹(B_r(x))}/2π²} ∫_{B_r(x)} e^{4u}`
/// with `h = k e^{4u}`.
#[derive(Clone, Debug, PartialEq)]
pub struct HarnackMeasurement {
    pub x: Point,
    pub y: Point,
    pub r: f64,
    pub big_r: f64,
    /// `∫_{B_{2R}(y)} h⁺`
    pub hypothesis_mass: f64,
    /// `∫_{B_{2R}(y)} h⁺ <= π²`
    pub hypothesis_ok: bool,
    pub mass_r: f64,
    pub mass_big_r: f64,
    /// `log(mass_R / mass_r) / log(R/r)`, zero when `R = r`.
    pub measured_exponent: f64,
    /// `-4 + ‖h⁺‖_{L¹(B_r(x))} / 2π²`
    pub bound_exponent: f64,
    /// `|x - y| / R`
    pub separation_ratio: f64,
}

impl HarnackMeasurement {
    /// `measured_exponent + bound_exponent`, at most the slack when the
    /// inequality holds.
    pub fn exponent_gap(&self) -> f64 {
        self.measured_exponent + self.bound_exponent
    }

    pub fn holds(&self, slack: f64) -> bool {
        self.exponent_gap() <= slack
    }
}

pub fn harnack_measure(
    u: &ScalarField,
    p: &ProblemData,
    x: &Point,
    y: &Point,
    r: f64,
    big_r: f64,
) -> Result<HarnackMeasurement> {
    let grid = *u.grid();
    if u.grid() != p.grid() {
        return Err(Error::GridMismatch);
    }
    let k = p.k;
    if !(r > 0.0 && r <= big_r && 2.0 * big_r <= 0.5 * grid.period() * (1.0 + 1e-12)) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < r <= R <= L/4, got r = {r}, R = {big_r}"
        )));
    }
    if !(k > 0.0) {
        return Err(Error::InvalidArgument(format!("k must be positive, got {k}")));
    }
    let top = 4.0 * u.max();
    if top > 700.0 {
        return Err(Error::Overflow { max_u: u.max() });
    }
    let density = u.map(|v| (4.0 * v).exp());
    let mass_r = ball_integral(&density, x, r)?;
    if !(mass_r > 0.0) {
        return Err(Error::InvalidArgument("zero mass in B_r(x)".into()));
    }
    let mass_big_r = ball_integral(&density, y, big_r)?;
    let hypothesis_mass = k * ball_integral(&density, y, 2.0 * big_r)?;
    let measured_exponent =
        if big_r == r { 0.0 } else { (mass_big_r / mass_r).ln() / (big_r / r).ln() };
    Ok(HarnackMeasurement {
        x: *x,
        y: *y,
        r,
        big_r,
        hypothesis_mass,
        hypothesis_ok: hypothesis_mass <= PI * PI,
        mass_r,
        mass_big_r,
        measured_exponent,
        bound_exponent: -4.0 + k * mass_r / (2.0 * PI * PI),
        separation_ratio: grid.distance(x, y) / big_r,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::{adams_deficit, conformal_volume};
    use crate::grid::make_grid;
    use crate::synth::{cosine_datum, smooth_random_field};

    fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
        fn simpson(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
            let m = 0.5 * (a + b);
            let fm = f(m);
            (m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb))
        }
        #[allow(clippy::too_many_arguments)]
        fn refine(
            f: &dyn Fn(f64) -> f64,
            a: f64,
            fa: f64,
            b: f64,
            fb: f64,
            m: f64,
            fm: f64,
            whole: f64,
            tol: f64,
            depth: u32,
        ) -> f64 {
            let (lm, flm, left) = simpson(f, a, fa, m, fm);
            let (rm, frm, right) = simpson(f, m, fm, b, fb);
            let delta = left + right - whole;
            if depth == 0 || delta.abs() <= 15.0 * tol {
                return left + right + delta / 15.0;
            }
            refine(f, a, fa, m, fm, lm, flm, left, 0.5 * tol, depth - 1)
                + refine(f, m, fm, b, fb, rm, frm, right, 0.5 * tol, depth - 1)
        }
        let (fa, fb) = (f(a), f(b));
        let (m, fm, whole) = simpson(f, a, fa, b, fb);
        refine(f, a, fa, b, fb, m, fm, whole, tol, 50)
    }

    /// `2π² ∫₀^R (6/k) 16λ⁴ r³ / (1 + λ²r²)⁴ dr`, with `r = t/(1-t)` for
    /// the infinite range.
    fn quadrature_mass(lambda: f64, k: f64, radius: f64) -> f64 {
        let density = |r: f64| {
            let q = 1.0 + lambda * lambda * r * r;
            2.0 * PI * PI * (6.0 / k) * 16.0 * lambda.powi(4) * r.powi(3) / q.powi(4)
        };
        if radius.is_infinite() {
            let g = |t: f64| if t >= 1.0 { 0.0 } else { density(t / (1.0 - t)) / (1.0 - t).powi(2) };
            adaptive_simpson(&g, 0.0, 1.0, 1e-14)
        } else {
            adaptive_simpson(&density, 0.0, radius, 1e-14)
        }
    }

    #[test]
    fn bubble_values() {
        let b = Bubble::new([0.1, 0.2, 0.3, 0.4], 1.0, 6.0).unwrap();
        assert!((bubble_eval(&b, &b.z0) - 2f64.ln()).abs() < 1e-15);
        let b = Bubble::new([0.0; 4], 1.0, CRITICAL_CURVATURE).unwrap();
        assert!((bubble_eval(&b, &[0.0; 4]) - (2f64.ln() - 0.8175722561776316)).abs() < 1e-14);
        let b = Bubble::new([1.0, -1.0, 0.5, 2.0], 3.0, 40.0).unwrap();
        let d = 0.37;
        let v = bubble_eval(&b, &[1.0 + d, -1.0, 0.5, 2.0]);
        for dir in [[0.0, d, 0.0, 0.0], [0.0, 0.0, 0.0, -d], [0.5 * d, 0.5 * d, 0.5 * d, -0.5 * d]] {
            let z = [1.0 + dir[0], -1.0 + dir[1], 0.5 + dir[2], 2.0 + dir[3]];
            assert!((bubble_eval(&b, &z) - v).abs() < 1e-14);
        }
        assert!(Bubble::new([0.0; 4], 0.0, 1.0).is_err());
        assert!(Bubble::new([0.0; 4], 1.0, -1.0).is_err());
    }

    #[test]
    fn mass_closed_form_matches_quadrature() {
        for lambda in [0.5, 1.0, 4.0] {
            for k in [10.0, CRITICAL_CURVATURE, 200.0] {
                let b = Bubble::new([0.0; 4], lambda, k).unwrap();
                assert!((bubble_mass(&b, f64::INFINITY) - CRITICAL_CURVATURE / k).abs() <= 1e-15 * b.total_mass());
                for radius in [0.05, 0.3, 1.0, 3.0, f64::INFINITY] {
                    let q = quadrature_mass(lambda, k, radius);
                    let c = bubble_mass(&b, radius);
                    assert!((q - c).abs() <= 1e-8 * b.total_mass(), "{lambda} {k} {radius}: {q} vs {c}");
                }
            }
        }
        let b = Bubble::new([0.0; 4], 1.0, CRITICAL_CURVATURE).unwrap();
        assert_eq!(bubble_mass(&b, f64::INFINITY), 1.0);
        assert!((bubble_mass(&b, 1.0) - quadrature_mass(1.0, CRITICAL_CURVATURE, 1.0)).abs() <= 1e-10);
        assert!((bubble_mass(&b, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn tail_mass_complements_ball_mass() {
        let b = Bubble::new([0.0; 4], 40.0, CRITICAL_CURVATURE).unwrap();
        let tail = discarded_tail_mass(&b, 1.0);
        assert!((tail + bubble_mass(&b, 0.25) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn sampling_requires_resolved_bubble() {
        let g = make_grid(16, 1.0).unwrap();
        let b = Bubble::new([0.0; 4], 10.0, CRITICAL_CURVATURE).unwrap();
        assert!(sample_bubble_on_torus(&b, g, &[0.5; 4]).is_err());
    }

    #[test]
    fn sampled_bubble_mass_and_peak() {
        let g = make_grid(32, 1.0).unwrap();
        let b = Bubble::new([0.0; 4], 20.0, CRITICAL_CURVATURE).unwrap();
        let centre = [0.5, 0.25, 0.75, 0.5];
        let u = sample_bubble_on_torus(&b, g, &centre).unwrap();
        let mass = conformal_volume(&u).unwrap();
        assert!((mass - 1.0).abs() <= 0.02, "{mass}");
        assert!(g.distance(&g.point(u.argmax()), &centre) <= g.spacing());
    }

    #[test]
    fn disjoint_bubble_masses_add() {
        let g = make_grid(32, 1.0).unwrap();
        let k = 30.0;
        let b = Bubble::new([0.0; 4], 20.0, k).unwrap();
        let u1 = sample_bubble_on_torus(&b, g, &[0.25; 4]).unwrap();
        let u2 = sample_bubble_on_torus(&b, g, &[0.75; 4]).unwrap();
        let mass = conformal_volume(&superpose(&[u1, u2]).unwrap()).unwrap();
        let expected = 2.0 * CRITICAL_CURVATURE / k;
        assert!((mass - expected).abs() <= 0.03 * expected, "{mass} vs {expected}");
    }

    #[test]
    fn single_bubble_is_detected_and_quantized() {
        let g = make_grid(32, 1.0).unwrap();
        let k = CRITICAL_CURVATURE;
        let b = Bubble::new([0.0; 4], 20.0, k).unwrap();
        let centre = [0.5, 0.25, 0.75, 0.5];
        let u = sample_bubble_on_torus(&b, g, &centre).unwrap();
        let report = quantization_report(&u, k).unwrap();
        assert_eq!(report.sites.len(), 1);
        let site = &report.sites[0];
        assert!(g.distance(&site.center, &centre) <= g.spacing());
        assert!(site.concentrated && site.plateau_found && site.quantized());
        assert!((site.quantum_ratio - 1.0).abs() <= 0.05, "{}", site.quantum_ratio);
        assert!(site.mass >= PI * PI / k);
        assert_eq!(report.quanta(), 1.0);
        assert!(report.accounting_defect() <= 1e-12);
        let scale = site.bubble_scale().unwrap();
        assert!((scale / 20.0 - 1.0).abs() <= 0.3, "{scale}");
    }

    #[test]
    fn scale_estimate_inverts_mass_profile() {
        let b = Bubble::new([0.0; 4], 7.0, 30.0).unwrap();
        let site = ConcentrationSite {
            center: [0.0; 4],
            center_index: 0,
            radius: 0.1,
            mass: bubble_mass(&b, 0.1),
            plateau_radius: 0.2,
            plateau_mass: b.total_mass(),
            plateau_found: true,
            quantum_ratio: 1.0,
            concentrated: true,
        };
        assert!((site.bubble_scale().unwrap() - 7.0).abs() <= 1e-9);
        let flat = ConcentrationSite { mass: site.plateau_mass, ..site };
        assert!(flat.bubble_scale().is_none());
    }

    #[test]
    fn two_bubbles_give_two_quanta() {
        let g = make_grid(32, 1.0).unwrap();
        let k = 2.0 * CRITICAL_CURVATURE;
        let b = Bubble::new([0.0; 4], 20.0, k).unwrap();
        let centres = [[0.25; 4], [0.75; 4]];
        let parts: Vec<ScalarField> =
            centres.iter().map(|c| sample_bubble_on_torus(&b, g, c).unwrap()).collect();
        let report = quantization_report(&superpose(&parts).unwrap(), k).unwrap();
        assert_eq!(report.sites.len(), 2);
        for s in &report.sites {
            assert!(centres.iter().any(|c| g.distance(c, &s.center) <= g.spacing()));
            assert!((s.quantum_ratio - 1.0).abs() <= 0.07, "{}", s.quantum_ratio);
        }
        assert_eq!(report.quanta(), k / CRITICAL_CURVATURE);
        assert!(report.accounting_defect() <= 0.05);
    }

    #[test]
    fn uniform_density_is_not_concentrated() {
        let g = make_grid(16, 1.0).unwrap();
        for (c, k) in [(0.0, 10.0), (-0.7, 200.0)] {
            let u = ScalarField::constant(g, c);
            let report = quantization_report(&u, k).unwrap();
            assert!(report.sites.iter().all(|s| !s.concentrated && s.radius > 0.125));
            assert_eq!(report.quanta(), 0.0);
        }
        let sites = detect_concentration(&ScalarField::zeros(g), 200.0, PI * PI / 200.0).unwrap();
        assert!(!sites.is_empty());
        assert!(sites.iter().all(|s| s.radius > 0.125));
    }

    #[test]
    fn detection_validates_inputs() {
        let u = ScalarField::zeros(make_grid(8, 1.0).unwrap());
        assert!(detect_concentration(&u, 10.0, 1.5).is_err());
        assert!(detect_concentration(&u, -1.0, 0.1).is_err());
    }

    #[test]
    fn unit_rescale_reproduces_grid_values() {
        let g = make_grid(16, 1.0).unwrap();
        let u = smooth_random_field(g, 4, 3, 1.0);
        let h = g.spacing();
        let centre = g.point(g.flat_index([3, 7, 0, 12]));
        let rs = rescale(&u, &centre, 1.0, 3.0 * h, 7).unwrap();
        for (i, v) in rs.values.iter().enumerate() {
            let expected = u.values()[g.nearest_cell(&{
                let z = rs.point(i);
                std::array::from_fn(|a| centre[a] + z[a])
            })];
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn rescale_interpolates_band_limited_fields() {
        let g = make_grid(16, 1.0).unwrap();
        let mode = [2, -1, 3, 7];
        let u = cosine_datum(g, 0.5, 2.0, mode);
        let centre = [0.123, 0.456, 0.789, 0.321];
        let r = 0.37;
        let rs = rescale(&u, &centre, r, 0.5, 5).unwrap();
        for (i, v) in rs.values.iter().enumerate() {
            let z = rs.point(i);
            let phase: f64 = (0..4).map(|a| 2.0 * PI * mode[a] as f64 * (centre[a] + r * z[a])).sum();
            let exact = 0.5 * (1.0 + 2.0 * phase.cos()) + r.ln();
            assert!((v - exact).abs() < 1e-12, "{v} {exact}");
        }
        assert!(rescale(&u, &centre, 0.2, 2.0, 5).is_err());
    }

    #[test]
    fn rescaled_bubble_is_unit_scale() {
        let g = make_grid(32, 1.0).unwrap();
        let k = CRITICAL_CURVATURE;
        let lambda = 20.0;
        let b = Bubble::new([0.0; 4], lambda, k).unwrap();
        let centre = g.point(g.flat_index([16, 8, 24, 16]));
        let u = sample_bubble_on_torus(&b, g, &centre).unwrap();
        let rs = rescale(&u, &centre, 1.0 / lambda, 4.0, 9).unwrap();
        let mid = rs.values.len() / 2;
        assert_eq!(rs.point(mid), [0.0; 4]);
        assert!((rs.values[mid] - (2f64.ln() - 0.25 * (k / 6.0).ln())).abs() <= 0.02);
        let fit = bubble_fit(&rs, k).unwrap();
        assert!((fit.lambda_fit - 1.0).abs() <= 0.01);
        assert!(fit.z0_fit.iter().all(|c| c.abs() <= 1.0));
    }

    fn exact_samples(b: &Bubble, half_width: f64, m: usize, noise: impl Fn(&Point) -> f64) -> RescaledField {
        let axis: Vec<f64> =
            (0..m).map(|i| -half_width + 2.0 * half_width * i as f64 / (m - 1) as f64).collect();
        let mut rs = RescaledField { center: [0.0; 4], r: 1.0, half_width, axis, values: Vec::new() };
        rs.values = (0..m.pow(4)).map(|i| {
            let z = rs.point(i);
            bubble_eval(b, &z) + noise(&z)
        }).collect();
        rs
    }

    #[test]
    fn fit_recovers_exact_bubble() {
        let k = 50.0;
        let b = Bubble::new([0.07, -0.11, 0.02, 0.19], 1.3, k).unwrap();
        let rs = exact_samples(&b, 4.0, 17, |_| 0.0);
        let fit = bubble_fit(&rs, k).unwrap();
        assert!((fit.lambda_fit / 1.3 - 1.0).abs() <= 1e-8);
        for a in 0..4 {
            assert!((fit.z0_fit[a] - b.z0[a]).abs() <= 1e-8);
        }
        assert!(fit.l2_error <= 1e-10 && fit.accepted());
    }

    #[test]
    fn fit_tolerates_smooth_noise() {
        let k = CRITICAL_CURVATURE;
        let b = Bubble::new([0.0; 4], 1.0, k).unwrap();
        let amplitude = 0.01 * bubble_eval(&b, &[0.0; 4]).abs().max(1.0);
        let rs = exact_samples(&b, 4.0, 13, |z| amplitude * (0.7 * z[0] + 0.3 * z[2]).sin() * (0.5 * z[1]).cos());
        let fit = bubble_fit(&rs, k).unwrap();
        assert!((fit.lambda_fit - 1.0).abs() <= 0.05, "{}", fit.lambda_fit);
    }

    #[test]
    fn constant_field_is_not_a_bubble() {
        let m: usize = 9;
        let axis: Vec<f64> = (0..m).map(|i| -4.0 + i as f64).collect();
        let rs = RescaledField { center: [0.0; 4], r: 1.0, half_width: 4.0, axis, values: vec![-3.0; m.pow(4)] };
        match bubble_fit(&rs, CRITICAL_CURVATURE) {
            Ok(fit) => assert!(!fit.accepted(), "{fit:?}"),
            Err(e) => assert!(matches!(e, Error::OptimizerFailure(_))),
        }
    }

    #[test]
    fn harnack_on_uniform_density() {
        let g = make_grid(32, 1.0).unwrap();
        let h = g.spacing();
        let p = ProblemData::new(ScalarField::constant(g, 10.0));
        let u = ScalarField::zeros(g);
        let x = [0.5; 4];
        let m = harnack_measure(&u, &p, &x, &x, 2.0 * h, 8.0 * h).unwrap();
        assert!(m.hypothesis_ok);
        assert!((m.measured_exponent - 4.0).abs() <= 0.1, "{}", m.measured_exponent);
        assert!(m.holds(0.5));
        let same = harnack_measure(&u, &p, &x, &x, 2.0 * h, 2.0 * h).unwrap();
        assert_eq!(same.measured_exponent, 0.0);
        assert!(same.holds(0.0));
        assert!(harnack_measure(&u, &p, &x, &x, 4.0 * h, 2.0 * h).is_err());
        assert!(harnack_measure(&u, &p, &x, &x, h, 0.3).is_err());
    }

    #[test]
    fn harnack_holds_away_from_a_bubble() {
        let g = make_grid(32, 1.0).unwrap();
        let h = g.spacing();
        let k = CRITICAL_CURVATURE;
        let b = Bubble::new([0.0; 4], 20.0, k).unwrap();
        let centre = [0.5; 4];
        let u = crate::energy::normalize(&sample_bubble_on_torus(&b, g, &centre).unwrap()).unwrap();
        let p = ProblemData::new(ScalarField::constant(g, k));
        let y = [0.0; 4];
        let mut checked = 0;
        for x in [y, [4.0 * h, 0.0, 0.0, 0.0], [2.0 * h, 2.0 * h, 0.0, 0.0], centre] {
            for r in [h, 2.0 * h] {
                let m = harnack_measure(&u, &p, &x, &y, r, 8.0 * h).unwrap();
                if m.hypothesis_ok {
                    checked += 1;
                    assert!(m.holds(0.5), "{m:?}");
                }
            }
        }
        assert!(checked >= 4);
    }

    #[test]
    fn adams_deficit_stays_bounded_on_bubble_family() {
        let g = make_grid(32, 2.0 * PI).unwrap();
        let deficits: Vec<f64> = [4.0, 8.0, 16.0]
            .iter()
            .map(|&l| {
                let b = Bubble::new([0.0; 4], l, CRITICAL_CURVATURE).unwrap();
                adams_deficit(&sample_bubble_on_torus(&b, g, &[PI; 4]).unwrap())
            })
            .collect();
        assert!(deficits.iter().all(|d| d.is_finite()));
        assert!(deficits.windows(2).all(|w| w[1] <= w[0]), "{deficits:?}");
    }
}
