//! Uniform periodic grids on the flat 4-torus, real fields on them, and the
//! Fourier transforms between grid values and wavevector coefficients.
//!
//! Values are stored row-major with axis 0 slowest: the flat index of the
//! cell `(i0, i1, i2, i3)` is `((i0 * n + i1) * n + i2) * n + i3`, and the cell
//! centre sits at `(i0 * h, i1 * h, i2 * h, i3 * h)` with `h = period / n`.
//!
//! Coefficients are normalized so that the zero mode equals the mean of the
//! field: `c(m) = N⁻¹ Σ f(x) exp(-i κ·x)`, `f(x) = Σ c(m) exp(i κ·x)` with
//! `κ = 2π m / L`. Only the half spectrum `m3 ∈ [0, n/2]` is stored; the
//! remaining coefficients follow from Hermitian symmetry.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// A point of the torus (or of ℝ⁴ for bubble profiles).
pub type Point = [f64; 4];

pub const MIN_POINTS: usize = 8;
pub const MAX_POINTS: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TorusGrid {
    n: usize,
    period: f64,
}

impl TorusGrid {
    pub fn new(n: usize, period: f64) -> Result<Self> {
        if n % 2 != 0 {
            return Err(Error::InvalidGrid(format!("points per axis must be even, got {n}")));
        }
        if !(MIN_POINTS..=MAX_POINTS).contains(&n) {
            return Err(Error::InvalidGrid(format!(
                "points per axis must lie in [{MIN_POINTS}, {MAX_POINTS}], got {n}"
            )));
        }
        if !(period.is_finite() && period > 0.0) {
            return Err(Error::InvalidGrid(format!("period must be positive, got {period}")));
        }
        Ok(Self { n, period })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn spacing(&self) -> f64 {
        self.period / self.n as f64
    }

    pub fn total_points(&self) -> usize {
        self.n.pow(4)
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(4)
    }

    /// Euclidean volume `L⁴` of the torus.
    pub fn volume(&self) -> f64 {
        self.period.powi(4)
    }

    /// Signed mode number of a storage index along one axis, in `[-n/2, n/2)`.
    pub fn mode_of_index(&self, i: usize) -> i64 {
        let n = self.n as i64;
        let i = i as i64;
        if i < n / 2 {
            i
        } else {
            i - n
        }
    }

    /// Angular wavenumber `2π m / L`.
    pub fn wavenumber(&self, m: i64) -> f64 {
        2.0 * std::f64::consts::PI * m as f64 / self.period
    }

    pub fn flat_index(&self, idx: [usize; 4]) -> usize {
        let n = self.n;
        ((idx[0] * n + idx[1]) * n + idx[2]) * n + idx[3]
    }

    pub fn multi_index(&self, flat: usize) -> [usize; 4] {
        let n = self.n;
        [flat / (n * n * n), (flat / (n * n)) % n, (flat / n) % n, flat % n]
    }

    pub fn point(&self, flat: usize) -> Point {
        let h = self.spacing();
        self.multi_index(flat).map(|i| i as f64 * h)
    }

    /// Signed minimum-image displacement along one axis, in `[-L/2, L/2]`.
    pub fn min_image(&self, d: f64) -> f64 {
        let l = self.period;
        d - l * (d / l).round()
    }

    pub fn min_image_displacement(&self, from: &Point, to: &Point) -> Point {
        std::array::from_fn(|a| self.min_image(to[a] - from[a]))
    }

    pub fn distance(&self, a: &Point, b: &Point) -> f64 {
        self.min_image_displacement(a, b).iter().map(|d| d * d).sum::<f64>().sqrt()
    }

    /// Wraps a point into the fundamental domain `[0, L)⁴`.
    pub fn wrap(&self, p: &Point) -> Point {
        p.map(|x| {
            let w = x.rem_euclid(self.period);
            if w >= self.period {
                0.0
            } else {
                w
            }
        })
    }

    /// Grid cell whose centre is nearest to `p`.
    pub fn nearest_cell(&self, p: &Point) -> usize {
        let h = self.spacing();
        let n = self.n;
        let idx = self.wrap(p).map(|x| ((x / h).round() as usize) % n);
        self.flat_index(idx)
    }

    pub(crate) fn half_len(&self) -> usize {
        self.n * self.n * self.n * (self.n / 2 + 1)
    }
}

/// Builds a grid with `n` points per axis on a torus of side `period`.
pub fn make_grid(n: usize, period: f64) -> Result<TorusGrid> {
    TorusGrid::new(n, period)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    grid: TorusGrid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: TorusGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.total_points() {
            return Err(Error::LengthMismatch {
                expected: grid.total_points(),
                found: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { grid, values })
    }

    /// Wraps values already known to be finite and correctly sized.
    pub(crate) fn from_raw(grid: TorusGrid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.total_points());
        Self { grid, values }
    }

    pub fn from_fn(grid: TorusGrid, f: impl Fn(Point) -> f64) -> Result<Self> {
        let values = (0..grid.total_points()).map(|i| f(grid.point(i))).collect();
        Self::new(grid, values)
    }

    pub fn constant(grid: TorusGrid, c: f64) -> Self {
        Self::from_raw(grid, vec![c; grid.total_points()])
    }

    pub fn zeros(grid: TorusGrid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Flat index of the largest value; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        best
    }

    pub fn mean(&self) -> f64 {
        pairwise_sum(&self.values) / self.values.len() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_raw(self.grid, self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch);
        }
        Ok(Self::from_raw(
            self.grid,
            self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn add_scalar(&self, c: f64) -> Self {
        self.map(|v| v + c)
    }

    pub fn max_abs_diff(&self, other: &ScalarField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Deterministic pairwise summation.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 128;
    if xs.len() <= BLOCK {
        let mut s = 0.0;
        for x in xs {
            s += x;
        }
        s
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

/// Neumaier-compensated running sum for reductions over irregular index sets.
#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// `∫ field dV` by the trapezoidal (collocation) rule.
pub fn integrate(field: &ScalarField) -> f64 {
    field.grid.cell_volume() * pairwise_sum(&field.values)
}

/// `∫ a·b dV` without materialising the product.
pub fn inner_product(a: &ScalarField, b: &ScalarField) -> f64 {
    debug_assert_eq!(a.grid, b.grid);
    let prod: Vec<f64> = a.values.iter().zip(&b.values).map(|(x, y)| x * y).collect();
    a.grid.cell_volume() * pairwise_sum(&prod)
}

/// Per-axis list of `(index, squared displacement)` for cells within `radius`
/// of `centre` along that axis, using minimum-image distance.
fn axis_members(grid: &TorusGrid, centre: f64, radius: f64) -> Vec<(usize, f64)> {
    let h = grid.spacing();
    let r2 = radius * radius * (1.0 + 1e-12);
    (0..grid.n)
        .filter_map(|i| {
            let d = grid.min_image(i as f64 * h - centre);
            let d2 = d * d;
            (d2 <= r2).then_some((i, d2))
        })
        .collect()
}

/// Visits every cell whose centre lies within `radius` of `centre`.
pub(crate) fn for_each_in_ball(
    grid: &TorusGrid,
    centre: &Point,
    radius: f64,
    mut visit: impl FnMut(usize),
) {
    let r2 = radius * radius * (1.0 + 1e-12);
    let axes: Vec<Vec<(usize, f64)>> =
        centre.iter().map(|&c| axis_members(grid, c, radius)).collect();
    let n = grid.n;
    for &(i0, d0) in &axes[0] {
        for &(i1, d1) in &axes[1] {
            let s1 = d0 + d1;
            if s1 > r2 {
                continue;
            }
            for &(i2, d2) in &axes[2] {
                let s2 = s1 + d2;
                if s2 > r2 {
                    continue;
                }
                let base = ((i0 * n + i1) * n + i2) * n;
                for &(i3, d3) in &axes[3] {
                    if s2 + d3 <= r2 {
                        visit(base + i3);
                    }
                }
            }
        }
    }
}

/// `∫_{B_r(centre)} field dV` over cells whose centre lies in the
/// minimum-image ball.
pub fn ball_integral(field: &ScalarField, centre: &Point, radius: f64) -> Result<f64> {
    let grid = field.grid;
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!("ball radius must be positive, got {radius}")));
    }
    if radius > 0.5 * grid.period * (1.0 + 1e-12) {
        return Err(Error::InvalidArgument(format!(
            "ball radius {radius} exceeds half the period {}",
            0.5 * grid.period
        )));
    }
    let mut acc = CompensatedSum::default();
    for_each_in_ball(&grid, centre, radius, |i| acc.add(field.values[i]));
    Ok(grid.cell_volume() * acc.value())
}

struct Plans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    r2c: Arc<dyn RealToComplex<f64>>,
    c2r: Arc<dyn ComplexToReal<f64>>,
}

fn plans(n: usize) -> Arc<Plans> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Plans>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("fft plan cache poisoned");
    guard
        .entry(n)
        .or_insert_with(|| {
            let mut cplx = FftPlanner::new();
            let mut real = RealFftPlanner::new();
            Arc::new(Plans {
                forward: cplx.plan_fft_forward(n),
                inverse: cplx.plan_fft_inverse(n),
                r2c: real.plan_fft_forward(n),
                c2r: real.plan_fft_inverse(n),
            })
        })
        .clone()
}

/// In-place transform of every line along one axis of a row-major array.
/// Lines are `data[o * n * stride + j * stride + i]` for `j in 0..n`.
fn fft_axis(data: &mut [Complex64], n: usize, stride: usize, plan: &dyn Fft<f64>) {
    const BATCH: usize = 64;
    let outer = data.len() / (n * stride);
    let batch = BATCH.min(stride);
    let mut buf = vec![Complex64::new(0.0, 0.0); batch * n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); plan.get_inplace_scratch_len()];
    for o in 0..outer {
        let base = o * n * stride;
        let mut i0 = 0;
        while i0 < stride {
            let b = batch.min(stride - i0);
            for j in 0..n {
                let row = base + j * stride + i0;
                for t in 0..b {
                    buf[t * n + j] = data[row + t];
                }
            }
            plan.process_with_scratch(&mut buf[..b * n], &mut scratch);
            for j in 0..n {
                let row = base + j * stride + i0;
                for t in 0..b {
                    data[row + t] = buf[t * n + j];
                }
            }
            i0 += b;
        }
    }
}

/// Fourier coefficients of a real field, half-spectrum storage.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralField {
    grid: TorusGrid,
    coeffs: Vec<Complex64>,
}

impl SpectralField {
    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub(crate) fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub(crate) fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }

    pub(crate) fn from_coeffs(grid: TorusGrid, coeffs: Vec<Complex64>) -> Self {
        debug_assert_eq!(coeffs.len(), grid.half_len());
        Self { grid, coeffs }
    }

    pub fn zeros(grid: TorusGrid) -> Self {
        Self::from_coeffs(grid, vec![Complex64::new(0.0, 0.0); grid.half_len()])
    }

    /// Coefficient of the wavevector `m` (any integers; taken modulo `n`).
    pub fn coefficient(&self, m: [i64; 4]) -> Complex64 {
        let n = self.grid.n as i64;
        let h = self.grid.n / 2 + 1;
        let idx = m.map(|x| x.rem_euclid(n) as usize);
        if idx[3] < h {
            self.coeffs[self.half_index(idx, h)]
        } else {
            let neg = m.map(|x| (-x).rem_euclid(n) as usize);
            self.coeffs[self.half_index(neg, h)].conj()
        }
    }

    fn half_index(&self, idx: [usize; 4], h: usize) -> usize {
        let n = self.grid.n;
        ((idx[0] * n + idx[1]) * n + idx[2]) * h + idx[3]
    }

    /// Multiplies every coefficient by `symbol(|κ|²)`.
    pub fn apply_radial_symbol(&mut self, symbol: impl Fn(f64) -> f64) {
        let k2 = SymbolTable::new(&self.grid);
        let n = self.grid.n;
        let h = n / 2 + 1;
        let mut p = 0;
        for i0 in 0..n {
            for i1 in 0..n {
                let s01 = k2.axis[i0] + k2.axis[i1];
                for i2 in 0..n {
                    let s012 = s01 + k2.axis[i2];
                    for i3 in 0..h {
                        self.coeffs[p] *= symbol(s012 + k2.axis[i3]);
                        p += 1;
                    }
                }
            }
        }
    }

    /// `Σ_m |c(m)|²` over the full (Hermitian-completed) spectrum.
    pub fn power_sum(&self) -> f64 {
        let n = self.grid.n;
        let h = n / 2 + 1;
        let mut acc = CompensatedSum::default();
        for (p, c) in self.coeffs.iter().enumerate() {
            let i3 = p % h;
            let w = if i3 == 0 || i3 == n / 2 { 1.0 } else { 2.0 };
            acc.add(w * c.norm_sqr());
        }
        acc.value()
    }

    /// Largest `|c(-m) - conj(c(m))|` over the self-paired planes of the
    /// half spectrum.
    pub fn hermitian_defect(&self) -> f64 {
        let n = self.grid.n;
        let h = n / 2 + 1;
        let mut defect: f64 = 0.0;
        for i3 in [0, n / 2] {
            for i0 in 0..n {
                for i1 in 0..n {
                    for i2 in 0..n {
                        let a = self.coeffs[self.half_index([i0, i1, i2, i3], h)];
                        let neg = [(n - i0) % n, (n - i1) % n, (n - i2) % n, i3];
                        let b = self.coeffs[self.half_index(neg, h)];
                        defect = defect.max((b - a.conj()).norm());
                    }
                }
            }
        }
        defect
    }

    pub fn max_norm(&self) -> f64 {
        self.coeffs.iter().fold(0.0, |m, c| m.max(c.norm()))
    }
}

/// Squared angular wavenumber per storage index along one axis.
pub(crate) struct SymbolTable {
    pub axis: Vec<f64>,
}

impl SymbolTable {
    pub fn new(grid: &TorusGrid) -> Self {
        let axis = (0..grid.n)
            .map(|i| {
                let k = grid.wavenumber(grid.mode_of_index(i));
                k * k
            })
            .collect();
        Self { axis }
    }
}

pub fn forward_transform(field: &ScalarField) -> SpectralField {
    let grid = field.grid;
    let n = grid.n;
    let h = n / 2 + 1;
    let p = plans(n);
    let mut coeffs = vec![Complex64::new(0.0, 0.0); grid.half_len()];
    let mut row = vec![0.0; n];
    let mut scratch = p.r2c.make_scratch_vec();
    for (r, out) in coeffs.chunks_exact_mut(h).enumerate() {
        row.copy_from_slice(&field.values[r * n..(r + 1) * n]);
        p.r2c
            .process_with_scratch(&mut row, out, &mut scratch)
            .expect("real transform buffers sized by construction");
    }
    fft_axis(&mut coeffs, n, h, p.forward.as_ref());
    fft_axis(&mut coeffs, n, n * h, p.forward.as_ref());
    fft_axis(&mut coeffs, n, n * n * h, p.forward.as_ref());
    let scale = 1.0 / grid.total_points() as f64;
    for c in coeffs.iter_mut() {
        *c *= scale;
    }
    SpectralField { grid, coeffs }
}

/// Inverse transform; rejects spectra whose Hermitian defect exceeds
/// `1e-12 · max|c|`.
pub fn inverse_transform(spec: &SpectralField) -> Result<ScalarField> {
    let defect = spec.hermitian_defect();
    let allowed = 1e-12 * spec.max_norm();
    if defect > allowed {
        return Err(Error::HermitianViolation { defect, allowed });
    }
    Ok(inverse_unchecked(spec.clone()))
}

/// Inverse transform of a spectrum that is Hermitian by construction.
pub(crate) fn inverse_unchecked(spec: SpectralField) -> ScalarField {
    let grid = spec.grid;
    let n = grid.n;
    let h = n / 2 + 1;
    let p = plans(n);
    let mut coeffs = spec.coeffs;
    fft_axis(&mut coeffs, n, n * n * h, p.inverse.as_ref());
    fft_axis(&mut coeffs, n, n * h, p.inverse.as_ref());
    fft_axis(&mut coeffs, n, h, p.inverse.as_ref());
    let mut values = vec![0.0; grid.total_points()];
    let mut scratch = p.c2r.make_scratch_vec();
    for (r, line) in coeffs.chunks_exact_mut(h).enumerate() {
        line[0].im = 0.0;
        line[h - 1].im = 0.0;
        p.c2r
            .process_with_scratch(line, &mut values[r * n..(r + 1) * n], &mut scratch)
            .expect("real transform buffers sized by construction");
    }
    ScalarField::from_raw(grid, values)
}
