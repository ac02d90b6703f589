//! Uniform rectangular grids and complex spinor fields living on them.
//!
//! Values are stored cell-major with the spin component innermost: amplitude
//! `(cell, s)` lives at `cell * spin_dim + s`, and cells are numbered in
//! row-major order (the last axis varies fastest). Lattice point `j` on an
//! axis sits at `origin + j * spacing` and is the centre of the cell
//! `[x_j - h/2, x_j + h/2)`.
//!
//! Spectral images use the standard FFT wavenumber layout: index `j` maps to
//! `2π/L · j` for `j < N/2` and `2π/L · (j - N)` otherwise, so the Nyquist
//! mode carries the negative wavenumber `-π/h`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};
use thiserror::Error;

pub mod snapshot;

/// Maximum number of grid axes (spatial coordinates of all particles together).
pub const MAX_AXES: usize = 3;

/// Default bound on `cells × spin_dim`, 2^26 amplitudes (1 GiB of `Complex64`).
pub const DEFAULT_MEMORY_CAP: usize = 1 << 26;

/// Boundary amplitude (relative to the field maximum) above which a field is
/// treated as touching the edge of a non-periodic axis.
pub const BOUNDARY_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatticeError {
    #[error("axis {axis}: {points} points is not a power of two >= 8")]
    BadPointCount { axis: usize, points: usize },
    #[error("axis {axis}: extent must be positive and finite, got {extent}")]
    BadExtent { axis: usize, extent: f64 },
    #[error("grid needs between 1 and {MAX_AXES} axes, got {0}")]
    AxisCount(usize),
    #[error("{requested} amplitudes exceed the memory cap of {cap}")]
    MemoryCap { requested: usize, cap: usize },
    #[error("spin dimension must be at least 1")]
    ZeroSpin,
    #[error("fields live on different grids or spin dimensions")]
    GridMismatch,
    #[error("axis index {0} out of range")]
    BadAxis(usize),
    #[error("axis {axis} is not periodic and the field reaches its boundary (ratio {ratio:e})")]
    BoundaryAmplitude { axis: usize, ratio: f64 },
    #[error("field has zero or non-finite norm")]
    ZeroNorm,
    #[error("expected {expected} values, got {got}")]
    Length { expected: usize, got: usize },
    #[error("negative density value {0}")]
    NegativeDensity(f64),
}

/// One axis of a rectangular grid.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Axis {
    pub origin: f64,
    pub extent: f64,
    pub points: usize,
    pub periodic: bool,
}

impl Axis {
    /// Periodic axis covering `[0, extent)`.
    pub fn new(extent: f64, points: usize) -> Self {
        Self { origin: 0.0, extent, points, periodic: true }
    }

    /// Periodic axis covering `[-extent/2, extent/2)`, so `0` is a lattice point.
    pub fn centered(extent: f64, points: usize) -> Self {
        Self { origin: -0.5 * extent, extent, points, periodic: true }
    }

    pub fn with_periodic(mut self, periodic: bool) -> Self {
        self.periodic = periodic;
        self
    }

    pub fn with_origin(mut self, origin: f64) -> Self {
        self.origin = origin;
        self
    }

    pub fn spacing(&self) -> f64 {
        self.extent / self.points as f64
    }

    pub fn coord(&self, index: usize) -> f64 {
        self.origin + index as f64 * self.spacing()
    }

    /// Last lattice coordinate.
    pub fn last(&self) -> f64 {
        self.coord(self.points - 1)
    }

    pub fn wavenumber(&self, index: usize) -> f64 {
        let n = self.points as i64;
        let j = index as i64;
        let signed = if j < n / 2 { j } else { j - n };
        2.0 * PI / self.extent * signed as f64
    }

    /// Largest wavenumber magnitude representable on the axis.
    pub fn max_wavenumber(&self) -> f64 {
        PI / self.spacing()
    }

    /// Map a coordinate into `[origin, origin + extent)`.
    pub fn wrap(&self, x: f64) -> f64 {
        let r = (x - self.origin).rem_euclid(self.extent);
        self.origin + r
    }

    /// Whether `x` lies inside the region covered by lattice points (for
    /// non-periodic axes) or anywhere (periodic axes).
    pub fn contains(&self, x: f64) -> bool {
        if !x.is_finite() {
            return false;
        }
        self.periodic || (x >= self.origin && x <= self.last())
    }

    fn validate(&self, axis: usize) -> Result<(), LatticeError> {
        if !(self.extent.is_finite() && self.extent > 0.0) || !self.origin.is_finite() {
            return Err(LatticeError::BadExtent { axis, extent: self.extent });
        }
        if self.points < 8 || !self.points.is_power_of_two() {
            return Err(LatticeError::BadPointCount { axis, points: self.points });
        }
        Ok(())
    }
}

/// Uniform rectangular grid with up to three axes.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Grid {
    axes: Vec<Axis>,
    memory_cap: usize,
}

impl Grid {
    pub fn new(axes: Vec<Axis>) -> Result<Self, LatticeError> {
        Self::with_memory_cap(axes, DEFAULT_MEMORY_CAP)
    }

    pub fn with_memory_cap(axes: Vec<Axis>, memory_cap: usize) -> Result<Self, LatticeError> {
        if axes.is_empty() || axes.len() > MAX_AXES {
            return Err(LatticeError::AxisCount(axes.len()));
        }
        for (i, a) in axes.iter().enumerate() {
            a.validate(i)?;
        }
        let cells = axes
            .iter()
            .try_fold(1usize, |acc, a| acc.checked_mul(a.points))
            .unwrap_or(usize::MAX);
        if cells > memory_cap {
            return Err(LatticeError::MemoryCap { requested: cells, cap: memory_cap });
        }
        Ok(Self { axes, memory_cap })
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn axis(&self, i: usize) -> &Axis {
        &self.axes[i]
    }

    pub fn ndim(&self) -> usize {
        self.axes.len()
    }

    pub fn memory_cap(&self) -> usize {
        self.memory_cap
    }

    pub fn cells(&self) -> usize {
        self.axes.iter().map(|a| a.points).product()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.points).collect()
    }

    pub fn spacings(&self) -> Vec<f64> {
        self.axes.iter().map(Axis::spacing).collect()
    }

    pub fn cell_volume(&self) -> f64 {
        self.axes.iter().map(Axis::spacing).product()
    }

    /// Volume element of the reciprocal lattice.
    pub fn spectral_cell_volume(&self) -> f64 {
        self.axes.iter().map(|a| 2.0 * PI / a.extent).product()
    }

    /// Row-major stride of each axis.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.ndim()];
        for i in (0..self.ndim().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.axes[i + 1].points;
        }
        strides
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        let mut idx = 0;
        for (a, &m) in self.axes.iter().zip(multi) {
            idx = idx * a.points + m;
        }
        idx
    }

    pub fn multi_index(&self, mut flat: usize) -> [usize; MAX_AXES] {
        let mut out = [0; MAX_AXES];
        for i in (0..self.ndim()).rev() {
            let n = self.axes[i].points;
            out[i] = flat % n;
            flat /= n;
        }
        out
    }

    /// Coordinates of a cell centre; unused trailing entries are zero.
    pub fn coords(&self, flat: usize) -> [f64; MAX_AXES] {
        let m = self.multi_index(flat);
        let mut out = [0.0; MAX_AXES];
        for (i, a) in self.axes.iter().enumerate() {
            out[i] = a.coord(m[i]);
        }
        out
    }

    pub fn wavenumbers(&self, flat: usize) -> [f64; MAX_AXES] {
        let m = self.multi_index(flat);
        let mut out = [0.0; MAX_AXES];
        for (i, a) in self.axes.iter().enumerate() {
            out[i] = a.wavenumber(m[i]);
        }
        out
    }

    /// Grid built from a subset of this grid's axes, in the given order.
    pub fn sub_grid(&self, axes: &[usize]) -> Result<Grid, LatticeError> {
        let mut picked = Vec::with_capacity(axes.len());
        for &a in axes {
            picked.push(*self.axes.get(a).ok_or(LatticeError::BadAxis(a))?);
        }
        Grid::with_memory_cap(picked, self.memory_cap)
    }

    /// Whether `point` lies inside the grid (wrapping periodic axes).
    pub fn contains(&self, point: &[f64]) -> bool {
        point.len() == self.ndim() && self.axes.iter().zip(point).all(|(a, &x)| a.contains(x))
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .axes
            .iter()
            .map(|a| format!("[{}, {}) x {}{}", a.origin, a.origin + a.extent, a.points, if a.periodic { "" } else { " (open)" }))
            .collect();
        write!(f, "{}", parts.join(" ⊗ "))
    }
}

/// Complex amplitudes with `spin_dim` components per grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SpinorField {
    grid: Grid,
    spin_dim: usize,
    amplitudes: Vec<Complex64>,
}

impl SpinorField {
    pub fn zeros(grid: &Grid, spin_dim: usize) -> Result<Self, LatticeError> {
        if spin_dim == 0 {
            return Err(LatticeError::ZeroSpin);
        }
        let len = grid.cells().checked_mul(spin_dim).unwrap_or(usize::MAX);
        if len > grid.memory_cap() {
            return Err(LatticeError::MemoryCap { requested: len, cap: grid.memory_cap() });
        }
        Ok(Self { grid: grid.clone(), spin_dim, amplitudes: vec![Complex64::new(0.0, 0.0); len] })
    }

    pub fn from_amplitudes(grid: &Grid, spin_dim: usize, amplitudes: Vec<Complex64>) -> Result<Self, LatticeError> {
        let mut field = Self::zeros(grid, spin_dim)?;
        if amplitudes.len() != field.amplitudes.len() {
            return Err(LatticeError::Length { expected: field.amplitudes.len(), got: amplitudes.len() });
        }
        field.amplitudes = amplitudes;
        Ok(field)
    }

    /// Scalar field sampled from `f` at every cell centre.
    pub fn scalar_from_fn(grid: &Grid, f: impl Fn(&[f64]) -> Complex64) -> Result<Self, LatticeError> {
        Self::from_fn(grid, 1, |x, out| out[0] = f(x))
    }

    /// Spinor field; `f` receives the cell coordinates and writes the spin components.
    pub fn from_fn(grid: &Grid, spin_dim: usize, f: impl Fn(&[f64], &mut [Complex64])) -> Result<Self, LatticeError> {
        let mut field = Self::zeros(grid, spin_dim)?;
        let nd = grid.ndim();
        for (cell, chunk) in field.amplitudes.chunks_exact_mut(spin_dim).enumerate() {
            let x = grid.coords(cell);
            f(&x[..nd], chunk);
        }
        Ok(field)
    }

    /// Scalar profile times a constant spinor.
    pub fn product(grid: &Grid, spinor: &[Complex64], f: impl Fn(&[f64]) -> Complex64) -> Result<Self, LatticeError> {
        Self::from_fn(grid, spinor.len(), |x, out| {
            let v = f(x);
            for (o, s) in out.iter_mut().zip(spinor) {
                *o = v * s;
            }
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn spin_dim(&self) -> usize {
        self.spin_dim
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub fn amplitudes_mut(&mut self) -> &mut [Complex64] {
        &mut self.amplitudes
    }

    pub fn into_amplitudes(self) -> Vec<Complex64> {
        self.amplitudes
    }

    pub fn value(&self, cell: usize, spin: usize) -> Complex64 {
        self.amplitudes[cell * self.spin_dim + spin]
    }

    pub fn cell(&self, cell: usize) -> &[Complex64] {
        &self.amplitudes[cell * self.spin_dim..(cell + 1) * self.spin_dim]
    }

    /// One spin component as a scalar field.
    pub fn component(&self, spin: usize) -> SpinorField {
        let amplitudes = self.amplitudes.iter().skip(spin).step_by(self.spin_dim).copied().collect();
        SpinorField { grid: self.grid.clone(), spin_dim: 1, amplitudes }
    }

    pub fn same_shape(&self, other: &SpinorField) -> bool {
        self.spin_dim == other.spin_dim && self.grid == other.grid
    }

    fn check_shape(&self, other: &SpinorField) -> Result<(), LatticeError> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(LatticeError::GridMismatch)
        }
    }

    /// `Σ_cells Σ_s conj(self_s) other_s · dV`.
    pub fn inner_product(&self, other: &SpinorField) -> Result<Complex64, LatticeError> {
        self.check_shape(other)?;
        let mut acc = Complex64::new(0.0, 0.0);
        for (cell_a, cell_b) in self.amplitudes.chunks_exact(self.spin_dim).zip(other.amplitudes.chunks_exact(self.spin_dim)) {
            let mut local = Complex64::new(0.0, 0.0);
            for (a, b) in cell_a.iter().zip(cell_b) {
                local += a.conj() * b;
            }
            acc += local;
        }
        Ok(acc * self.grid.cell_volume())
    }

    /// `‖ψ‖²`, summed in the same order as [`DensityField::integral`].
    pub fn norm_sqr(&self) -> f64 {
        self.density().integral()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn normalized(mut self) -> Result<Self, LatticeError> {
        let n = self.norm();
        if !(n.is_finite() && n > 0.0) {
            return Err(LatticeError::ZeroNorm);
        }
        let inv = 1.0 / n;
        self.amplitudes.iter_mut().for_each(|a| *a *= inv);
        Ok(self)
    }

    /// `|⟨self|other⟩| / (‖self‖‖other‖)`.
    pub fn fidelity(&self, other: &SpinorField) -> Result<f64, LatticeError> {
        let ip = self.inner_product(other)?;
        let denom = self.norm() * other.norm();
        if denom == 0.0 {
            return Err(LatticeError::ZeroNorm);
        }
        Ok(ip.norm() / denom)
    }

    pub fn density(&self) -> DensityField {
        let values = self
            .amplitudes
            .chunks_exact(self.spin_dim)
            .map(|c| c.iter().map(Complex64::norm_sqr).sum())
            .collect();
        DensityField { grid: self.grid.clone(), values }
    }

    pub fn conj(&self) -> SpinorField {
        let amplitudes = self.amplitudes.iter().map(Complex64::conj).collect();
        SpinorField { grid: self.grid.clone(), spin_dim: self.spin_dim, amplitudes }
    }

    pub fn scaled(&self, c: Complex64) -> SpinorField {
        let amplitudes = self.amplitudes.iter().map(|a| a * c).collect();
        SpinorField { grid: self.grid.clone(), spin_dim: self.spin_dim, amplitudes }
    }

    /// `a·self + b·other`.
    pub fn combine(&self, a: Complex64, other: &SpinorField, b: Complex64) -> Result<SpinorField, LatticeError> {
        self.check_shape(other)?;
        let amplitudes = self.amplitudes.iter().zip(&other.amplitudes).map(|(x, y)| a * x + b * y).collect();
        Ok(SpinorField { grid: self.grid.clone(), spin_dim: self.spin_dim, amplitudes })
    }

    pub fn max_abs(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm()).fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &SpinorField) -> Result<f64, LatticeError> {
        self.check_shape(other)?;
        Ok(self.amplitudes.iter().zip(&other.amplitudes).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max))
    }

    /// `‖self - other‖` in the grid L² norm.
    pub fn l2_distance(&self, other: &SpinorField) -> Result<f64, LatticeError> {
        self.check_shape(other)?;
        let s: f64 = self.amplitudes.iter().zip(&other.amplitudes).map(|(a, b)| (a - b).norm_sqr()).sum();
        Ok((s * self.grid.cell_volume()).sqrt())
    }

    pub fn is_finite(&self) -> bool {
        self.amplitudes.iter().all(|a| a.re.is_finite() && a.im.is_finite())
    }

    /// Largest amplitude on the two boundary slabs of `axis`, relative to the field maximum.
    pub fn boundary_ratio(&self, axis: usize) -> Result<f64, LatticeError> {
        if axis >= self.grid.ndim() {
            return Err(LatticeError::BadAxis(axis));
        }
        let max = self.max_abs();
        if max == 0.0 {
            return Ok(0.0);
        }
        let n = self.grid.axis(axis).points;
        let mut edge: f64 = 0.0;
        for cell in 0..self.grid.cells() {
            let m = self.grid.multi_index(cell)[axis];
            if m == 0 || m == n - 1 {
                for a in self.cell(cell) {
                    edge = edge.max(a.norm());
                }
            }
        }
        Ok(edge / max)
    }

    /// Logs a warning for every axis whose boundary amplitude exceeds the tolerance.
    pub fn warn_if_touching_boundary(&self, context: &str) {
        for axis in 0..self.grid.ndim() {
            if let Ok(r) = self.boundary_ratio(axis) {
                if r * r > BOUNDARY_TOLERANCE {
                    log::warn!("{context}: density on the boundary of axis {axis} is {:.2e} of the maximum", r * r);
                }
            }
        }
    }

    /// Spectral derivative `∂ψ/∂x_axis`.
    pub fn gradient(&self, axis: usize) -> Result<SpinorField, LatticeError> {
        if axis >= self.grid.ndim() {
            return Err(LatticeError::BadAxis(axis));
        }
        if !self.grid.axis(axis).periodic {
            let ratio = self.boundary_ratio(axis)?;
            if ratio >= BOUNDARY_TOLERANCE {
                return Err(LatticeError::BoundaryAmplitude { axis, ratio });
            }
        }
        let mut out = self.clone();
        let ax = *self.grid.axis(axis);
        let n = ax.points;
        let scale = 1.0 / n as f64;
        let multipliers: Vec<Complex64> = (0..n)
            .map(|j| if j == n / 2 { Complex64::new(0.0, 0.0) } else { Complex64::new(0.0, ax.wavenumber(j) * scale) })
            .collect();
        for_each_line(&self.grid, self.spin_dim, axis, &mut out.amplitudes, |buf| {
            fft_in_place(buf, FftDirection::Forward);
            for (b, m) in buf.iter_mut().zip(&multipliers) {
                *b *= m;
            }
            fft_in_place(buf, FftDirection::Inverse);
        });
        Ok(out)
    }

    /// Unitary spectral image, normalized so that `Σ|ψ̂|² dk = Σ|ψ|² dx`.
    pub fn spectral_transform(&self) -> SpectralField {
        let mut amplitudes = self.amplitudes.clone();
        transform_all_axes(&self.grid, self.spin_dim, &mut amplitudes, FftDirection::Forward);
        let scale: f64 = self.grid.axes().iter().map(|a| a.spacing() / (2.0 * PI).sqrt()).product();
        amplitudes.iter_mut().for_each(|a| *a *= scale);
        SpectralField { grid: self.grid.clone(), spin_dim: self.spin_dim, amplitudes }
    }
}

/// Spectral image of a [`SpinorField`]; cell `j` holds the amplitude at
/// wavenumber [`Grid::wavenumbers`]`(j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField {
    grid: Grid,
    spin_dim: usize,
    amplitudes: Vec<Complex64>,
}

impl SpectralField {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn spin_dim(&self) -> usize {
        self.spin_dim
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub fn norm_sqr(&self) -> f64 {
        let s: f64 = self.amplitudes.iter().map(Complex64::norm_sqr).sum();
        s * self.grid.spectral_cell_volume()
    }

    /// Spin-summed `|ψ̂(k)|²` per reciprocal cell.
    pub fn density(&self) -> Vec<f64> {
        self.amplitudes.chunks_exact(self.spin_dim).map(|c| c.iter().map(Complex64::norm_sqr).sum()).collect()
    }

    pub fn inverse(&self) -> SpinorField {
        let mut amplitudes = self.amplitudes.clone();
        transform_all_axes(&self.grid, self.spin_dim, &mut amplitudes, FftDirection::Inverse);
        let scale: f64 = self
            .grid
            .axes()
            .iter()
            .map(|a| (2.0 * PI / a.extent) / (2.0 * PI).sqrt())
            .product();
        amplitudes.iter_mut().for_each(|a| *a *= scale);
        SpinorField { grid: self.grid.clone(), spin_dim: self.spin_dim, amplitudes }
    }
}

/// Non-negative real values per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    grid: Grid,
    values: Vec<f64>,
}

impl DensityField {
    pub fn new(grid: &Grid, values: Vec<f64>) -> Result<Self, LatticeError> {
        if values.len() != grid.cells() {
            return Err(LatticeError::Length { expected: grid.cells(), got: values.len() });
        }
        if let Some(&bad) = values.iter().find(|v| !(**v >= 0.0)) {
            return Err(LatticeError::NegativeDensity(bad));
        }
        Ok(Self { grid: grid.clone(), values })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Probability mass per cell (`value × dV`).
    pub fn cell_masses(&self) -> Vec<f64> {
        let dv = self.grid.cell_volume();
        self.values.iter().map(|v| v * dv).collect()
    }

    /// Mass summed over all axes except `axis`, one entry per lattice point.
    pub fn marginal_masses(&self, axis: usize) -> Vec<f64> {
        let n = self.grid.axis(axis).points;
        let dv = self.grid.cell_volume();
        let mut out = vec![0.0; n];
        for (cell, v) in self.values.iter().enumerate() {
            out[self.grid.multi_index(cell)[axis]] += v * dv;
        }
        out
    }
}

/// Real scalar field (e.g. a potential); unlike [`DensityField`] it may be negative.
#[derive(Debug, Clone, PartialEq)]
pub struct RealField {
    grid: Grid,
    values: Vec<f64>,
}

impl RealField {
    pub fn new(grid: &Grid, values: Vec<f64>) -> Result<Self, LatticeError> {
        if values.len() != grid.cells() {
            return Err(LatticeError::Length { expected: grid.cells(), got: values.len() });
        }
        Ok(Self { grid: grid.clone(), values })
    }

    pub fn zeros(grid: &Grid) -> Self {
        Self { grid: grid.clone(), values: vec![0.0; grid.cells()] }
    }

    pub fn from_fn(grid: &Grid, f: impl Fn(&[f64]) -> f64) -> Self {
        let nd = grid.ndim();
        let values = (0..grid.cells()).map(|c| f(&grid.coords(c)[..nd])).collect();
        Self { grid: grid.clone(), values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn add(&self, other: &RealField) -> Result<RealField, LatticeError> {
        if self.grid != other.grid {
            return Err(LatticeError::GridMismatch);
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect();
        Ok(Self { grid: self.grid.clone(), values })
    }
}

type PlanCache = HashMap<(usize, bool), Arc<dyn Fft<f64>>>;

thread_local! {
    static PLANNER: RefCell<(FftPlanner<f64>, PlanCache)> = RefCell::new((FftPlanner::new(), HashMap::new()));
    static SCRATCH: RefCell<Vec<Complex64>> = const { RefCell::new(Vec::new()) };
}

fn plan(len: usize, direction: FftDirection) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        let key = (len, direction == FftDirection::Forward);
        if let Some(f) = p.1.get(&key) {
            return f.clone();
        }
        let f = p.0.plan_fft(len, direction);
        p.1.insert(key, f.clone());
        f
    })
}

/// Unnormalized in-place FFT using per-thread plans and scratch space.
pub(crate) fn fft_in_place(buf: &mut [Complex64], direction: FftDirection) {
    let fft = plan(buf.len(), direction);
    SCRATCH.with(|s| {
        let mut s = s.borrow_mut();
        let need = fft.get_inplace_scratch_len();
        if s.len() < need {
            s.resize(need, Complex64::new(0.0, 0.0));
        }
        fft.process_with_scratch(buf, &mut s[..need]);
    });
}

/// Runs `f` on every 1-D line of `data` along `axis`, for every spin component.
pub(crate) fn for_each_line(grid: &Grid, spin_dim: usize, axis: usize, data: &mut [Complex64], mut f: impl FnMut(&mut [Complex64])) {
    let n = grid.axis(axis).points;
    let strides = grid.strides();
    let stride = strides[axis] * spin_dim;
    let outer: usize = grid.axes()[..axis].iter().map(|a| a.points).product();
    let inner = strides[axis];
    let mut line = vec![Complex64::new(0.0, 0.0); n];
    for o in 0..outer {
        for i in 0..inner {
            for s in 0..spin_dim {
                let base = (o * n * inner + i) * spin_dim + s;
                if stride == 1 {
                    f(&mut data[base..base + n]);
                    continue;
                }
                for (j, l) in line.iter_mut().enumerate() {
                    *l = data[base + j * stride];
                }
                f(&mut line);
                for (j, l) in line.iter().enumerate() {
                    data[base + j * stride] = *l;
                }
            }
        }
    }
}

/// Unnormalized transform over every axis.
pub(crate) fn transform_all_axes(grid: &Grid, spin_dim: usize, data: &mut [Complex64], direction: FftDirection) {
    for axis in 0..grid.ndim() {
        for_each_line(grid, spin_dim, axis, data, |buf| fft_in_place(buf, direction));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn ring() -> Grid {
        Grid::new(vec![Axis::new(2.0 * PI, 64)]).unwrap()
    }

    fn gaussian(grid: &Grid, sigma: f64) -> SpinorField {
        SpinorField::scalar_from_fn(grid, |x| c((-x.iter().map(|v| v * v).sum::<f64>() / (4.0 * sigma * sigma)).exp(), 0.0))
            .unwrap()
            .normalized()
            .unwrap()
    }

    #[test]
    fn grid_spacing_and_cells() {
        let g = ring();
        assert_eq!(g.axis(0).spacing(), 2.0 * PI / 64.0);
        let g2 = Grid::new(vec![Axis::centered(20.0, 256), Axis::centered(20.0, 256)]).unwrap();
        assert_eq!(g2.cells(), 65536);
        assert_eq!(g2.ndim(), 2);
    }

    #[test]
    fn grid_rejects_bad_axes() {
        assert_eq!(
            Grid::new(vec![Axis::new(10.0, 7)]).unwrap_err(),
            LatticeError::BadPointCount { axis: 0, points: 7 }
        );
        assert!(matches!(Grid::new(vec![Axis::new(10.0, 4)]), Err(LatticeError::BadPointCount { .. })));
        assert!(matches!(Grid::new(vec![Axis::new(-1.0, 8)]), Err(LatticeError::BadExtent { .. })));
        assert!(matches!(Grid::new(vec![]), Err(LatticeError::AxisCount(0))));
        assert!(matches!(Grid::new(vec![Axis::new(1.0, 8); 4]), Err(LatticeError::AxisCount(4))));
        assert!(matches!(
            Grid::with_memory_cap(vec![Axis::new(1.0, 64), Axis::new(1.0, 64)], 1000),
            Err(LatticeError::MemoryCap { .. })
        ));
        let g = Grid::with_memory_cap(vec![Axis::new(1.0, 32)], 40).unwrap();
        assert!(matches!(SpinorField::zeros(&g, 2), Err(LatticeError::MemoryCap { .. })));
    }

    #[test]
    fn index_round_trip() {
        let g = Grid::new(vec![Axis::new(1.0, 8), Axis::new(1.0, 16), Axis::new(1.0, 32)]).unwrap();
        for flat in [0, 1, 17, 1000, g.cells() - 1] {
            let m = g.multi_index(flat);
            assert_eq!(g.flat_index(&m[..3]), flat);
        }
        assert_eq!(g.strides(), vec![512, 32, 1]);
    }

    #[test]
    fn wavenumber_layout() {
        let a = Axis::new(2.0 * PI, 8);
        let ks: Vec<f64> = (0..8).map(|j| a.wavenumber(j)).collect();
        assert_eq!(ks, vec![0.0, 1.0, 2.0, 3.0, -4.0, -3.0, -2.0, -1.0]);
    }

    #[test]
    fn normalized_gaussian_inner_product_is_one() {
        let g = Grid::new(vec![Axis::centered(40.0, 512)]).unwrap();
        let psi = gaussian(&g, 1.0);
        assert!((psi.inner_product(&psi).unwrap() - c(1.0, 0.0)).norm() < 1e-12);
        assert!((psi.density().integral() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn one_hot_cells_are_orthogonal() {
        let g = ring();
        let mut a = SpinorField::zeros(&g, 1).unwrap();
        let mut b = a.clone();
        a.amplitudes_mut()[3] = c(1.0, 0.0);
        b.amplitudes_mut()[10] = c(0.0, 1.0);
        assert_eq!(a.inner_product(&b).unwrap(), c(0.0, 0.0));
    }

    #[test]
    fn plane_waves_are_orthogonal() {
        let g = ring();
        let k1 = SpinorField::scalar_from_fn(&g, |x| Complex64::from_polar(1.0, x[0])).unwrap();
        let k2 = SpinorField::scalar_from_fn(&g, |x| Complex64::from_polar(1.0, 2.0 * x[0])).unwrap();
        // brute-force discrete sum, independent of inner_product
        let h = g.axis(0).spacing();
        let brute: Complex64 = (0..64)
            .map(|j| {
                let x = j as f64 * h;
                Complex64::from_polar(1.0, -x) * Complex64::from_polar(1.0, 2.0 * x) * h
            })
            .sum();
        assert!(brute.norm() < 1e-12);
        assert!(k1.inner_product(&k2).unwrap().norm() < 1e-12);
    }

    #[test]
    fn inner_product_rejects_mismatch() {
        let a = SpinorField::zeros(&ring(), 1).unwrap();
        let b = SpinorField::zeros(&ring(), 2).unwrap();
        assert_eq!(a.inner_product(&b), Err(LatticeError::GridMismatch));
    }

    #[test]
    fn density_sums_spin_components() {
        let g = Grid::new(vec![Axis::centered(20.0, 128)]).unwrap();
        let f = |x: &[f64]| c((-x[0] * x[0]).exp(), 0.3 * x[0]);
        let up = SpinorField::product(&g, &[c(1.0, 0.0), c(0.0, 0.0)], f).unwrap();
        let scalar = SpinorField::scalar_from_fn(&g, f).unwrap();
        assert_eq!(up.density().values(), scalar.density().values());

        let r = std::f64::consts::FRAC_1_SQRT_2;
        let mixed = SpinorField::product(&g, &[c(r, 0.0), c(0.0, r)], f).unwrap();
        for (a, b) in mixed.density().values().iter().zip(scalar.density().values()) {
            assert!((a - b).abs() <= 1e-15 * b.max(1.0));
        }
    }

    #[test]
    fn gradient_of_plane_wave() {
        let g = ring();
        let psi = SpinorField::scalar_from_fn(&g, |x| Complex64::from_polar(1.0, 3.0 * x[0])).unwrap();
        let d = psi.gradient(0).unwrap();
        let expected = psi.scaled(c(0.0, 3.0));
        assert!(d.max_abs_diff(&expected).unwrap() < 1e-10);
    }

    #[test]
    fn gradient_of_constant_vanishes() {
        let g = ring();
        let psi = SpinorField::scalar_from_fn(&g, |_| c(0.7, -0.2)).unwrap();
        assert!(psi.gradient(0).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let g = Grid::new(vec![Axis::centered(40.0, 1024)]).unwrap();
        let psi = SpinorField::scalar_from_fn(&g, |x| c((-x[0] * x[0] / 4.0).exp(), 0.0)).unwrap();
        let d = psi.gradient(0).unwrap();
        let h = g.axis(0).spacing();
        let a = psi.amplitudes();
        let mut worst: f64 = 0.0;
        for j in 2..1022 {
            // fourth-order centred stencil (Richardson-combined centred differences)
            let fd = (8.0 * (a[j + 1] - a[j - 1]) - (a[j + 2] - a[j - 2])) / (12.0 * h);
            worst = worst.max((fd - d.amplitudes()[j]).norm());
        }
        assert!(worst < 1e-6, "worst {worst}");
        // against the exact derivative the spectral result is far tighter
        let exact = SpinorField::scalar_from_fn(&g, |x| c(-x[0] / 2.0 * (-x[0] * x[0] / 4.0).exp(), 0.0)).unwrap();
        assert!(d.max_abs_diff(&exact).unwrap() < 1e-6);
    }

    #[test]
    fn gradient_on_open_axis_needs_quiet_boundary() {
        let g = Grid::new(vec![Axis::centered(10.0, 64).with_periodic(false)]).unwrap();
        let wide = SpinorField::scalar_from_fn(&g, |x| c((-x[0] * x[0] / 20.0).exp(), 0.0)).unwrap();
        assert!(matches!(wide.gradient(0), Err(LatticeError::BoundaryAmplitude { .. })));
        let narrow = SpinorField::scalar_from_fn(&g, |x| c((-x[0] * x[0]).exp(), 0.0)).unwrap();
        assert!(narrow.gradient(0).is_ok());
    }

    #[test]
    fn one_hot_has_flat_spectrum() {
        let g = ring();
        let mut psi = SpinorField::zeros(&g, 1).unwrap();
        psi.amplitudes_mut()[5] = c(1.0, 0.0);
        let spec = psi.spectral_transform();
        let m0 = spec.amplitudes()[0].norm();
        assert!(m0 > 0.0);
        assert!(spec.amplitudes().iter().all(|a| (a.norm() - m0).abs() < 1e-14));
    }

    #[test]
    fn spectral_round_trip_and_parseval_2d_spinor() {
        let g = Grid::new(vec![Axis::centered(8.0, 32), Axis::new(5.0, 16)]).unwrap();
        let psi = SpinorField::from_fn(&g, 2, |x, out| {
            out[0] = c((x[0] * 1.3).sin(), (x[1] * 0.7).cos());
            out[1] = c(x[0] * x[1] * 0.01, -0.5);
        })
        .unwrap();
        let spec = psi.spectral_transform();
        assert!((spec.norm_sqr() - psi.norm_sqr()).abs() < 1e-12 * psi.norm_sqr());
        assert!(spec.inverse().max_abs_diff(&psi).unwrap() < 1e-12);
    }

    #[test]
    fn gaussian_spectrum_has_expected_width() {
        let g = Grid::new(vec![Axis::centered(40.0, 512)]).unwrap();
        let psi = gaussian(&g, 1.0);
        let spec = psi.spectral_transform();
        let dk = 2.0 * PI / 40.0;
        let var: f64 = spec
            .density()
            .iter()
            .enumerate()
            .map(|(j, p)| g.axis(0).wavenumber(j).powi(2) * p * dk)
            .sum();
        // |ψ̂|² is Gaussian with σ_k = 1/(2σ)
        assert!((var - 0.25).abs() < 1e-10);
    }

    #[test]
    fn wrap_and_contains() {
        let a = Axis::centered(10.0, 16);
        assert!((a.wrap(6.0) - (-4.0)).abs() < 1e-12);
        assert!((a.wrap(-5.0) - (-5.0)).abs() < 1e-12);
        let open = a.with_periodic(false);
        assert!(!open.contains(5.0));
        assert!(open.contains(a.last()));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn spectral_round_trip_is_identity(values in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 64)) {
            let g = ring();
            let psi = SpinorField::from_amplitudes(&g, 1, values.iter().map(|&(r, i)| c(r, i)).collect()).unwrap();
            let back = psi.spectral_transform().inverse();
            prop_assert!(back.max_abs_diff(&psi).unwrap() < 1e-12);
            prop_assert!((psi.spectral_transform().norm_sqr() - psi.norm_sqr()).abs() < 1e-12);
        }

        #[test]
        fn gradient_is_linear(
            a in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 64),
            b in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 64),
            s in (-2.0f64..2.0, -2.0f64..2.0),
            t in (-2.0f64..2.0, -2.0f64..2.0),
        ) {
            let g = ring();
            let fa = SpinorField::from_amplitudes(&g, 1, a.iter().map(|&(r, i)| c(r, i)).collect()).unwrap();
            let fb = SpinorField::from_amplitudes(&g, 1, b.iter().map(|&(r, i)| c(r, i)).collect()).unwrap();
            let (s, t) = (c(s.0, s.1), c(t.0, t.1));
            let lhs = fa.combine(s, &fb, t).unwrap().gradient(0).unwrap();
            let rhs = fa.gradient(0).unwrap().combine(s, &fb.gradient(0).unwrap(), t).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12 * 64.0);
        }

        #[test]
        fn inner_product_is_conjugate_symmetric_and_bit_stable(
            a in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 64),
            b in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 64),
        ) {
            let g = ring();
            let fa = SpinorField::from_amplitudes(&g, 1, a.iter().map(|&(r, i)| c(r, i)).collect()).unwrap();
            let fb = SpinorField::from_amplitudes(&g, 1, b.iter().map(|&(r, i)| c(r, i)).collect()).unwrap();
            let ab = fa.inner_product(&fb).unwrap();
            let ba = fb.inner_product(&fa).unwrap();
            prop_assert!((ab - ba.conj()).norm() < 1e-12);
            let aa = fa.inner_product(&fa).unwrap();
            prop_assert!(aa.im == 0.0 && aa.re >= 0.0);
            prop_assert_eq!(aa.re.to_bits(), fa.inner_product(&fa).unwrap().re.to_bits());
            prop_assert_eq!(aa.re.to_bits(), fa.density().integral().to_bits());
        }
    }
}
