//! Guidance-equation velocities and particle trajectories.
//!
//! The velocity of the coordinate on axis `a` is
//! `v_a = (ħ/m_a) Im(ψ*∂_aψ) / (ψ*ψ)` with spin components contracted.
//! Off-grid values of `ψ` and `∂_aψ` come from separable Catmull–Rom
//! interpolation; between snapshots the amplitudes are blended linearly in
//! time. Trajectories use fixed-step RK4 whose steps never straddle a
//! snapshot, so the integrand is smooth on every step.

use std::io::{self, Write};

use num_complex::Complex64;
use thiserror::Error;

use crate::dynamics::{DynamicsError, HamiltonianSpec, WaveEvolution, TIME_MATCH};
use crate::lattice::{Grid, LatticeError, SpinorField, MAX_AXES};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GuidanceError {
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("configuration has {got} coordinates, grid has {expected} axes")]
    Dimension { expected: usize, got: usize },
    #[error("point {0:?} lies outside the grid")]
    OutsideGrid(Vec<f64>),
    #[error("trajectory left the open axis {axis} at t = {time}")]
    LeftDomain { axis: usize, time: f64 },
    #[error("time {0} is outside the evolution")]
    TimeOutOfRange(f64),
    #[error("invalid trajectory request: {0}")]
    Config(String),
    #[error("permutation {0:?} is invalid for these particles")]
    Permutation(Vec<usize>),
}

/// Positions of all particles, flattened in grid-axis order.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Configuration(pub Vec<f64>);

impl Configuration {
    pub fn new(coords: Vec<f64>) -> Self {
        Self(coords)
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn validate(&self, grid: &Grid) -> Result<(), GuidanceError> {
        if self.0.len() != grid.ndim() {
            return Err(GuidanceError::Dimension { expected: grid.ndim(), got: self.0.len() });
        }
        if !grid.contains(&self.0) {
            return Err(GuidanceError::OutsideGrid(self.0.clone()));
        }
        Ok(())
    }
}

/// Policy near wave-function nodes, where the velocity is undefined.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct NodeGuard {
    /// Densities below `rho_floor × max density` count as a node: the previous
    /// velocity is held and the step is flagged.
    pub rho_floor: f64,
    /// Speed clip; `None` uses 10 × (largest extent / shortest snapshot spacing).
    pub max_speed: Option<f64>,
}

impl Default for NodeGuard {
    fn default() -> Self {
        Self { rho_floor: 1e-12, max_speed: None }
    }
}

/// Up to 4 (index, weight) pairs along one axis.
#[derive(Clone, Copy)]
pub(crate) struct AxisStencil {
    pub(crate) idx: [usize; 4],
    pub(crate) w: [f64; 4],
    pub(crate) len: usize,
}

fn catmull_rom(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

pub(crate) fn axis_stencil(grid: &Grid, axis: usize, x: f64) -> Option<AxisStencil> {
    let a = grid.axis(axis);
    let n = a.points;
    let h = a.spacing();
    let mut st = AxisStencil { idx: [0; 4], w: [0.0; 4], len: 0 };
    let push = |idx: usize, w: f64, st: &mut AxisStencil| {
        if w == 0.0 {
            return;
        }
        if let Some(k) = st.idx[..st.len].iter().position(|&i| i == idx) {
            st.w[k] += w;
        } else {
            st.idx[st.len] = idx;
            st.w[st.len] = w;
            st.len += 1;
        }
    };
    if a.periodic {
        let u = (a.wrap(x) - a.origin) / h;
        let mut i = u.floor() as isize;
        let mut t = u - i as f64;
        if t >= 1.0 {
            i += 1;
            t -= 1.0;
        }
        let w = catmull_rom(t);
        for (k, wk) in w.iter().enumerate() {
            let j = (i - 1 + k as isize).rem_euclid(n as isize) as usize;
            push(j, *wk, &mut st);
        }
        return Some(st);
    }
    if !a.contains(x) {
        return None;
    }
    let u = (x - a.origin) / h;
    let mut i = u.floor() as isize;
    let mut t = u - i as f64;
    if i >= n as isize - 1 {
        i = n as isize - 2;
        t = 1.0;
    }
    let w = catmull_rom(t);
    for (k, wk) in w.iter().enumerate() {
        let j = i - 1 + k as isize;
        // linear ghost points beyond the ends keep linear functions exact
        if j < 0 {
            push(0, 2.0 * wk, &mut st);
            push(1, -wk, &mut st);
        } else if j >= n as isize {
            push(n - 1, 2.0 * wk, &mut st);
            push(n - 2, -wk, &mut st);
        } else {
            push(j as usize, *wk, &mut st);
        }
    }
    Some(st)
}

/// Tensor-product stencil over every axis: flat cell indices and weights.
struct Stencil {
    cells: [usize; 64],
    weights: [f64; 64],
    len: usize,
}

fn stencil(grid: &Grid, point: &[f64]) -> Option<Stencil> {
    let nd = grid.ndim();
    let mut per_axis = [AxisStencil { idx: [0; 4], w: [0.0; 4], len: 0 }; MAX_AXES];
    for a in 0..nd {
        per_axis[a] = axis_stencil(grid, a, point[a])?;
    }
    let strides = grid.strides();
    let mut st = Stencil { cells: [0; 64], weights: [0.0; 64], len: 0 };
    let l0 = per_axis[0].len;
    let l1 = if nd > 1 { per_axis[1].len } else { 1 };
    let l2 = if nd > 2 { per_axis[2].len } else { 1 };
    for i in 0..l0 {
        for j in 0..l1 {
            for k in 0..l2 {
                let mut cell = per_axis[0].idx[i] * strides[0];
                let mut w = per_axis[0].w[i];
                if nd > 1 {
                    cell += per_axis[1].idx[j] * strides[1];
                    w *= per_axis[1].w[j];
                }
                if nd > 2 {
                    cell += per_axis[2].idx[k] * strides[2];
                    w *= per_axis[2].w[k];
                }
                st.cells[st.len] = cell;
                st.weights[st.len] = w;
                st.len += 1;
            }
        }
    }
    Some(st)
}

fn apply_stencil(st: &Stencil, field: &SpinorField, out: &mut [Complex64]) {
    let d = field.spin_dim();
    out[..d].iter_mut().for_each(|o| *o = Complex64::new(0.0, 0.0));
    let amps = field.amplitudes();
    for n in 0..st.len {
        let base = st.cells[n] * d;
        let w = st.weights[n];
        for s in 0..d {
            out[s] += amps[base + s] * w;
        }
    }
}

/// Catmull–Rom value of every spin component of `field` at `point`.
pub fn interpolate(field: &SpinorField, point: &[f64]) -> Result<Vec<Complex64>, GuidanceError> {
    let grid = field.grid();
    if point.len() != grid.ndim() {
        return Err(GuidanceError::Dimension { expected: grid.ndim(), got: point.len() });
    }
    let st = stencil(grid, point).ok_or_else(|| GuidanceError::OutsideGrid(point.to_vec()))?;
    let mut out = vec![Complex64::new(0.0, 0.0); field.spin_dim()];
    apply_stencil(&st, field, &mut out);
    Ok(out)
}

/// `ψ` and its spatial gradient at one instant.
#[derive(Debug, Clone)]
struct FieldSample {
    psi: SpinorField,
    grads: Vec<SpinorField>,
    max_density: f64,
}

impl FieldSample {
    fn new(psi: &SpinorField) -> Result<Self, GuidanceError> {
        let grads = (0..psi.grid().ndim()).map(|a| psi.gradient(a)).collect::<Result<Vec<_>, _>>()?;
        Ok(Self { psi: psi.clone(), grads, max_density: psi.density().max() })
    }
}

/// Result of one velocity evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VelocityEval {
    pub velocity: [f64; MAX_AXES],
    pub density: f64,
    /// True when the density fell below the guard floor; `velocity` is then meaningless.
    pub below_floor: bool,
}

/// Velocity field of a whole [`WaveEvolution`], ready for trajectory integration.
#[derive(Debug, Clone)]
pub struct GuidanceField {
    grid: Grid,
    times: Vec<f64>,
    samples: Vec<FieldSample>,
    /// ħ/m per axis.
    hbar_over_mass: Vec<f64>,
    frozen: bool,
}

impl GuidanceField {
    pub fn new(evolution: &WaveEvolution, h: &HamiltonianSpec) -> Result<Self, GuidanceError> {
        let grid = evolution.grid().clone();
        let masses = h.axis_masses(grid.ndim())?;
        let samples = evolution.snapshots().iter().map(FieldSample::new).collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            hbar_over_mass: masses.iter().map(|m| h.hbar / m).collect(),
            times: evolution.times().to_vec(),
            samples,
            grid,
            frozen: false,
        })
    }

    /// Field of a single wave function, valid at every time.
    pub fn stationary(psi: &SpinorField, h: &HamiltonianSpec) -> Result<Self, GuidanceError> {
        let mut f = Self::new(&WaveEvolution::stationary(psi.clone(), 0.0), h)?;
        f.frozen = true;
        Ok(f)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        if self.frozen {
            f64::INFINITY
        } else {
            *self.times.last().expect("nonempty")
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Shortest interval between stored snapshots (∞ for a single snapshot).
    pub fn min_snapshot_spacing(&self) -> f64 {
        self.times.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
    }

    /// Speed clip used when the guard does not set one.
    pub fn default_max_speed(&self) -> f64 {
        let extent = self.grid.axes().iter().map(|a| a.extent).fold(0.0, f64::max);
        let spacing = self.min_snapshot_spacing();
        if spacing.is_finite() {
            10.0 * extent / spacing
        } else {
            f64::INFINITY
        }
    }

    fn bracket(&self, t: f64) -> Option<(usize, f64)> {
        if self.frozen || self.times.len() == 1 {
            return (self.frozen || (t - self.times[0]).abs() <= TIME_MATCH).then_some((0, 0.0));
        }
        if t < self.times[0] - TIME_MATCH || t > self.end() + TIME_MATCH {
            return None;
        }
        let i = self.times.partition_point(|&s| s <= t).clamp(1, self.times.len() - 1) - 1;
        let (a, b) = (self.times[i], self.times[i + 1]);
        Some((i, ((t - a) / (b - a)).clamp(0.0, 1.0)))
    }

    /// Velocity at configuration `q` and time `t`.
    pub fn velocity(&self, t: f64, q: &[f64], guard: &NodeGuard) -> Result<VelocityEval, GuidanceError> {
        let nd = self.grid.ndim();
        if q.len() != nd {
            return Err(GuidanceError::Dimension { expected: nd, got: q.len() });
        }
        let (i, w) = self.bracket(t).ok_or(GuidanceError::TimeOutOfRange(t))?;
        let st = stencil(&self.grid, q).ok_or_else(|| GuidanceError::OutsideGrid(q.to_vec()))?;
        let d = self.samples[0].psi.spin_dim();
        let mut psi = [Complex64::new(0.0, 0.0); 8];
        let mut grad = [[Complex64::new(0.0, 0.0); 8]; MAX_AXES];
        let mut tmp = [Complex64::new(0.0, 0.0); 8];
        if d > 8 {
            return Err(GuidanceError::Config(format!("spin dimension {d} exceeds 8")));
        }
        let mut max_density = 0.0;
        let parts: [(usize, f64); 2] = [(i, 1.0 - w), (i + 1, w)];
        for &(k, wk) in parts.iter().filter(|(_, wk)| *wk > 0.0) {
            let sample = &self.samples[k];
            max_density += wk * sample.max_density;
            apply_stencil(&st, &sample.psi, &mut tmp);
            for s in 0..d {
                psi[s] += tmp[s] * wk;
            }
            for a in 0..nd {
                apply_stencil(&st, &sample.grads[a], &mut tmp);
                for s in 0..d {
                    grad[a][s] += tmp[s] * wk;
                }
            }
        }
        let rho: f64 = psi[..d].iter().map(Complex64::norm_sqr).sum();
        let mut velocity = [0.0; MAX_AXES];
        if !(rho > guard.rho_floor * max_density) || rho == 0.0 {
            return Ok(VelocityEval { velocity, density: rho, below_floor: true });
        }
        for a in 0..nd {
            let j: f64 = (0..d).map(|s| (psi[s].conj() * grad[a][s]).im).sum();
            velocity[a] = self.hbar_over_mass[a] * j / rho;
        }
        Ok(VelocityEval { velocity, density: rho, below_floor: false })
    }
}

/// Velocity of every coordinate for a single wave function.
pub fn velocity(psi: &SpinorField, h: &HamiltonianSpec, q: &Configuration, guard: &NodeGuard) -> Result<VelocityEval, GuidanceError> {
    GuidanceField::stationary(psi, h)?.velocity(0.0, q.coords(), guard)
}

/// Which velocity field drives the particles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize)]
pub enum VelocityModel {
    #[default]
    Guidance,
    /// Every velocity is zero (negative control for equivariance checks).
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct TrajectoryOptions {
    /// Upper bound on the RK4 step; actual steps divide each snapshot interval evenly.
    pub rk_dt: f64,
    pub guard: NodeGuard,
    pub model: VelocityModel,
    /// Local error tolerance for step doubling. When set, each step is
    /// subdivided until one step and two half steps agree within it.
    pub tolerance: Option<f64>,
}

impl TrajectoryOptions {
    pub fn new(rk_dt: f64) -> Self {
        Self { rk_dt, guard: NodeGuard::default(), model: VelocityModel::Guidance, tolerance: None }
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = Some(tolerance);
        self
    }

    pub fn with_model(mut self, model: VelocityModel) -> Self {
        self.model = model;
        self
    }
}

/// Sampled solution of the guidance equation.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Trajectory {
    ndim: usize,
    times: Vec<f64>,
    coords: Vec<f64>,
    /// Whether the node guard or speed clip fired since the previous record.
    node_flags: Vec<bool>,
    guard_events: usize,
}

impl Trajectory {
    pub fn ndim(&self) -> usize {
        self.ndim
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.ndim..(i + 1) * self.ndim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.ndim)
    }

    pub fn first(&self) -> &[f64] {
        self.point(0)
    }

    pub fn last(&self) -> &[f64] {
        self.point(self.len() - 1)
    }

    pub fn node_flags(&self) -> &[bool] {
        &self.node_flags
    }

    /// Number of velocity evaluations absorbed by the guard.
    pub fn guard_events(&self) -> usize {
        self.guard_events
    }

    /// Coordinate `axis` over time.
    pub fn series(&self, axis: usize) -> Vec<f64> {
        self.points().map(|p| p[axis]).collect()
    }
}

struct Integrator<'a> {
    field: &'a GuidanceField,
    opts: TrajectoryOptions,
    max_speed: f64,
    held: [f64; MAX_AXES],
    events: usize,
    flagged: bool,
}

impl Integrator<'_> {
    fn eval(&mut self, t: f64, q: &[f64]) -> Result<[f64; MAX_AXES], GuidanceError> {
        if self.opts.model == VelocityModel::Zero {
            return Ok([0.0; MAX_AXES]);
        }
        let e = self.field.velocity(t, q, &self.opts.guard)?;
        if e.below_floor {
            self.events += 1;
            self.flagged = true;
            return Ok(self.held);
        }
        let mut v = e.velocity;
        let speed = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if speed > self.max_speed {
            self.events += 1;
            self.flagged = true;
            let s = self.max_speed / speed;
            v.iter_mut().for_each(|x| *x *= s);
        }
        self.held = v;
        Ok(v)
    }

    fn check_domain(&self, q: &mut [f64], t: f64) -> Result<(), GuidanceError> {
        for (a, x) in q.iter_mut().enumerate() {
            let ax = self.field.grid.axis(a);
            if ax.periodic {
                *x = ax.wrap(*x);
            } else if !ax.contains(*x) {
                return Err(GuidanceError::LeftDomain { axis: a, time: t });
            }
        }
        Ok(())
    }

    fn rk4(&mut self, t: f64, h: f64, q: &mut [f64]) -> Result<(), GuidanceError> {
        let nd = q.len();
        let mut stage = [0.0; MAX_AXES];
        let k1 = self.eval(t, q)?;
        for a in 0..nd {
            stage[a] = q[a] + 0.5 * h * k1[a];
        }
        self.check_domain(&mut stage[..nd], t + 0.5 * h)?;
        let k2 = self.eval(t + 0.5 * h, &stage[..nd])?;
        for a in 0..nd {
            stage[a] = q[a] + 0.5 * h * k2[a];
        }
        self.check_domain(&mut stage[..nd], t + 0.5 * h)?;
        let k3 = self.eval(t + 0.5 * h, &stage[..nd])?;
        for a in 0..nd {
            stage[a] = q[a] + h * k3[a];
        }
        self.check_domain(&mut stage[..nd], t + h)?;
        let k4 = self.eval(t + h, &stage[..nd])?;
        for a in 0..nd {
            q[a] += h / 6.0 * (k1[a] + 2.0 * k2[a] + 2.0 * k3[a] + k4[a]);
        }
        self.check_domain(q, t + h)
    }

    /// Coordinate difference `a − b`, using the nearest image on periodic axes.
    fn separation(&self, axis: usize, a: f64, b: f64) -> f64 {
        let ax = self.field.grid.axis(axis);
        let d = a - b;
        if ax.periodic {
            d - ax.extent * (d / ax.extent).round()
        } else {
            d
        }
    }

    /// Advances `q` from `t` by `h` with step doubling, halving the step until
    /// the local error estimate is below `tol`.
    fn adaptive(&mut self, t: f64, h: f64, q: &mut [f64], tol: f64) -> Result<(), GuidanceError> {
        let nd = q.len();
        let h_min = h * MIN_STEP_FRACTION;
        let (mut done, mut step) = (0.0, h);
        while done < h * (1.0 - 1e-12) {
            step = step.min(h - done);
            let mut full = q.to_vec();
            self.rk4(t + done, step, &mut full)?;
            let mut half = q.to_vec();
            self.rk4(t + done, 0.5 * step, &mut half)?;
            self.rk4(t + done + 0.5 * step, 0.5 * step, &mut half)?;
            let err = (0..nd).map(|a| self.separation(a, half[a], full[a]).abs()).fold(0.0, f64::max);
            if err <= tol || step <= h_min {
                if err > tol {
                    self.events += 1;
                    self.flagged = true;
                }
                q.copy_from_slice(&half);
                done += step;
                if err < tol / 32.0 {
                    step *= 2.0;
                }
            } else {
                step *= 0.5;
            }
        }
        Ok(())
    }
}

/// Smallest adaptive step relative to the nominal one.
const MIN_STEP_FRACTION: f64 = 1.0 / (1 << 16) as f64;

/// Step boundaries between `t0` and `t1`: every snapshot time inside the
/// interval is a breakpoint, and each piece is cut into equal steps ≤ `rk_dt`.
fn breakpoints(field: &GuidanceField, t0: f64, t1: f64) -> Vec<f64> {
    let mut marks = vec![t0];
    if !field.frozen {
        marks.extend(field.times.iter().copied().filter(|&s| s > t0 + TIME_MATCH && s < t1 - TIME_MATCH));
    }
    marks.push(t1);
    marks
}

/// Integrates the guidance equation from `q0` at `t_start` and records the
/// configuration at each of `record_times` (increasing, ≥ `t_start`).
pub fn integrate_path(
    field: &GuidanceField,
    q0: &Configuration,
    t_start: f64,
    record_times: &[f64],
    opts: &TrajectoryOptions,
) -> Result<Trajectory, GuidanceError> {
    integrate_impl(field, q0, t_start, record_times, opts, false)
}

/// Integrates from `field.start()` to `t_final`, recording every RK4 step.
pub fn integrate_trajectory(
    field: &GuidanceField,
    q0: &Configuration,
    t_final: f64,
    opts: &TrajectoryOptions,
) -> Result<Trajectory, GuidanceError> {
    integrate_impl(field, q0, field.start(), &[t_final], opts, true)
}

fn integrate_impl(
    field: &GuidanceField,
    q0: &Configuration,
    t_start: f64,
    record_times: &[f64],
    opts: &TrajectoryOptions,
    dense: bool,
) -> Result<Trajectory, GuidanceError> {
    q0.validate(&field.grid)?;
    if !(opts.rk_dt > 0.0 && opts.rk_dt.is_finite()) {
        return Err(GuidanceError::Config(format!("rk_dt must be positive, got {}", opts.rk_dt)));
    }
    if let Some(tol) = opts.tolerance {
        if !(tol > 0.0 && tol.is_finite()) {
            return Err(GuidanceError::Config(format!("tolerance must be positive, got {tol}")));
        }
    }
    if t_start < field.start() - TIME_MATCH {
        return Err(GuidanceError::TimeOutOfRange(t_start));
    }
    let mut prev = t_start;
    for &t in record_times {
        if t < prev - TIME_MATCH || t > field.end() + TIME_MATCH {
            return Err(GuidanceError::TimeOutOfRange(t));
        }
        prev = t;
    }
    let nd = field.grid.ndim();
    let mut integ = Integrator {
        field,
        opts: *opts,
        max_speed: opts.guard.max_speed.unwrap_or_else(|| field.default_max_speed()),
        held: [0.0; MAX_AXES],
        events: 0,
        flagged: false,
    };
    let mut q = q0.coords().to_vec();
    let mut traj = Trajectory { ndim: nd, times: vec![t_start], coords: q.clone(), node_flags: vec![false], guard_events: 0 };
    let mut t = t_start;
    for &target in record_times {
        for seg in breakpoints(field, t, target).windows(2) {
            let (a, b) = (seg[0], seg[1]);
            if b - a <= TIME_MATCH {
                continue;
            }
            let n = ((b - a) / opts.rk_dt - 1e-9).ceil().max(1.0) as usize;
            let h = (b - a) / n as f64;
            for s in 0..n {
                let ts = a + s as f64 * h;
                match opts.tolerance {
                    Some(tol) => integ.adaptive(ts, h, &mut q, tol)?,
                    None => integ.rk4(ts, h, &mut q)?,
                }
                if dense {
                    let tn = if s + 1 == n { b } else { ts + h };
                    traj.times.push(tn);
                    traj.coords.extend_from_slice(&q);
                    traj.node_flags.push(std::mem::take(&mut integ.flagged));
                }
            }
        }
        t = target;
        if (target - traj.times[traj.times.len() - 1]).abs() > TIME_MATCH {
            traj.times.push(target);
            traj.coords.extend_from_slice(&q);
            traj.node_flags.push(std::mem::take(&mut integ.flagged));
        }
    }
    debug_assert_eq!(traj.coords.len(), traj.times.len() * nd);
    traj.guard_events = integ.events;
    Ok(traj)
}

/// Reorders particles: slot `i` of the result receives particle `perm[i]`.
/// Only particles with equal mass and dimension may be exchanged.
pub fn permute(q: &Configuration, perm: &[usize], h: &HamiltonianSpec) -> Result<Configuration, GuidanceError> {
    let parts = &h.particles;
    let bad = || GuidanceError::Permutation(perm.to_vec());
    if perm.len() != parts.len() {
        return Err(bad());
    }
    let mut seen = vec![false; parts.len()];
    for &p in perm {
        if p >= parts.len() || std::mem::replace(&mut seen[p], true) {
            return Err(bad());
        }
    }
    let mut out = q.coords().to_vec();
    for (slot, &src) in perm.iter().enumerate() {
        let (a, b) = (&parts[slot], &parts[src]);
        if a.axes.len() != b.axes.len() || a.mass != b.mass {
            return Err(bad());
        }
        for (&dst_axis, &src_axis) in a.axes.iter().zip(&b.axes) {
            out[dst_axis] = *q.coords().get(src_axis).ok_or_else(bad)?;
        }
    }
    Ok(Configuration(out))
}

/// Writes one trajectory as CSV: `t,q_1,…,q_M,node_flag`.
pub fn write_trajectory_csv<W: Write>(mut w: W, traj: &Trajectory) -> io::Result<()> {
    writeln!(w, "{}", csv_header(traj.ndim, false))?;
    for (i, t) in traj.times.iter().enumerate() {
        write_row(&mut w, None, *t, traj.point(i), traj.node_flags[i])?;
    }
    Ok(())
}

/// Long-format CSV keyed by trajectory id: `trajectory_id,t,q_1,…,q_M,node_flag`.
pub fn write_trajectories_long_csv<W: Write>(mut w: W, trajs: &[Trajectory]) -> io::Result<()> {
    let nd = trajs.first().map_or(0, |t| t.ndim);
    writeln!(w, "{}", csv_header(nd, true))?;
    for (id, traj) in trajs.iter().enumerate() {
        for (i, t) in traj.times.iter().enumerate() {
            write_row(&mut w, Some(id), *t, traj.point(i), traj.node_flags[i])?;
        }
    }
    Ok(())
}

fn csv_header(nd: usize, long: bool) -> String {
    let mut cols: Vec<String> = Vec::new();
    if long {
        cols.push("trajectory_id".into());
    }
    cols.push("t".into());
    cols.extend((1..=nd).map(|i| format!("q_{i}")));
    cols.push("node_flag".into());
    cols.join(",")
}

fn write_row<W: Write>(w: &mut W, id: Option<usize>, t: f64, q: &[f64], flag: bool) -> io::Result<()> {
    if let Some(id) = id {
        write!(w, "{id},")?;
    }
    write!(w, "{t}")?;
    for x in q {
        write!(w, ",{x}")?;
    }
    writeln!(w, ",{}", flag as u8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{evolve, harmonic, PropagatorConfig};
    use crate::lattice::Axis;
    use std::f64::consts::PI;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn gaussian(grid: &Grid, sigma: f64) -> SpinorField {
        SpinorField::scalar_from_fn(grid, |x| c((-x[0] * x[0] / (4.0 * sigma * sigma)).exp(), 0.0))
            .unwrap()
            .normalized()
            .unwrap()
    }

    #[test]
    fn interpolation_hits_nodes_exactly() {
        let g = Grid::new(vec![Axis::centered(10.0, 32), Axis::new(4.0, 16)]).unwrap();
        let f = SpinorField::scalar_from_fn(&g, |x| c(x[0].sin() * x[1], x[0] * x[0])).unwrap();
        for cell in [0, 17, 100, 511] {
            let x = g.coords(cell);
            let v = interpolate(&f, &x[..2]).unwrap();
            assert_eq!(v[0], f.value(cell, 0));
        }
    }

    #[test]
    fn interpolation_reproduces_linear_fields() {
        let g = Grid::new(vec![Axis::centered(10.0, 32).with_periodic(false), Axis::new(4.0, 16).with_periodic(false)]).unwrap();
        let f = SpinorField::scalar_from_fn(&g, |x| c(2.0 * x[0] - 0.5 * x[1] + 1.0, -x[1])).unwrap();
        for p in [[0.123, 1.7], [-5.0, 0.0], [4.6875, 3.75], [-4.99, 3.7]] {
            let v = interpolate(&f, &p).unwrap()[0];
            let exact = c(2.0 * p[0] - 0.5 * p[1] + 1.0, -p[1]);
            assert!((v - exact).norm() < 1e-12, "{p:?}");
        }
        assert!(interpolate(&f, &[6.0, 1.0]).is_err());
    }

    #[test]
    fn interpolation_agrees_with_finer_grid() {
        let f = |x: &[f64]| c((-x[0] * x[0] / 4.0).exp(), 0.0);
        let coarse = Grid::new(vec![Axis::centered(20.0, 2048)]).unwrap();
        let fine = Grid::new(vec![Axis::centered(20.0, 8192)]).unwrap();
        let fc = SpinorField::scalar_from_fn(&coarse, f).unwrap();
        let ff = SpinorField::scalar_from_fn(&fine, f).unwrap();
        // off-grid for the coarse lattice, on-grid for the fine one
        for j in [4101usize, 4555, 5003, 3001] {
            let x = fine.coords(j)[0];
            let a = interpolate(&fc, &[x]).unwrap()[0];
            let b = ff.value(j, 0);
            assert!((a - b).norm() < 1e-6, "x={x}");
        }
    }

    #[test]
    fn plane_wave_velocity() {
        let g = Grid::new(vec![Axis::new(2.0 * PI, 64)]).unwrap();
        let psi = SpinorField::scalar_from_fn(&g, |x| Complex64::from_polar(1.0, 5.0 * x[0])).unwrap();
        let h = HamiltonianSpec::free(&g);
        for x in [0.1, 1.0, 3.3, 6.0] {
            let v = velocity(&psi, &h, &Configuration::new(vec![x]), &NodeGuard::default()).unwrap();
            assert!((v.velocity[0] - 5.0).abs() < 1e-10);
        }
    }

    #[test]
    fn real_wave_function_has_zero_velocity_and_spinor_contracts() {
        let g = Grid::new(vec![Axis::centered(20.0, 256)]).unwrap();
        let psi = gaussian(&g, 1.0);
        let h = HamiltonianSpec::free(&g);
        for x in [-2.0, 0.3, 1.7] {
            let v = velocity(&psi, &h, &Configuration::new(vec![x]), &NodeGuard::default()).unwrap();
            assert!(v.velocity[0].abs() < 1e-12);
        }
        let moving = SpinorField::scalar_from_fn(&g, |x| Complex64::from_polar((-x[0] * x[0] / 4.0).exp(), 1.3 * x[0] + 0.2 * x[0] * x[0]))
            .unwrap();
        let spinor = SpinorField::from_fn(&g, 2, |x, out| {
            out[0] = Complex64::from_polar((-x[0] * x[0] / 4.0).exp(), 1.3 * x[0] + 0.2 * x[0] * x[0]);
            out[1] = c(0.0, 0.0);
        })
        .unwrap();
        for x in [-1.0, 0.4] {
            let q = Configuration::new(vec![x]);
            let a = velocity(&moving, &h, &q, &NodeGuard::default()).unwrap();
            let b = velocity(&spinor, &h, &q, &NodeGuard::default()).unwrap();
            assert_eq!(a.velocity, b.velocity);
        }
    }

    /// v(x, t) = x·τ·τ'/(1+τ²) with τ = ħt/(2mσ0²), τ' = ħ/(2mσ0²).
    fn free_gaussian_velocity(x: f64, t: f64) -> f64 {
        let tau = t / 2.0;
        x * tau * 0.5 / (1.0 + tau * tau)
    }

    fn free_gaussian_exact(x: f64, t: f64) -> Complex64 {
        let a = c(1.0, t / 2.0);
        (2.0 * PI).powf(-0.25) / a.sqrt() * (-(x * x) / (4.0 * a)).exp()
    }

    #[test]
    fn velocity_oracle_is_the_phase_gradient() {
        // the oracle itself: finite differences of the analytic phase
        for &(x, t) in &[(0.7, 1.0), (-1.5, 2.0), (2.2, 0.3)] {
            let h = 1e-5;
            let phase = |y: f64| free_gaussian_exact(y, t).arg();
            let fd = (phase(x + h) - phase(x - h)) / (2.0 * h);
            assert!((fd - free_gaussian_velocity(x, t)).abs() < 1e-8);
        }
    }

    #[test]
    fn free_gaussian_velocity_field() {
        let g = Grid::new(vec![Axis::centered(40.0, 1024)]).unwrap();
        let h = HamiltonianSpec::free(&g);
        for t in [0.5, 2.0] {
            let psi = SpinorField::scalar_from_fn(&g, |x| free_gaussian_exact(x[0], t)).unwrap();
            for x in [-2.03, -0.5, 0.77, 1.9] {
                let v = velocity(&psi, &h, &Configuration::new(vec![x]), &NodeGuard::default()).unwrap();
                assert!((v.velocity[0] - free_gaussian_velocity(x, t)).abs() < 1e-6, "x={x} t={t}");
            }
        }
    }

    fn free_field() -> GuidanceField {
        let g = Grid::new(vec![Axis::centered(40.0, 1024)]).unwrap();
        let h = HamiltonianSpec::free(&g);
        let psi0 = SpinorField::scalar_from_fn(&g, |x| free_gaussian_exact(x[0], 0.0)).unwrap();
        let ev = evolve(&psi0, &h, 2.0, &PropagatorConfig::with_dt(5e-4, 20)).unwrap();
        GuidanceField::new(&ev, &h).unwrap()
    }

    #[test]
    fn free_gaussian_trajectory_endpoint() {
        let field = free_field();
        let traj = integrate_trajectory(&field, &Configuration::new(vec![1.0]), 2.0, &TrajectoryOptions::new(0.02)).unwrap();
        assert!((traj.last()[0] - 2f64.sqrt()).abs() < 1e-4, "{}", traj.last()[0]);
        assert!((traj.times().last().unwrap() - 2.0).abs() < 1e-12);
        assert!(traj.times().windows(2).all(|w| w[1] > w[0]));
        // halving the step barely moves the endpoint
        let fine = integrate_trajectory(&field, &Configuration::new(vec![1.0]), 2.0, &TrajectoryOptions::new(0.01)).unwrap();
        assert!((fine.last()[0] - traj.last()[0]).abs() < 1e-6);
    }

    #[test]
    fn step_doubling_matches_fine_steps() {
        let field = free_field();
        let q0 = Configuration::new(vec![1.0]);
        let fine = integrate_path(&field, &q0, 0.0, &[2.0], &TrajectoryOptions::new(0.001)).unwrap();
        let adaptive = integrate_path(&field, &q0, 0.0, &[2.0], &TrajectoryOptions::new(0.5).with_tolerance(1e-10)).unwrap();
        assert!((adaptive.last()[0] - fine.last()[0]).abs() < 1e-8);
        assert!((adaptive.last()[0] - 2f64.sqrt()).abs() < 1e-4);
        assert!(integrate_path(&field, &q0, 0.0, &[2.0], &TrajectoryOptions::new(0.5).with_tolerance(0.0)).is_err());
    }

    #[test]
    fn stationary_state_does_not_move() {
        let g = Grid::new(vec![Axis::centered(20.0, 256)]).unwrap();
        let h = HamiltonianSpec::free(&g);
        let h = h.clone().with_potential(harmonic(&g, &h, 1.0).unwrap());
        let ground = gaussian(&g, std::f64::consts::FRAC_1_SQRT_2);
        let ev = evolve(&ground, &h, 1.0, &PropagatorConfig::with_dt(1e-3, 50)).unwrap();
        let field = GuidanceField::new(&ev, &h).unwrap();
        let traj = integrate_trajectory(&field, &Configuration::new(vec![0.8]), 1.0, &TrajectoryOptions::new(0.05)).unwrap();
        assert!((traj.last()[0] - 0.8).abs() < 1e-6, "{}", traj.last()[0]);
    }

    #[test]
    fn record_times_are_honoured() {
        let field = free_field();
        let traj = integrate_path(&field, &Configuration::new(vec![1.0]), 0.0, &[0.0, 0.5, 1.37, 2.0], &TrajectoryOptions::new(0.02)).unwrap();
        assert_eq!(traj.times(), &[0.0, 0.5, 1.37, 2.0]);
        for (i, &t) in traj.times().iter().enumerate() {
            let exact = (1.0 + t * t / 4.0).sqrt();
            assert!((traj.point(i)[0] - exact).abs() < 1e-4);
        }
        assert!(integrate_path(&field, &Configuration::new(vec![1.0]), 0.0, &[3.0], &TrajectoryOptions::new(0.02)).is_err());
    }

    #[test]
    fn node_guard_holds_velocity() {
        let g = Grid::new(vec![Axis::new(2.0 * PI, 64)]).unwrap();
        // sin(x) vanishes at 0 and π; add a phase so the field moves
        let psi = SpinorField::scalar_from_fn(&g, |x| c(x[0].sin(), 0.0)).unwrap();
        let h = HamiltonianSpec::free(&g);
        let v = velocity(&psi, &h, &Configuration::new(vec![0.0]), &NodeGuard::default()).unwrap();
        assert!(v.below_floor);
        let field = GuidanceField::stationary(&psi, &h).unwrap();
        let traj = integrate_trajectory(&field, &Configuration::new(vec![0.0]), 1.0, &TrajectoryOptions::new(0.1)).unwrap();
        assert!(traj.guard_events() > 0);
        assert!(traj.node_flags().iter().any(|f| *f));
        assert_eq!(traj.last()[0], 0.0);
    }

    #[test]
    fn leaving_an_open_axis_is_reported() {
        let g = Grid::new(vec![Axis::centered(4.0 * PI, 128).with_periodic(false)]).unwrap();
        let psi = SpinorField::scalar_from_fn(&g, |x| Complex64::from_polar(1e-3, 2.0 * x[0])).unwrap();
        // boundary amplitude is not negligible, so gradients fail on the open axis
        assert!(GuidanceField::stationary(&psi, &HamiltonianSpec::free(&g)).is_err());
        let quiet = SpinorField::scalar_from_fn(&g, |x| Complex64::from_polar((-x[0] * x[0]).exp(), 2.0 * x[0])).unwrap();
        let field = GuidanceField::stationary(&quiet, &HamiltonianSpec::free(&g)).unwrap();
        let err = integrate_trajectory(&field, &Configuration::new(vec![2.5]), 5.0, &TrajectoryOptions::new(0.01)).unwrap_err();
        assert!(matches!(err, GuidanceError::LeftDomain { axis: 0, .. }));
    }

    #[test]
    fn permutation_basics() {
        let g = Grid::new(vec![Axis::centered(8.0, 16), Axis::centered(8.0, 16)]).unwrap();
        let h = HamiltonianSpec::particles(&g, 2, 1, &[1.0, 1.0]).unwrap();
        let q = Configuration::new(vec![1.0, 2.0]);
        assert_eq!(permute(&q, &[0, 1], &h).unwrap(), q);
        assert_eq!(permute(&q, &[1, 0], &h).unwrap().coords(), &[2.0, 1.0]);
        let unequal = HamiltonianSpec::particles(&g, 2, 1, &[1.0, 2.0]).unwrap();
        assert!(permute(&q, &[1, 0], &unequal).is_err());
        assert!(permute(&q, &[0, 0], &h).is_err());
    }

    #[test]
    fn csv_layout() {
        let field = free_field();
        let traj = integrate_path(&field, &Configuration::new(vec![1.0]), 0.0, &[1.0], &TrajectoryOptions::new(0.1)).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &traj).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("t,q_1,node_flag"));
        assert!(lines.next().unwrap().starts_with("0,1,0"));
        let mut buf = Vec::new();
        write_trajectories_long_csv(&mut buf, &[traj.clone(), traj]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("trajectory_id,t,q_1,node_flag\n0,0,1,0\n"));
        assert_eq!(text.lines().count(), 5);
    }
}
