//! Hamiltonians and unitary time evolution by Strang split-operator stepping.
//!
//! One step of length `dt` applies `e^{-i(V+W)dt/2ħ}` cell by cell, the
//! kinetic phase `e^{-iħk²dt/2m}` in the spectral image, and the half
//! potential phase again. The spin coupling `W(q)` is a Hermitian `d×d`
//! matrix per cell; its exponential uses the Pauli closed form for `d = 2`
//! and scaling-and-squaring of the Taylor series otherwise.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rustfft::FftDirection;
use thiserror::Error;

use crate::lattice::{transform_all_axes, Grid, LatticeError, RealField, SpinorField};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("invalid Hamiltonian: {0}")]
    Hamiltonian(String),
    #[error("dt = {dt} exceeds the kinetic phase bound {bound} (max phase per step must stay below π)")]
    StepTooLarge { dt: f64, bound: f64 },
    #[error("invalid propagation request: {0}")]
    Config(String),
    #[error("non-finite amplitude after step {step}")]
    NonFinite { step: usize },
    #[error("softening length must be positive, got {0}")]
    Softening(f64),
    #[error("cannot parse potential `{0}`")]
    ParsePotential(String),
}

/// A particle: the grid axes holding its coordinates, its mass and its charge.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Particle {
    pub axes: Vec<usize>,
    pub mass: f64,
    pub charge: f64,
}

/// Field of Hermitian `d×d` matrices, stored row-major per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SpinCoupling {
    spin_dim: usize,
    cells: usize,
    matrices: Vec<Complex64>,
}

impl SpinCoupling {
    pub fn from_fn(grid: &Grid, spin_dim: usize, f: impl Fn(&[f64], &mut [Complex64])) -> Result<Self, DynamicsError> {
        let d2 = spin_dim * spin_dim;
        let mut matrices = vec![Complex64::new(0.0, 0.0); grid.cells() * d2];
        let nd = grid.ndim();
        for (cell, m) in matrices.chunks_exact_mut(d2).enumerate() {
            f(&grid.coords(cell)[..nd], m);
        }
        let coupling = Self { spin_dim, cells: grid.cells(), matrices };
        coupling.validate()?;
        Ok(coupling)
    }

    /// Same matrix in every cell.
    pub fn uniform(grid: &Grid, matrix: &[Complex64]) -> Result<Self, DynamicsError> {
        let d = (matrix.len() as f64).sqrt().round() as usize;
        if d * d != matrix.len() || d == 0 {
            return Err(DynamicsError::Hamiltonian("coupling matrix must be square".into()));
        }
        Self::from_fn(grid, d, |_, m| m.copy_from_slice(matrix))
    }

    /// Stern–Gerlach coupling `W(q) = -strength · q_axis · σ_z`; `strength` is μ·b.
    pub fn linear_gradient(grid: &Grid, axis: usize, strength: f64) -> Result<Self, DynamicsError> {
        if axis >= grid.ndim() {
            return Err(DynamicsError::Lattice(LatticeError::BadAxis(axis)));
        }
        Self::from_fn(grid, 2, |x, m| {
            let w = -strength * x[axis];
            m[0] = Complex64::new(w, 0.0);
            m[3] = Complex64::new(-w, 0.0);
        })
    }

    pub fn spin_dim(&self) -> usize {
        self.spin_dim
    }

    pub fn matrix(&self, cell: usize) -> &[Complex64] {
        let d2 = self.spin_dim * self.spin_dim;
        &self.matrices[cell * d2..(cell + 1) * d2]
    }

    fn validate(&self) -> Result<(), DynamicsError> {
        let d = self.spin_dim;
        for cell in 0..self.cells {
            let m = self.matrix(cell);
            for i in 0..d {
                for j in 0..d {
                    let (a, b) = (m[i * d + j], m[j * d + i].conj());
                    if !(a.re.is_finite() && a.im.is_finite()) || (a - b).norm() > 1e-12 {
                        return Err(DynamicsError::Hamiltonian(format!("spin coupling not Hermitian in cell {cell}")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Masses, ħ, scalar potential and optional spin coupling.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianSpec {
    pub hbar: f64,
    pub particles: Vec<Particle>,
    pub potential: Option<RealField>,
    pub spin_coupling: Option<SpinCoupling>,
}

impl HamiltonianSpec {
    /// One particle of unit mass owning every grid axis, ħ = 1, no potential.
    pub fn free(grid: &Grid) -> Self {
        Self {
            hbar: 1.0,
            particles: vec![Particle { axes: (0..grid.ndim()).collect(), mass: 1.0, charge: 0.0 }],
            potential: None,
            spin_coupling: None,
        }
    }

    /// `count` particles with `dim` consecutive axes each.
    pub fn particles(grid: &Grid, count: usize, dim: usize, masses: &[f64]) -> Result<Self, DynamicsError> {
        if count * dim != grid.ndim() || masses.len() != count {
            return Err(DynamicsError::Hamiltonian(format!(
                "{count} particles × {dim} dims does not match {} axes / {} masses",
                grid.ndim(),
                masses.len()
            )));
        }
        let particles = (0..count)
            .map(|p| Particle { axes: (p * dim..(p + 1) * dim).collect(), mass: masses[p], charge: 0.0 })
            .collect();
        Ok(Self { hbar: 1.0, particles, potential: None, spin_coupling: None })
    }

    pub fn with_hbar(mut self, hbar: f64) -> Self {
        self.hbar = hbar;
        self
    }

    pub fn with_mass(mut self, mass: f64) -> Self {
        for p in &mut self.particles {
            p.mass = mass;
        }
        self
    }

    pub fn with_potential(mut self, v: RealField) -> Self {
        self.potential = Some(v);
        self
    }

    pub fn with_spin_coupling(mut self, w: SpinCoupling) -> Self {
        self.spin_coupling = Some(w);
        self
    }

    pub fn with_charges(mut self, charges: &[f64]) -> Self {
        for (p, &q) in self.particles.iter_mut().zip(charges) {
            p.charge = q;
        }
        self
    }

    /// Mass of the particle owning `axis`.
    pub fn mass_of_axis(&self, axis: usize) -> Option<f64> {
        self.particles.iter().find(|p| p.axes.contains(&axis)).map(|p| p.mass)
    }

    pub fn axis_masses(&self, ndim: usize) -> Result<Vec<f64>, DynamicsError> {
        (0..ndim)
            .map(|a| self.mass_of_axis(a).ok_or_else(|| DynamicsError::Hamiltonian(format!("axis {a} belongs to no particle"))))
            .collect()
    }

    /// Checks the Hamiltonian against a grid and spin dimension.
    pub fn validate(&self, grid: &Grid, spin_dim: usize) -> Result<(), DynamicsError> {
        if !(self.hbar.is_finite() && self.hbar > 0.0) {
            return Err(DynamicsError::Hamiltonian(format!("hbar must be positive, got {}", self.hbar)));
        }
        let mut seen = vec![false; grid.ndim()];
        for p in &self.particles {
            if !(p.mass.is_finite() && p.mass > 0.0) {
                return Err(DynamicsError::Hamiltonian(format!("mass must be positive, got {}", p.mass)));
            }
            for &a in &p.axes {
                if a >= grid.ndim() || seen[a] {
                    return Err(DynamicsError::Hamiltonian(format!("axis {a} missing or assigned twice")));
                }
                seen[a] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(DynamicsError::Hamiltonian("every axis must belong to a particle".into()));
        }
        if let Some(v) = &self.potential {
            if v.grid() != grid {
                return Err(DynamicsError::Lattice(LatticeError::GridMismatch));
            }
            if !v.is_finite() {
                return Err(DynamicsError::Hamiltonian("potential is not finite".into()));
            }
        }
        if let Some(w) = &self.spin_coupling {
            if w.spin_dim != spin_dim || w.cells != grid.cells() {
                return Err(DynamicsError::Lattice(LatticeError::GridMismatch));
            }
        }
        Ok(())
    }

    /// Largest `dt` whose maximal kinetic phase `dt·ħΣk_max²/2m` stays below π.
    pub fn kinetic_phase_bound(&self, grid: &Grid) -> Result<f64, DynamicsError> {
        let masses = self.axis_masses(grid.ndim())?;
        let rate: f64 = grid
            .axes()
            .iter()
            .zip(&masses)
            .map(|(a, m)| self.hbar * a.max_wavenumber().powi(2) / (2.0 * m))
            .sum();
        Ok(PI / rate)
    }
}

/// Built-in potentials selectable from a run configuration.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub enum PotentialSpec {
    Free,
    /// `½ m ω² |q|²` summed over axes.
    Harmonic { omega: f64 },
    /// Soft-core Coulomb interaction between particles.
    Coulomb { charges: Vec<f64>, softening: f64 },
    /// Rectangular barrier along axis 0.
    Barrier { height: f64, width: f64, center: f64 },
    /// Stern–Gerlach gradient: spin coupling `-slope · q_0 · σ_z` (scalar `slope · q_0` for spinless fields).
    LinearGradient { slope: f64 },
    /// Real field read from a snapshot file.
    Tabulated { path: String },
}

impl FromStr for PotentialSpec {
    type Err = DynamicsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || DynamicsError::ParsePotential(s.to_string());
        let s = s.trim();
        let (name, args) = match s.find('(') {
            Some(open) => {
                let close = s.rfind(')').ok_or_else(err)?;
                if close < open || close != s.len() - 1 {
                    return Err(err());
                }
                (&s[..open], &s[open + 1..close])
            }
            None => (s, ""),
        };
        let nums = |text: &str| -> Result<Vec<f64>, DynamicsError> {
            text.split(',').map(str::trim).filter(|t| !t.is_empty()).map(|t| t.parse::<f64>().map_err(|_| err())).collect()
        };
        match name.trim() {
            "free" if args.trim().is_empty() => Ok(PotentialSpec::Free),
            "harmonic" => match nums(args)?.as_slice() {
                [omega] => Ok(PotentialSpec::Harmonic { omega: *omega }),
                _ => Err(err()),
            },
            "barrier" => match nums(args)?.as_slice() {
                [h, w, c] => Ok(PotentialSpec::Barrier { height: *h, width: *w, center: *c }),
                _ => Err(err()),
            },
            "linear_gradient" => match nums(args)?.as_slice() {
                [slope] => Ok(PotentialSpec::LinearGradient { slope: *slope }),
                _ => Err(err()),
            },
            "coulomb" => {
                // coulomb([e1, e2, ...], a)
                let open = args.find('[').ok_or_else(err)?;
                let close = args.find(']').ok_or_else(err)?;
                let charges = nums(&args[open + 1..close])?;
                let rest = args[close + 1..].trim().trim_start_matches(',');
                match nums(rest)?.as_slice() {
                    [a] => Ok(PotentialSpec::Coulomb { charges, softening: *a }),
                    _ => Err(err()),
                }
            }
            "tabulated" => {
                let path = args.trim().trim_matches('"').trim_matches('\'');
                if path.is_empty() {
                    Err(err())
                } else {
                    Ok(PotentialSpec::Tabulated { path: path.to_string() })
                }
            }
            _ => Err(err()),
        }
    }
}

impl fmt::Display for PotentialSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PotentialSpec::Free => write!(f, "free"),
            PotentialSpec::Harmonic { omega } => write!(f, "harmonic({omega})"),
            PotentialSpec::Coulomb { charges, softening } => {
                let c: Vec<String> = charges.iter().map(f64::to_string).collect();
                write!(f, "coulomb([{}], {softening})", c.join(", "))
            }
            PotentialSpec::Barrier { height, width, center } => write!(f, "barrier({height}, {width}, {center})"),
            PotentialSpec::LinearGradient { slope } => write!(f, "linear_gradient({slope})"),
            PotentialSpec::Tabulated { path } => write!(f, "tabulated(\"{path}\")"),
        }
    }
}

impl PotentialSpec {
    /// Installs the potential into `h` for fields on `grid` with `spin_dim` components.
    pub fn apply(&self, grid: &Grid, spin_dim: usize, h: HamiltonianSpec) -> Result<HamiltonianSpec, DynamicsError> {
        Ok(match self {
            PotentialSpec::Free => h,
            PotentialSpec::Harmonic { omega } => {
                let v = harmonic(grid, &h, *omega)?;
                h.with_potential(v)
            }
            PotentialSpec::Coulomb { charges, softening } => {
                let groups: Vec<Vec<usize>> = h.particles.iter().map(|p| p.axes.clone()).collect();
                let v = build_coulomb(grid, charges, &groups, *softening)?;
                h.with_charges(charges).with_potential(v)
            }
            PotentialSpec::Barrier { height, width, center } => h.with_potential(barrier(grid, *height, *width, *center)),
            PotentialSpec::LinearGradient { slope } => {
                if spin_dim == 2 {
                    h.with_spin_coupling(SpinCoupling::linear_gradient(grid, 0, *slope)?)
                } else {
                    let s = *slope;
                    h.with_potential(RealField::from_fn(grid, |x| s * x[0]))
                }
            }
            PotentialSpec::Tabulated { path } => {
                let file = std::fs::File::open(path).map_err(|e| DynamicsError::Config(format!("{path}: {e}")))?;
                let v = crate::lattice::snapshot::read_real_field(std::io::BufReader::new(file))
                    .map_err(|e| DynamicsError::Config(format!("{path}: {e}")))?;
                if v.grid().axes() != grid.axes() {
                    return Err(DynamicsError::Lattice(LatticeError::GridMismatch));
                }
                h.with_potential(RealField::new(grid, v.values().to_vec())?)
            }
        })
    }
}

/// `½ m_a ω² q_a²` summed over axes.
pub fn harmonic(grid: &Grid, h: &HamiltonianSpec, omega: f64) -> Result<RealField, DynamicsError> {
    let masses = h.axis_masses(grid.ndim())?;
    Ok(RealField::from_fn(grid, |x| x.iter().zip(&masses).map(|(q, m)| 0.5 * m * omega * omega * q * q).sum()))
}

/// Height `height` where `|q_0 - center| < width/2`, zero elsewhere.
pub fn barrier(grid: &Grid, height: f64, width: f64, center: f64) -> RealField {
    RealField::from_fn(grid, |x| if (x[0] - center).abs() < 0.5 * width { height } else { 0.0 })
}

/// Soft-core Coulomb energy `½ Σ_{j≠k} e_j e_k / √(|q_j - q_k|² + a²)` of point particles.
pub fn coulomb_energy(positions: &[&[f64]], charges: &[f64], softening: f64) -> f64 {
    let mut v = 0.0;
    for j in 0..positions.len() {
        for k in 0..positions.len() {
            if j == k {
                continue;
            }
            let r2: f64 = positions[j].iter().zip(positions[k]).map(|(a, b)| (a - b) * (a - b)).sum();
            v += 0.5 * charges[j] * charges[k] / (r2 + softening * softening).sqrt();
        }
    }
    v
}

/// Soft-core Coulomb potential on the configuration grid; `groups[j]` lists
/// the axes of particle `j`.
pub fn build_coulomb(grid: &Grid, charges: &[f64], groups: &[Vec<usize>], softening: f64) -> Result<RealField, DynamicsError> {
    if !(softening > 0.0 && softening.is_finite()) {
        return Err(DynamicsError::Softening(softening));
    }
    if charges.len() < 2 || charges.len() != groups.len() {
        return Err(DynamicsError::Hamiltonian(format!("{} charges for {} particles (need at least 2)", charges.len(), groups.len())));
    }
    let dim = groups[0].len();
    if groups.iter().any(|g| g.len() != dim || g.iter().any(|&a| a >= grid.ndim())) {
        return Err(DynamicsError::Hamiltonian("particle axis groups must share one dimension".into()));
    }
    Ok(RealField::from_fn(grid, |x| {
        let pos: Vec<Vec<f64>> = groups.iter().map(|g| g.iter().map(|&a| x[a]).collect()).collect();
        let refs: Vec<&[f64]> = pos.iter().map(Vec::as_slice).collect();
        coulomb_energy(&refs, charges, softening)
    }))
}

/// Default softening: a tenth of the smallest grid spacing.
pub fn default_softening(grid: &Grid) -> f64 {
    0.1 * grid.spacings().into_iter().fold(f64::INFINITY, f64::min)
}

/// Time step and snapshot stride for [`evolve`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct PropagatorConfig {
    /// Requested step; `None` picks 0.2 × the kinetic phase bound. The step
    /// actually used is shortened so that a whole number of steps reaches `t_final`.
    pub dt: Option<f64>,
    /// Steps between stored snapshots.
    pub snapshot_stride: usize,
}

impl Default for PropagatorConfig {
    fn default() -> Self {
        Self { dt: None, snapshot_stride: 1 }
    }
}

impl PropagatorConfig {
    pub fn with_dt(dt: f64, snapshot_stride: usize) -> Self {
        Self { dt: Some(dt), snapshot_stride }
    }
}

enum HalfPotential {
    None,
    Scalar(Vec<Complex64>),
    Matrix { spin_dim: usize, unitaries: Vec<Complex64> },
}

/// Precomputed Strang factors for one `(grid, H, dt)`.
pub struct SplitOperator {
    grid: Grid,
    spin_dim: usize,
    dt: f64,
    half_potential: HalfPotential,
    /// Kinetic phase with the 1/N of the inverse transform folded in.
    kinetic: Vec<Complex64>,
}

impl SplitOperator {
    pub fn new(grid: &Grid, h: &HamiltonianSpec, spin_dim: usize, dt: f64) -> Result<Self, DynamicsError> {
        h.validate(grid, spin_dim)?;
        let bound = h.kinetic_phase_bound(grid)?;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(DynamicsError::Config(format!("dt must be positive, got {dt}")));
        }
        if dt >= bound {
            return Err(DynamicsError::StepTooLarge { dt, bound });
        }
        let theta = 0.5 * dt / h.hbar;
        let half_potential = match (&h.spin_coupling, &h.potential) {
            (Some(w), v) => {
                let d = spin_dim;
                let mut unitaries = Vec::with_capacity(grid.cells() * d * d);
                let mut m = vec![Complex64::new(0.0, 0.0); d * d];
                for cell in 0..grid.cells() {
                    m.copy_from_slice(w.matrix(cell));
                    if let Some(v) = v {
                        for i in 0..d {
                            m[i * d + i] += v.values()[cell];
                        }
                    }
                    unitaries.extend(hermitian_exp(&m, d, theta));
                }
                HalfPotential::Matrix { spin_dim: d, unitaries }
            }
            (None, Some(v)) => HalfPotential::Scalar(v.values().iter().map(|&x| Complex64::from_polar(1.0, -theta * x)).collect()),
            (None, None) => HalfPotential::None,
        };
        let masses = h.axis_masses(grid.ndim())?;
        let inv_n = 1.0 / grid.cells() as f64;
        let nd = grid.ndim();
        let kinetic = (0..grid.cells())
            .map(|c| {
                let k = grid.wavenumbers(c);
                let e: f64 = (0..nd).map(|a| h.hbar * k[a] * k[a] / (2.0 * masses[a])).sum();
                Complex64::from_polar(inv_n, -e * dt)
            })
            .collect();
        Ok(Self { grid: grid.clone(), spin_dim, dt, half_potential, kinetic })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    fn apply_half_potential(&self, data: &mut [Complex64]) {
        match &self.half_potential {
            HalfPotential::None => {}
            HalfPotential::Scalar(phase) => {
                for (chunk, p) in data.chunks_exact_mut(self.spin_dim).zip(phase) {
                    chunk.iter_mut().for_each(|a| *a *= p);
                }
            }
            HalfPotential::Matrix { spin_dim: d, unitaries } => {
                let d = *d;
                let mut tmp = [Complex64::new(0.0, 0.0); 8];
                let mut heap;
                let buf: &mut [Complex64] = if d <= 8 {
                    &mut tmp[..d]
                } else {
                    heap = vec![Complex64::new(0.0, 0.0); d];
                    &mut heap
                };
                for (chunk, u) in data.chunks_exact_mut(d).zip(unitaries.chunks_exact(d * d)) {
                    for i in 0..d {
                        buf[i] = (0..d).map(|j| u[i * d + j] * chunk[j]).sum();
                    }
                    chunk.copy_from_slice(buf);
                }
            }
        }
    }

    pub fn step_in_place(&self, data: &mut [Complex64]) {
        self.apply_half_potential(data);
        transform_all_axes(&self.grid, self.spin_dim, data, FftDirection::Forward);
        for (chunk, k) in data.chunks_exact_mut(self.spin_dim).zip(&self.kinetic) {
            chunk.iter_mut().for_each(|a| *a *= k);
        }
        transform_all_axes(&self.grid, self.spin_dim, data, FftDirection::Inverse);
        self.apply_half_potential(data);
    }

    /// One Strang step; the input is left untouched.
    pub fn step(&self, psi: &SpinorField) -> Result<SpinorField, DynamicsError> {
        if psi.grid() != &self.grid || psi.spin_dim() != self.spin_dim {
            return Err(DynamicsError::Lattice(LatticeError::GridMismatch));
        }
        let mut out = psi.clone();
        self.step_in_place(out.amplitudes_mut());
        if !out.is_finite() {
            return Err(DynamicsError::NonFinite { step: 1 });
        }
        Ok(out)
    }
}

/// One Strang step of length `dt`.
pub fn step(psi: &SpinorField, h: &HamiltonianSpec, dt: f64) -> Result<SpinorField, DynamicsError> {
    SplitOperator::new(psi.grid(), h, psi.spin_dim(), dt)?.step(psi)
}

/// Time-stamped snapshots `ψ(t_i)` of one evolution.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveEvolution {
    times: Vec<f64>,
    snapshots: Vec<SpinorField>,
}

/// Two snapshot times closer than this are considered equal.
pub const TIME_MATCH: f64 = 1e-9;

impl WaveEvolution {
    pub fn new(times: Vec<f64>, snapshots: Vec<SpinorField>) -> Result<Self, DynamicsError> {
        if times.is_empty() || times.len() != snapshots.len() {
            return Err(DynamicsError::Config("evolution needs matching, nonempty times and snapshots".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(DynamicsError::Config("snapshot times must increase".into()));
        }
        if snapshots.iter().any(|s| !s.same_shape(&snapshots[0])) {
            return Err(DynamicsError::Lattice(LatticeError::GridMismatch));
        }
        Ok(Self { times, snapshots })
    }

    /// A single-snapshot evolution (the field is frozen at `t`).
    pub fn stationary(psi: SpinorField, t: f64) -> Self {
        Self { times: vec![t], snapshots: vec![psi] }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn snapshots(&self) -> &[SpinorField] {
        &self.snapshots
    }

    pub fn grid(&self) -> &Grid {
        self.snapshots[0].grid()
    }

    pub fn spin_dim(&self) -> usize {
        self.snapshots[0].spin_dim()
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().expect("nonempty")
    }

    pub fn initial(&self) -> &SpinorField {
        &self.snapshots[0]
    }

    pub fn last(&self) -> &SpinorField {
        self.snapshots.last().expect("nonempty")
    }

    /// Snapshot stored at time `t`, if any.
    pub fn snapshot_at(&self, t: f64) -> Option<&SpinorField> {
        self.index_of(t).map(|i| &self.snapshots[i])
    }

    pub fn index_of(&self, t: f64) -> Option<usize> {
        let i = self.times.partition_point(|&s| s < t - TIME_MATCH);
        (i < self.times.len() && (self.times[i] - t).abs() <= TIME_MATCH).then_some(i)
    }

    /// Index `i` with `times[i] <= t <= times[i+1]` and the blend weight of `i+1`.
    pub fn bracket(&self, t: f64) -> Option<(usize, f64)> {
        if self.times.len() == 1 {
            return ((t - self.times[0]).abs() <= TIME_MATCH).then_some((0, 0.0));
        }
        if t < self.start() - TIME_MATCH || t > self.end() + TIME_MATCH {
            return None;
        }
        let i = self.times.partition_point(|&s| s <= t).clamp(1, self.times.len() - 1) - 1;
        let (a, b) = (self.times[i], self.times[i + 1]);
        Some((i, ((t - a) / (b - a)).clamp(0.0, 1.0)))
    }

    /// Linear interpolation of the stored amplitudes.
    pub fn state_at(&self, t: f64) -> Option<SpinorField> {
        let (i, w) = self.bracket(t)?;
        if w == 0.0 {
            return Some(self.snapshots[i].clone());
        }
        self.snapshots[i]
            .combine(Complex64::new(1.0 - w, 0.0), &self.snapshots[i + 1], Complex64::new(w, 0.0))
            .ok()
    }

    /// Appends a later segment whose first snapshot repeats this one's last.
    pub fn append(&mut self, next: WaveEvolution) -> Result<(), DynamicsError> {
        if (next.start() - self.end()).abs() > TIME_MATCH {
            return Err(DynamicsError::Config(format!("segment starts at {} but evolution ends at {}", next.start(), self.end())));
        }
        if !next.initial().same_shape(self.last()) {
            return Err(DynamicsError::Lattice(LatticeError::GridMismatch));
        }
        self.times.extend_from_slice(&next.times[1..]);
        self.snapshots.extend(next.snapshots.into_iter().skip(1));
        Ok(())
    }

    /// Every snapshot complex-conjugated, in reverse time order, re-stamped
    /// as `t ↦ t_end + t_start - t`.
    pub fn conjugate_reversed(&self) -> WaveEvolution {
        let (a, b) = (self.start(), self.end());
        let times = self.times.iter().rev().map(|t| a + b - t).collect();
        let snapshots = self.snapshots.iter().rev().map(SpinorField::conj).collect();
        WaveEvolution { times, snapshots }
    }
}

/// Evolves `psi0` from `t = 0` to `t_final`, storing a snapshot every
/// `config.snapshot_stride` steps and at both endpoints.
pub fn evolve(psi0: &SpinorField, h: &HamiltonianSpec, t_final: f64, config: &PropagatorConfig) -> Result<WaveEvolution, DynamicsError> {
    evolve_from(psi0, h, 0.0, t_final, config)
}

/// Like [`evolve`] but starting the clock at `t_start`.
pub fn evolve_from(
    psi0: &SpinorField,
    h: &HamiltonianSpec,
    t_start: f64,
    duration: f64,
    config: &PropagatorConfig,
) -> Result<WaveEvolution, DynamicsError> {
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(DynamicsError::Config(format!("evolution time must be positive, got {duration}")));
    }
    if config.snapshot_stride == 0 {
        return Err(DynamicsError::Config("snapshot stride must be at least 1".into()));
    }
    h.validate(psi0.grid(), psi0.spin_dim())?;
    let bound = h.kinetic_phase_bound(psi0.grid())?;
    let requested = config.dt.unwrap_or(0.2 * bound);
    if requested >= bound {
        return Err(DynamicsError::StepTooLarge { dt: requested, bound });
    }
    let steps = ((duration / requested) - 1e-9).ceil().max(1.0) as usize;
    let dt = duration / steps as f64;
    let op = SplitOperator::new(psi0.grid(), h, psi0.spin_dim(), dt)?;
    psi0.warn_if_touching_boundary("initial state");

    let mut times = vec![t_start];
    let mut snapshots = vec![psi0.clone()];
    let mut current = psi0.clone();
    for n in 1..=steps {
        op.step_in_place(current.amplitudes_mut());
        if n % config.snapshot_stride == 0 || n == steps {
            if !current.is_finite() {
                return Err(DynamicsError::NonFinite { step: n });
            }
            times.push(t_start + n as f64 * dt);
            snapshots.push(current.clone());
        }
    }
    current.warn_if_touching_boundary("final state");
    WaveEvolution::new(times, snapshots)
}

/// Time reversal `ψ ↦ ψ*`.
pub fn time_reverse(psi: &SpinorField) -> SpinorField {
    psi.conj()
}

/// `exp(-iθM)` for Hermitian `M` (row-major `d×d`).
pub fn hermitian_exp(m: &[Complex64], d: usize, theta: f64) -> Vec<Complex64> {
    if d == 1 {
        return vec![Complex64::from_polar(1.0, -theta * m[0].re)];
    }
    if d == 2 {
        // M = a0 I + n·σ
        let a0 = 0.5 * (m[0].re + m[3].re);
        let nz = 0.5 * (m[0].re - m[3].re);
        let nx = m[1].re;
        let ny = -m[1].im;
        let r = (nx * nx + ny * ny + nz * nz).sqrt();
        let global = Complex64::from_polar(1.0, -theta * a0);
        let (c, s) = ((theta * r).cos(), (theta * r).sin());
        let i = Complex64::new(0.0, 1.0);
        let (ux, uy, uz) = if r > 0.0 { (nx / r, ny / r, nz / r) } else { (0.0, 0.0, 0.0) };
        // cos I - i sin (n̂·σ)
        let u00 = Complex64::new(c, 0.0) - i * s * uz;
        let u11 = Complex64::new(c, 0.0) + i * s * uz;
        let u01 = -i * s * Complex64::new(ux, -uy);
        let u10 = -i * s * Complex64::new(ux, uy);
        return vec![global * u00, global * u01, global * u10, global * u11];
    }
    let a: Vec<Complex64> = m.iter().map(|z| z * Complex64::new(0.0, -theta)).collect();
    matrix_exp(&a, d)
}

/// `exp(A)` by scaling and squaring of the Taylor series.
pub fn matrix_exp(a: &[Complex64], d: usize) -> Vec<Complex64> {
    let norm: f64 = (0..d).map(|i| (0..d).map(|j| a[i * d + j].norm()).sum::<f64>()).fold(0.0, f64::max);
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as u32 } else { 0 };
    let scale = 0.5f64.powi(squarings as i32);
    let scaled: Vec<Complex64> = a.iter().map(|z| z * scale).collect();
    let mut result = identity(d);
    let mut term = identity(d);
    for k in 1..=24 {
        term = matmul(&term, &scaled, d);
        let inv = 1.0 / k as f64;
        term.iter_mut().for_each(|z| *z *= inv);
        for (r, t) in result.iter_mut().zip(&term) {
            *r += t;
        }
        if term.iter().map(|z| z.norm()).fold(0.0, f64::max) < 1e-18 {
            break;
        }
    }
    for _ in 0..squarings {
        result = matmul(&result, &result, d);
    }
    result
}

fn identity(d: usize) -> Vec<Complex64> {
    let mut m = vec![Complex64::new(0.0, 0.0); d * d];
    for i in 0..d {
        m[i * d + i] = Complex64::new(1.0, 0.0);
    }
    m
}

fn matmul(a: &[Complex64], b: &[Complex64], d: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Axis;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn free_grid() -> Grid {
        Grid::new(vec![Axis::centered(40.0, 1024)]).unwrap()
    }

    fn gaussian(grid: &Grid, x0: f64, sigma: f64, k: f64) -> SpinorField {
        SpinorField::scalar_from_fn(grid, |x| {
            let d = x[0] - x0;
            Complex64::from_polar((-d * d / (4.0 * sigma * sigma)).exp(), k * x[0])
        })
        .unwrap()
        .normalized()
        .unwrap()
    }

    #[test]
    fn coulomb_point_values() {
        let a = [0.0];
        let b = [1.0];
        let far = [2.0];
        assert!((coulomb_energy(&[&a, &b], &[1.0, 1.0], 1e-12) - 1.0).abs() < 1e-10);
        assert!((coulomb_energy(&[&a, &far], &[1.0, -1.0], 1e-12) + 0.5).abs() < 1e-10);
        assert!((coulomb_energy(&[&a, &b], &[1.0, 1.0], 0.1) - 1.0 / 1.01f64.sqrt()).abs() < 1e-12);
        assert!((1.0 / 1.01f64.sqrt() - 0.99504).abs() < 1e-5);
    }

    #[test]
    fn coulomb_field_is_exchange_symmetric_and_finite() {
        let g = Grid::new(vec![Axis::centered(8.0, 32), Axis::centered(8.0, 32)]).unwrap();
        let v = build_coulomb(&g, &[1.0, 1.0], &[vec![0], vec![1]], 0.1).unwrap();
        assert!(v.is_finite());
        for i in 0..32 {
            for j in 0..32 {
                let a = v.values()[g.flat_index(&[i, j])];
                let b = v.values()[g.flat_index(&[j, i])];
                assert_eq!(a, b);
            }
        }
        assert!(matches!(build_coulomb(&g, &[1.0, 1.0], &[vec![0], vec![1]], 0.0), Err(DynamicsError::Softening(_))));
        assert!(build_coulomb(&g, &[1.0], &[vec![0]], 0.1).is_err());
    }

    #[test]
    fn potential_specs_parse_and_print() {
        for text in ["free", "harmonic(1.5)", "coulomb([1, -1], 0.1)", "barrier(2, 0.5, 0)", "linear_gradient(-3)", "tabulated(\"v.bin\")"] {
            let p: PotentialSpec = text.parse().unwrap();
            let again: PotentialSpec = p.to_string().parse().unwrap();
            assert_eq!(p, again);
        }
        assert!("harmonic()".parse::<PotentialSpec>().is_err());
        assert!("wobble(1)".parse::<PotentialSpec>().is_err());
    }

    #[test]
    fn plane_wave_picks_up_kinetic_phase() {
        let g = Grid::new(vec![Axis::new(2.0 * PI, 64)]).unwrap();
        let k = 3.0;
        let psi = SpinorField::scalar_from_fn(&g, |x| Complex64::from_polar(1.0, k * x[0])).unwrap();
        let h = HamiltonianSpec::free(&g);
        let dt = 5e-3;
        let out = step(&psi, &h, dt).unwrap();
        let expected = psi.scaled(Complex64::from_polar(1.0, -k * k * dt / 2.0));
        assert!(out.max_abs_diff(&expected).unwrap() < 1e-12);
    }

    #[test]
    fn constant_potential_gives_global_phase() {
        let g = Grid::new(vec![Axis::new(2.0 * PI, 64)]).unwrap();
        let psi = SpinorField::scalar_from_fn(&g, |_| c(0.3, 0.1)).unwrap();
        let cval = 2.5;
        let h = HamiltonianSpec::free(&g).with_potential(RealField::from_fn(&g, |_| cval));
        let dt = 5e-3;
        let out = step(&psi, &h, dt).unwrap();
        assert!(out.max_abs_diff(&psi.scaled(Complex64::from_polar(1.0, -cval * dt))).unwrap() < 1e-12);
    }

    #[test]
    fn step_rejects_large_dt() {
        let g = free_grid();
        let h = HamiltonianSpec::free(&g);
        let bound = h.kinetic_phase_bound(&g).unwrap();
        let psi = gaussian(&g, 0.0, 1.0, 0.0);
        assert!(matches!(step(&psi, &h, 1.01 * bound), Err(DynamicsError::StepTooLarge { .. })));
    }

    #[test]
    fn norm_is_conserved_over_many_steps() {
        let g = free_grid();
        let h = HamiltonianSpec::free(&g);
        let v = harmonic(&g, &h, 0.3).unwrap();
        let h = h.with_potential(v);
        let psi = gaussian(&g, 2.0, 1.0, 1.0);
        let op = SplitOperator::new(&g, &h, 1, 5e-4).unwrap();
        let mut data = psi.clone();
        for _ in 0..10_000 {
            op.step_in_place(data.amplitudes_mut());
        }
        assert!((data.norm() - 1.0).abs() < 1e-10);
    }

    /// Closed-form free Gaussian `ψ(x, t)` with σ0, ħ = m = 1.
    fn free_gaussian_exact(x: f64, t: f64, sigma0: f64) -> Complex64 {
        let a = c(1.0, t / (2.0 * sigma0 * sigma0));
        let norm = (2.0 * PI * sigma0 * sigma0).powf(-0.25);
        norm / a.sqrt() * (-(x * x) / (4.0 * sigma0 * sigma0 * a)).exp()
    }

    #[test]
    fn free_gaussian_spreads_as_closed_form() {
        let g = free_grid();
        let psi0 = SpinorField::scalar_from_fn(&g, |x| free_gaussian_exact(x[0], 0.0, 1.0)).unwrap();
        let h = HamiltonianSpec::free(&g);
        let ev = evolve(&psi0, &h, 2.0, &PropagatorConfig { dt: None, snapshot_stride: 100 }).unwrap();
        let last = ev.last();
        let rho = last.density();
        let var: f64 = (0..g.cells()).map(|c| g.coords(c)[0].powi(2) * rho.values()[c]).sum::<f64>() * g.cell_volume();
        assert!((var.sqrt() - 2f64.sqrt()).abs() < 1e-6, "width {}", var.sqrt());
        let exact = SpinorField::scalar_from_fn(&g, |x| free_gaussian_exact(x[0], 2.0, 1.0)).unwrap();
        assert!(last.l2_distance(&exact).unwrap() < 1e-6);
        assert!((ev.end() - 2.0).abs() < 1e-12);
        assert_eq!(ev.times()[0], 0.0);
    }

    #[test]
    fn coherent_state_returns_after_one_period() {
        let g = Grid::new(vec![Axis::centered(20.0, 256)]).unwrap();
        let h = HamiltonianSpec::free(&g);
        let h = h.clone().with_potential(harmonic(&g, &h, 1.0).unwrap());
        // ground-state width σ = 1/√2 displaced to x0 = 2
        let psi0 = gaussian(&g, 2.0, std::f64::consts::FRAC_1_SQRT_2, 0.0);
        let ev = evolve(&psi0, &h, 2.0 * PI, &PropagatorConfig::with_dt(1e-3, 1000)).unwrap();
        let fid = ev.last().fidelity(&psi0).unwrap();
        assert!(fid > 1.0 - 1e-6, "fidelity {fid}");
    }

    #[test]
    fn rabi_oscillation_under_uniform_sigma_x() {
        let g = Grid::new(vec![Axis::new(1.0, 8)]).unwrap();
        let gc = 0.7;
        let w = SpinCoupling::uniform(&g, &[c(0.0, 0.0), c(gc, 0.0), c(gc, 0.0), c(0.0, 0.0)]).unwrap();
        let h = HamiltonianSpec::free(&g).with_spin_coupling(w);
        let psi0 = SpinorField::product(&g, &[c(1.0, 0.0), c(0.0, 0.0)], |_| c(1.0, 0.0)).unwrap().normalized().unwrap();
        let ev = evolve(&psi0, &h, 3.0, &PropagatorConfig::with_dt(1e-3, 100)).unwrap();
        for (t, snap) in ev.times().iter().zip(ev.snapshots()) {
            let down: f64 = (0..g.cells()).map(|cell| snap.value(cell, 1).norm_sqr()).sum::<f64>() * g.cell_volume();
            assert!((down - (gc * t).sin().powi(2)).abs() < 1e-8, "t={t}");
        }
    }

    #[test]
    fn pauli_exponential_matches_series() {
        let m = [c(0.3, 0.0), c(0.2, -0.9), c(0.2, 0.9), c(-1.1, 0.0)];
        let closed = hermitian_exp(&m, 2, 0.8);
        let a: Vec<Complex64> = m.iter().map(|z| z * c(0.0, -0.8)).collect();
        let series = matrix_exp(&a, 2);
        for (x, y) in closed.iter().zip(&series) {
            assert!((x - y).norm() < 1e-13);
        }
    }

    #[test]
    fn series_exponential_is_unitary_for_three_levels() {
        let m = [
            c(1.0, 0.0), c(0.5, 0.5), c(0.0, -2.0),
            c(0.5, -0.5), c(-0.3, 0.0), c(1.5, 0.0),
            c(0.0, 2.0), c(1.5, 0.0), c(2.0, 0.0),
        ];
        let u = hermitian_exp(&m, 3, 1.7);
        // U U† = I
        for i in 0..3 {
            for j in 0..3 {
                let s: Complex64 = (0..3).map(|k| u[i * 3 + k] * u[j * 3 + k].conj()).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((s - c(expect, 0.0)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn non_hermitian_coupling_is_rejected() {
        let g = Grid::new(vec![Axis::new(1.0, 8)]).unwrap();
        let bad = SpinCoupling::uniform(&g, &[c(0.0, 0.0), c(1.0, 0.0), c(0.5, 0.0), c(0.0, 0.0)]);
        assert!(matches!(bad, Err(DynamicsError::Hamiltonian(_))));
    }

    #[test]
    fn time_reverse_is_an_involution() {
        let g = free_grid();
        let psi = gaussian(&g, 1.0, 1.0, 2.0);
        assert_eq!(time_reverse(&time_reverse(&psi)), psi);
        assert_eq!(time_reverse(&psi).density(), psi.density());
    }

    #[test]
    fn conjugate_evolution_retraces_the_history() {
        let g = Grid::new(vec![Axis::centered(40.0, 256)]).unwrap();
        let h = HamiltonianSpec::free(&g);
        let h = h.clone().with_potential(harmonic(&g, &h, 0.5).unwrap());
        let psi = gaussian(&g, 1.0, 1.0, 1.5);
        let cfg = PropagatorConfig::with_dt(5e-3, 400);
        let forward = evolve(&psi, &h, 2.0, &cfg).unwrap();
        // evolving conj ψ(T) for another T lands on conj ψ(0)
        let back = evolve(&time_reverse(forward.last()), &h, 2.0, &cfg).unwrap();
        assert!(back.last().max_abs_diff(&time_reverse(&psi)).unwrap() < 1e-10);
    }

    #[test]
    fn diagonal_spin_coupling_decouples_components() {
        let g = Grid::new(vec![Axis::centered(30.0, 256)]).unwrap();
        let f = 0.8;
        let w = SpinCoupling::linear_gradient(&g, 0, f).unwrap();
        let h = HamiltonianSpec::free(&g).with_spin_coupling(w);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let psi = SpinorField::product(&g, &[c(r, 0.0), c(0.0, r)], |x| (-(x[0] * x[0]) / 4.0).exp().into())
            .unwrap()
            .normalized()
            .unwrap();
        let cfg = PropagatorConfig::with_dt(4e-3, 250);
        let coupled = evolve(&psi, &h, 1.0, &cfg).unwrap();
        // each component alone in its scalar potential ∓ f x
        for (s, sign) in [(0usize, -1.0), (1usize, 1.0)] {
            let comp = psi.component(s);
            let hs = HamiltonianSpec::free(&g).with_potential(RealField::from_fn(&g, |x| sign * f * x[0]));
            let alone = evolve(&comp, &hs, 1.0, &cfg).unwrap();
            assert!(coupled.last().component(s).max_abs_diff(alone.last()).unwrap() < 1e-10);
        }
    }

    #[test]
    fn strang_is_second_order() {
        let g = Grid::new(vec![Axis::centered(40.0, 128)]).unwrap();
        let h = HamiltonianSpec::free(&g);
        let h = h.clone().with_potential(harmonic(&g, &h, 1.0).unwrap());
        let psi = gaussian(&g, 2.0, 1.0, 0.0);
        let t = 1.0;
        let run = |dt: f64| evolve(&psi, &h, t, &PropagatorConfig::with_dt(dt, 100_000)).unwrap().last().clone();
        let dt = 0.02;
        let reference = run(dt / 4.0);
        let e1 = run(dt).l2_distance(&reference).unwrap();
        let e2 = run(dt / 2.0).l2_distance(&reference).unwrap();
        // against a dt/4 reference the ratio of second-order errors is (1 - 1/16)/(1/4 - 1/16) = 5
        let ratio = e1 / e2;
        assert!((ratio - 5.0).abs() < 0.5, "ratio {ratio}");
    }

    #[test]
    fn evolution_bookkeeping() {
        let g = Grid::new(vec![Axis::centered(20.0, 64)]).unwrap();
        let h = HamiltonianSpec::free(&g);
        let psi = gaussian(&g, 0.0, 1.0, 0.0);
        let mut ev = evolve(&psi, &h, 1.0, &PropagatorConfig::with_dt(0.01, 10)).unwrap();
        assert_eq!(ev.times().len(), 11);
        assert!(ev.snapshot_at(0.5).is_some());
        assert!(ev.snapshot_at(0.55).is_none());
        let (i, w) = ev.bracket(0.55).unwrap();
        assert_eq!(i, 5);
        assert!((w - 0.5).abs() < 1e-9);
        let next = evolve_from(ev.last(), &h, 1.0, 0.5, &PropagatorConfig::with_dt(0.01, 10)).unwrap();
        ev.append(next).unwrap();
        assert_eq!(ev.times().len(), 16);
        assert!((ev.end() - 1.5).abs() < 1e-12);
        let rev = ev.conjugate_reversed();
        assert_eq!(rev.initial(), &ev.last().conj());
        assert!(evolve(&psi, &h, -1.0, &PropagatorConfig::default()).is_err());
    }
}
