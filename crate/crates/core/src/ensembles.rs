//! Born-rule ensembles and the statistics used to compare them with `|ψ|²`.
//!
//! Sampling picks a cell by inverse CDF over the cell masses, then places
//! the point uniformly inside that cell, so the sampled law is exactly the
//! piecewise-constant lattice density. Histograms and marginal CDFs below
//! use the same convention, which makes the expected fluctuation of every
//! distance computable.

use std::io::{self, Write};

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::dynamics::{HamiltonianSpec, WaveEvolution};
use crate::guidance::{axis_stencil, integrate_path, Configuration, GuidanceError, GuidanceField, TrajectoryOptions};
use crate::lattice::{DensityField, Grid, LatticeError, SpinorField};
use crate::seeding::{label, substream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnsembleError {
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error("member {member}: {source}")]
    Member { member: usize, source: GuidanceError },
    #[error("ensemble must be nonempty")]
    Empty,
    #[error("invalid binning: {0}")]
    Binning(String),
    #[error("conditional slice has norm² {0:e}, below 1e-14")]
    VanishingSlice(f64),
    #[error("unsupported request: {0}")]
    Unsupported(String),
    #[error("branch masks overlap at cell {0}")]
    OverlappingMasks(usize),
}

/// A set of configurations on one grid.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Ensemble {
    #[serde(skip)]
    grid: Grid,
    ndim: usize,
    coords: Vec<f64>,
    pub seed: u64,
    pub source: String,
}

impl Ensemble {
    pub fn new(grid: &Grid, configurations: &[Configuration], seed: u64, source: impl Into<String>) -> Result<Self, EnsembleError> {
        if configurations.is_empty() {
            return Err(EnsembleError::Empty);
        }
        let mut coords = Vec::with_capacity(configurations.len() * grid.ndim());
        for q in configurations {
            q.validate(grid)?;
            coords.extend_from_slice(q.coords());
        }
        Ok(Self { grid: grid.clone(), ndim: grid.ndim(), coords, seed, source: source.into() })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.ndim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn member(&self, i: usize) -> &[f64] {
        &self.coords[i * self.ndim..(i + 1) * self.ndim]
    }

    pub fn members(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.ndim)
    }

    pub fn configuration(&self, i: usize) -> Configuration {
        Configuration::new(self.member(i).to_vec())
    }

    /// Values of coordinate `axis` over all members.
    pub fn axis_values(&self, axis: usize) -> Vec<f64> {
        self.members().map(|q| q[axis]).collect()
    }

    /// Members `0..n` (or all, if fewer).
    pub fn truncated(&self, n: usize) -> Ensemble {
        let n = n.min(self.len());
        Ensemble { coords: self.coords[..n * self.ndim].to_vec(), ..self.clone() }
    }
}

/// Draws `n` configurations from `|ψ|²`; member `i` depends only on `(seed, i)`.
pub fn sample_born(psi: &SpinorField, n: usize, seed: u64) -> Result<Ensemble, EnsembleError> {
    sample_density(&psi.density(), n, seed)
}

pub fn sample_density(density: &DensityField, n: usize, seed: u64) -> Result<Ensemble, EnsembleError> {
    if n == 0 {
        return Err(EnsembleError::Empty);
    }
    let grid = density.grid();
    let mut cdf = density.cell_masses();
    let mut acc = 0.0;
    for m in cdf.iter_mut() {
        acc += *m;
        *m = acc;
    }
    if !(acc > 0.0) {
        return Err(LatticeError::ZeroNorm.into());
    }
    let nd = grid.ndim();
    let coords: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let mut rng = substream(seed, label::BORN, i as u64);
            let u = rng.random::<f64>() * acc;
            let cell = cdf.partition_point(|&c| c <= u).min(grid.cells() - 1);
            let centre = grid.coords(cell);
            (0..nd)
                .map(|a| {
                    let axis = grid.axis(a);
                    let x = centre[a] + (rng.random::<f64>() - 0.5) * axis.spacing();
                    if axis.periodic {
                        axis.wrap(x)
                    } else {
                        x.clamp(axis.origin, axis.last())
                    }
                })
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(Ensemble { grid: grid.clone(), ndim: nd, coords, seed, source: "born".into() })
}

/// Integrates every member from `field.start()` and returns one ensemble per
/// entry of `times`.
pub fn transport(ensemble: &Ensemble, field: &GuidanceField, times: &[f64], opts: &TrajectoryOptions) -> Result<Vec<Ensemble>, EnsembleError> {
    let t0 = field.start();
    let paths: Vec<Result<Vec<f64>, EnsembleError>> = (0..ensemble.len())
        .into_par_iter()
        .map(|i| {
            let traj = integrate_path(field, &ensemble.configuration(i), t0, times, opts)
                .map_err(|source| EnsembleError::Member { member: i, source })?;
            // drop the record at t0 unless it was requested
            let skip = traj.len() - times.len();
            Ok((skip..traj.len()).flat_map(|k| traj.point(k).to_vec()).collect())
        })
        .collect();
    let mut per_time = vec![Vec::with_capacity(ensemble.coords.len()); times.len()];
    let nd = ensemble.ndim;
    for p in paths {
        let p = p?;
        for (k, chunk) in p.chunks_exact(nd).enumerate() {
            per_time[k].extend_from_slice(chunk);
        }
    }
    Ok(per_time
        .into_iter()
        .map(|coords| Ensemble { coords, ..ensemble.clone() })
        .collect())
}

/// Configurations at time `t` of every member.
pub fn push_forward(ensemble: &Ensemble, field: &GuidanceField, t: f64, opts: &TrajectoryOptions) -> Result<Ensemble, EnsembleError> {
    Ok(transport(ensemble, field, &[t], opts)?.remove(0))
}

/// Coarse binning of a subset of axes; each bin is a block of whole cells.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct BinSpec {
    pub axes: Vec<usize>,
    pub bins: Vec<usize>,
}

impl BinSpec {
    /// Every cell is a bin.
    pub fn grid(grid: &Grid) -> Self {
        Self { axes: (0..grid.ndim()).collect(), bins: grid.shape() }
    }

    /// The grid itself in 1D, 64 bins per axis otherwise.
    pub fn default_for(grid: &Grid) -> Self {
        if grid.ndim() == 1 {
            Self::grid(grid)
        } else {
            Self { axes: (0..grid.ndim()).collect(), bins: grid.shape().iter().map(|&p| p.min(64)).collect() }
        }
    }

    /// Marginal binning of one axis.
    pub fn marginal(axis: usize, bins: usize) -> Self {
        Self { axes: vec![axis], bins: vec![bins] }
    }

    pub fn total_bins(&self) -> usize {
        self.bins.iter().product()
    }

    fn validate(&self, grid: &Grid) -> Result<(), EnsembleError> {
        if self.axes.is_empty() || self.axes.len() != self.bins.len() {
            return Err(EnsembleError::Binning("axes and bin counts must be nonempty and equal in length".into()));
        }
        for (&a, &b) in self.axes.iter().zip(&self.bins) {
            if a >= grid.ndim() {
                return Err(EnsembleError::Binning(format!("axis {a} out of range")));
            }
            let p = grid.axis(a).points;
            if b == 0 || p % b != 0 {
                return Err(EnsembleError::Binning(format!("{b} bins do not divide {p} points on axis {a}")));
            }
        }
        Ok(())
    }

    /// Lattice index of the cell containing `x` along `axis`.
    fn cell_of(grid: &Grid, axis: usize, x: f64) -> usize {
        let ax = grid.axis(axis);
        let h = ax.spacing();
        let u = x - ax.origin + 0.5 * h;
        if ax.periodic {
            ((u.rem_euclid(ax.extent) / h) as usize).min(ax.points - 1)
        } else {
            ((u / h).floor().max(0.0) as usize).min(ax.points - 1)
        }
    }

    fn bin_of(&self, grid: &Grid, q: &[f64]) -> usize {
        let mut flat = 0;
        for (&a, &b) in self.axes.iter().zip(&self.bins) {
            let per = grid.axis(a).points / b;
            flat = flat * b + Self::cell_of(grid, a, q[a]) / per;
        }
        flat
    }

    fn bin_of_cell(&self, grid: &Grid, cell: usize) -> usize {
        let multi = grid.multi_index(cell);
        let mut flat = 0;
        for (&a, &b) in self.axes.iter().zip(&self.bins) {
            let per = grid.axis(a).points / b;
            flat = flat * b + multi[a] / per;
        }
        flat
    }

    /// Probability of each bin under `density`, renormalized over the bins.
    pub fn probabilities(&self, density: &DensityField) -> Result<Vec<f64>, EnsembleError> {
        self.validate(density.grid())?;
        let mut p = vec![0.0; self.total_bins()];
        for (cell, m) in density.cell_masses().into_iter().enumerate() {
            p[self.bin_of_cell(density.grid(), cell)] += m;
        }
        let total: f64 = p.iter().sum();
        if !(total > 0.0) {
            return Err(LatticeError::ZeroNorm.into());
        }
        p.iter_mut().for_each(|x| *x /= total);
        Ok(p)
    }

    /// Fraction of members in each bin.
    pub fn frequencies(&self, ensemble: &Ensemble) -> Result<Vec<f64>, EnsembleError> {
        self.validate(ensemble.grid())?;
        let mut f = vec![0.0; self.total_bins()];
        for q in ensemble.members() {
            f[self.bin_of(ensemble.grid(), q)] += 1.0;
        }
        let n = ensemble.len() as f64;
        f.iter_mut().for_each(|x| *x /= n);
        Ok(f)
    }
}

/// Total-variation distance `½ Σ |p − q|`.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Expected total variation between a multinomial sample of size `n` and its
/// own probabilities, in the normal approximation `E|X/n − p| ≈ √(2p(1−p)/(πn))`.
pub fn expected_multinomial_tv(p: &[f64], n: usize) -> f64 {
    let n = n as f64;
    0.5 * p.iter().map(|&pi| (2.0 * pi * (1.0 - pi) / (std::f64::consts::PI * n)).sqrt()).sum::<f64>()
}

/// Kolmogorov–Smirnov distance between sorted samples and a CDF.
pub fn ks_distance(sorted: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

/// CDF of a piecewise-constant density: `edges` ascending (len = masses + 1).
pub fn piecewise_linear_cdf<'a>(edges: &'a [f64], masses: &[f64]) -> impl Fn(f64) -> f64 + 'a {
    let total: f64 = masses.iter().sum();
    let mut cum = Vec::with_capacity(masses.len() + 1);
    cum.push(0.0);
    for m in masses {
        cum.push(cum.last().copied().unwrap_or(0.0) + m / total);
    }
    move |x: f64| {
        if x <= edges[0] {
            return 0.0;
        }
        if x >= edges[edges.len() - 1] {
            return 1.0;
        }
        let j = edges.partition_point(|&e| e <= x) - 1;
        let frac = (x - edges[j]) / (edges[j + 1] - edges[j]);
        cum[j] + frac * (cum[j + 1] - cum[j])
    }
}

/// Distances between an ensemble and a lattice density.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct DistanceReport {
    pub time: f64,
    pub total_variation: f64,
    /// Three times the expected multinomial fluctuation of the TV statistic.
    pub tv_bound: f64,
    pub ks_per_axis: Vec<f64>,
    pub sample_count: usize,
    pub bin_spec: BinSpec,
}

impl DistanceReport {
    pub fn within_bound(&self) -> bool {
        self.total_variation <= self.tv_bound
    }
}

/// Marginal KS distance along `axis` between the ensemble and the
/// piecewise-constant density.
pub fn marginal_ks(ensemble: &Ensemble, density: &DensityField, axis: usize) -> f64 {
    let grid = density.grid();
    let ax = grid.axis(axis);
    let h = ax.spacing();
    let masses = density.marginal_masses(axis);
    let edges: Vec<f64> = (0..=ax.points).map(|j| ax.origin + (j as f64 - 0.5) * h).collect();
    let cdf = piecewise_linear_cdf(&edges, &masses);
    let lo = edges[0];
    let mut xs: Vec<f64> = ensemble
        .members()
        .map(|q| if ax.periodic { lo + (q[axis] - lo).rem_euclid(ax.extent) } else { q[axis] })
        .collect();
    xs.sort_by(f64::total_cmp);
    ks_distance(&xs, cdf)
}

/// Compares an ensemble with `density` over `bins`.
pub fn distance_report(ensemble: &Ensemble, density: &DensityField, bins: &BinSpec, time: f64) -> Result<DistanceReport, EnsembleError> {
    let p = bins.probabilities(density)?;
    let f = bins.frequencies(ensemble)?;
    let n = ensemble.len();
    Ok(DistanceReport {
        time,
        total_variation: total_variation(&f, &p),
        tv_bound: 3.0 * expected_multinomial_tv(&p, n),
        ks_per_axis: (0..density.grid().ndim()).map(|a| marginal_ks(ensemble, density, a)).collect(),
        sample_count: n,
        bin_spec: bins.clone(),
    })
}

/// Samples `|ψ(t0)|²`, transports the sample along the guidance flow and
/// compares it with `|ψ(t)|²` at each requested time.
pub fn equivariance_check(
    evolution: &WaveEvolution,
    field: &GuidanceField,
    n: usize,
    seed: u64,
    times: &[f64],
    bins: &BinSpec,
    opts: &TrajectoryOptions,
) -> Result<Vec<DistanceReport>, EnsembleError> {
    let ensemble = sample_born(evolution.initial(), n, seed)?;
    let moved = transport(&ensemble, field, times, opts)?;
    times
        .iter()
        .zip(&moved)
        .map(|(&t, e)| {
            let psi = evolution.state_at(t).ok_or(GuidanceError::TimeOutOfRange(t))?;
            distance_report(e, &psi.density(), bins, t)
        })
        .collect()
}

/// `|Ψ|²`-measure of the configurations satisfying `predicate`, by cell
/// quadrature with `n_quadrature` sub-points per axis (1 = cell centres).
pub fn typicality_measure(psi: &SpinorField, predicate: impl Fn(&[f64]) -> bool + Sync, n_quadrature: usize) -> f64 {
    let grid = psi.grid();
    let nd = grid.ndim();
    let nq = n_quadrature.max(1);
    let subs = nq.pow(nd as u32);
    let spacings = grid.spacings();
    let masses = psi.density().cell_masses();
    let total: f64 = masses.iter().sum();
    let hit: f64 = masses
        .par_iter()
        .enumerate()
        .map(|(cell, &m)| {
            if m == 0.0 {
                return 0.0;
            }
            let centre = grid.coords(cell);
            let mut inside = 0usize;
            let mut q = [0.0; 3];
            for s in 0..subs {
                let mut rest = s;
                for a in 0..nd {
                    let k = rest % nq;
                    rest /= nq;
                    q[a] = centre[a] + ((k as f64 + 0.5) / nq as f64 - 0.5) * spacings[a];
                }
                inside += predicate(&q[..nd]) as usize;
            }
            m * inside as f64 / subs as f64
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    hit / total
}

/// Conditional wave function `ψ(x, Y)` of the remaining axes, with the
/// environment axes `env_axes` fixed at `y` by Catmull–Rom interpolation,
/// normalized on the system grid.
pub fn conditional_wave_function(psi: &SpinorField, env_axes: &[usize], y: &[f64]) -> Result<SpinorField, EnsembleError> {
    if psi.spin_dim() != 1 {
        return Err(EnsembleError::Unsupported("conditional wave functions need spin_dim 1".into()));
    }
    let grid = psi.grid();
    if env_axes.len() != y.len() || env_axes.is_empty() || env_axes.len() >= grid.ndim() {
        return Err(EnsembleError::Unsupported(format!("environment axes {env_axes:?} with values {y:?}")));
    }
    let sys_axes: Vec<usize> = (0..grid.ndim()).filter(|a| !env_axes.contains(a)).collect();
    let sub = grid.sub_grid(&sys_axes)?;
    let strides = grid.strides();
    // flat offsets and weights of the environment stencil
    let mut terms: Vec<(usize, f64)> = vec![(0, 1.0)];
    for (&a, &ya) in env_axes.iter().zip(y) {
        let st = axis_stencil(grid, a, ya).ok_or_else(|| GuidanceError::OutsideGrid(y.to_vec()))?;
        let stride = strides[a];
        terms = terms
            .iter()
            .flat_map(|&(off, w)| (0..st.len).map(move |k| (off + st.idx[k] * stride, w * st.w[k])))
            .collect();
    }
    let amps = psi.amplitudes();
    let mut values = Vec::with_capacity(sub.cells());
    let mut multi = [0usize; 3];
    for cell in 0..sub.cells() {
        let m = sub.multi_index(cell);
        for (k, &a) in sys_axes.iter().enumerate() {
            multi[a] = m[k];
        }
        let base: usize = sys_axes.iter().map(|&a| multi[a] * strides[a]).sum();
        values.push(terms.iter().map(|&(off, w)| amps[base + off] * w).sum::<Complex64>());
    }
    let slice = SpinorField::from_amplitudes(&sub, 1, values)?;
    let n2 = slice.norm_sqr();
    if !(n2 >= 1e-14) {
        return Err(EnsembleError::VanishingSlice(n2));
    }
    Ok(slice.normalized()?)
}

/// Overlap of wave-function branches: `Σ_cells min_α |ψ_α|² dV`. Zero when the
/// branches have disjoint supports; equal to a branch's mass when all branches
/// coincide.
pub fn branch_overlap(branches: &[SpinorField]) -> Result<f64, EnsembleError> {
    let (first, rest) = branches.split_first().ok_or(EnsembleError::Empty)?;
    if rest.is_empty() {
        return Err(EnsembleError::Unsupported("branch overlap needs at least two branches".into()));
    }
    if rest.iter().any(|b| !b.same_shape(first)) {
        return Err(LatticeError::GridMismatch.into());
    }
    let densities: Vec<_> = branches.iter().map(|b| b.density()).collect();
    let dv = first.grid().cell_volume();
    let s: f64 = (0..first.grid().cells())
        .map(|c| densities.iter().map(|d| d.values()[c]).fold(f64::INFINITY, f64::min))
        .sum();
    Ok(s * dv)
}

/// Restricts `psi` to each mask; masks must not overlap.
pub fn mask_branches(psi: &SpinorField, masks: &[Vec<bool>]) -> Result<Vec<SpinorField>, EnsembleError> {
    let cells = psi.grid().cells();
    let mut owner = vec![usize::MAX; cells];
    for (i, m) in masks.iter().enumerate() {
        if m.len() != cells {
            return Err(LatticeError::Length { expected: cells, got: m.len() }.into());
        }
        for (c, &inside) in m.iter().enumerate() {
            if inside {
                if owner[c] != usize::MAX {
                    return Err(EnsembleError::OverlappingMasks(c));
                }
                owner[c] = i;
            }
        }
    }
    let d = psi.spin_dim();
    masks
        .iter()
        .map(|m| {
            let mut b = psi.clone();
            for (c, amps) in b.amplitudes_mut().chunks_exact_mut(d).enumerate() {
                if !m[c] {
                    amps.iter_mut().for_each(|a| *a = Complex64::new(0.0, 0.0));
                }
            }
            Ok(b)
        })
        .collect()
}

/// Asymptotic-velocity statistics at one horizon.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct MomentumReport {
    pub horizon: f64,
    /// `m_a Q_a(T) / T`, member-major.
    #[serde(skip)]
    pub momenta: Vec<f64>,
    /// KS distance per axis to the marginals of `ħ|ψ̂0(k)|²`.
    pub ks_per_axis: Vec<f64>,
    pub sample_count: usize,
}

/// Compares `m·Q(T)/T` with the momentum distribution `|ψ̂0(k)|²` (k = p/ħ)
/// at each horizon `T`. The evolution must be free.
pub fn asymptotic_momentum(
    evolution: &WaveEvolution,
    field: &GuidanceField,
    h: &HamiltonianSpec,
    ensemble: &Ensemble,
    horizons: &[f64],
    opts: &TrajectoryOptions,
) -> Result<Vec<MomentumReport>, EnsembleError> {
    if h.potential.is_some() || h.spin_coupling.is_some() {
        return Err(EnsembleError::Unsupported("asymptotic momentum needs a free evolution".into()));
    }
    if horizons.iter().any(|&t| !(t > evolution.start())) {
        return Err(EnsembleError::Unsupported("horizons must lie after the start".into()));
    }
    let grid = evolution.grid();
    let nd = grid.ndim();
    let masses = h.axis_masses(nd).map_err(GuidanceError::from)?;
    let spectrum = evolution.initial().spectral_transform();
    let spec_density = spectrum.density();
    let marginals: Vec<(Vec<f64>, Vec<f64>)> = (0..nd)
        .map(|a| {
            let ax = grid.axis(a);
            let dk = 2.0 * std::f64::consts::PI / ax.extent;
            let mut mass = vec![0.0; ax.points];
            for (cell, v) in spec_density.iter().enumerate() {
                mass[grid.multi_index(cell)[a]] += v;
            }
            // ascending wavenumber order
            let mut order: Vec<usize> = (0..ax.points).collect();
            order.sort_by(|&i, &j| ax.wavenumber(i).total_cmp(&ax.wavenumber(j)));
            let sorted: Vec<f64> = order.iter().map(|&i| mass[i]).collect();
            let edges: Vec<f64> = order
                .iter()
                .map(|&i| h.hbar * (ax.wavenumber(i) - 0.5 * dk))
                .chain(std::iter::once(h.hbar * (ax.wavenumber(order[ax.points - 1]) + 0.5 * dk)))
                .collect();
            (edges, sorted)
        })
        .collect();
    let moved = transport(ensemble, field, horizons, opts)?;
    Ok(horizons
        .iter()
        .zip(moved)
        .map(|(&t, e)| {
            let elapsed = t - evolution.start();
            let momenta: Vec<f64> = e.members().flat_map(|q| (0..nd).map(|a| masses[a] * q[a] / elapsed).collect::<Vec<_>>()).collect();
            let ks_per_axis = (0..nd)
                .map(|a| {
                    let mut xs: Vec<f64> = momenta.chunks_exact(nd).map(|p| p[a]).collect();
                    xs.sort_by(f64::total_cmp);
                    let (edges, mass) = &marginals[a];
                    ks_distance(&xs, piecewise_linear_cdf(edges, mass))
                })
                .collect();
            MomentumReport { horizon: t, momenta, ks_per_axis, sample_count: e.len() }
        })
        .collect())
}

/// Writes an ensemble as CSV: `member_id,q_1,…,q_M`.
pub fn write_ensemble_csv<W: Write>(mut w: W, ensemble: &Ensemble) -> io::Result<()> {
    let header: Vec<String> = std::iter::once("member_id".to_string()).chain((1..=ensemble.ndim).map(|i| format!("q_{i}"))).collect();
    writeln!(w, "{}", header.join(","))?;
    for (i, q) in ensemble.members().enumerate() {
        write!(w, "{i}")?;
        for x in q {
            write!(w, ",{x}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{evolve, harmonic, PropagatorConfig};
    use crate::lattice::Axis;
    use proptest::prelude::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn gaussian(grid: &Grid, sigma: f64) -> SpinorField {
        SpinorField::scalar_from_fn(grid, |x| c((-x.iter().map(|v| v * v).sum::<f64>() / (4.0 * sigma * sigma)).exp(), 0.0))
            .unwrap()
            .normalized()
            .unwrap()
    }

    #[test]
    fn degenerate_density_fills_one_cell() {
        let g = Grid::new(vec![Axis::centered(8.0, 16)]).unwrap();
        let mut v = vec![0.0; 16];
        v[5] = 1.0;
        let e = sample_density(&DensityField::new(&g, v).unwrap(), 500, 3).unwrap();
        let (lo, hi) = (g.coords(5)[0] - 0.25, g.coords(5)[0] + 0.25);
        assert!(e.members().all(|q| q[0] >= lo && q[0] < hi));
    }

    #[test]
    fn two_cell_counts_are_binomial() {
        let g = Grid::new(vec![Axis::centered(8.0, 8)]).unwrap();
        let mut v = vec![0.0; 8];
        v[2] = 0.25;
        v[6] = 0.75;
        let n = 10_000;
        let e = sample_density(&DensityField::new(&g, v).unwrap(), n, 11).unwrap();
        let heavy = e.members().filter(|q| q[0] > 0.0).count() as f64;
        let sd = (n as f64 * 0.25 * 0.75).sqrt();
        assert!((heavy - 7500.0).abs() <= 3.0 * sd, "{heavy}");
    }

    #[test]
    fn uniform_density_passes_chi_square() {
        let g = Grid::new(vec![Axis::new(64.0, 64)]).unwrap();
        let n = 100_000;
        let e = sample_density(&DensityField::new(&g, vec![1.0; 64]).unwrap(), n, 5).unwrap();
        let mut counts = [0usize; 64];
        for q in e.members() {
            counts[BinSpec::cell_of(&g, 0, q[0])] += 1;
        }
        let expected = n as f64 / 64.0;
        let chi2: f64 = counts.iter().map(|&k| (k as f64 - expected).powi(2) / expected).sum();
        let crit = ChiSquared::new(63.0).unwrap().inverse_cdf(0.99);
        assert!(chi2 < crit, "chi2 {chi2} vs {crit}");
    }

    #[test]
    fn sampling_is_deterministic_and_order_free() {
        let g = Grid::new(vec![Axis::centered(10.0, 64), Axis::centered(10.0, 32)]).unwrap();
        let psi = gaussian(&g, 1.0);
        let a = sample_born(&psi, 300, 9).unwrap();
        let b = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap().install(|| sample_born(&psi, 300, 9).unwrap());
        assert_eq!(a, b);
        // a longer run extends the shorter one member by member
        assert_eq!(sample_born(&psi, 1000, 9).unwrap().truncated(300), a);
        assert_ne!(sample_born(&psi, 300, 10).unwrap(), a);
    }

    #[test]
    fn tv_of_exact_frequencies_is_zero_and_bound_scales() {
        let p = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(total_variation(&p, &p), 0.0);
        let e1 = expected_multinomial_tv(&p, 100);
        let e2 = expected_multinomial_tv(&p, 400);
        assert!((e1 / e2 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn expected_tv_matches_brute_force_resampling() {
        // oracle: average TV of many independent samples of a fixed law
        let g = Grid::new(vec![Axis::centered(12.0, 64)]).unwrap();
        let psi = gaussian(&g, 1.0);
        let bins = BinSpec::marginal(0, 16);
        let p = bins.probabilities(&psi.density()).unwrap();
        let n = 2000;
        let reps = 200;
        let mean: f64 = (0..reps)
            .map(|r| {
                let e = sample_born(&psi, n, 1000 + r).unwrap();
                total_variation(&bins.frequencies(&e).unwrap(), &p)
            })
            .sum::<f64>()
            / reps as f64;
        let predicted = expected_multinomial_tv(&p, n);
        assert!((mean / predicted - 1.0).abs() < 0.1, "mean {mean} predicted {predicted}");
    }

    #[test]
    fn binning_error_of_smooth_gaussian_is_small() {
        // n → ∞ limit: the binned lattice density against the exact Gaussian law
        let g = Grid::new(vec![Axis::centered(16.0, 256)]).unwrap();
        let psi = gaussian(&g, 1.0);
        let bins = BinSpec::marginal(0, 64);
        let p = bins.probabilities(&psi.density()).unwrap();
        let normal = Normal::new(0.0, 1.0).unwrap();
        let h = g.axis(0).spacing();
        let width = 4.0 * h;
        let exact: Vec<f64> = (0..64)
            .map(|b| {
                let lo = g.axis(0).origin - 0.5 * h + b as f64 * width;
                normal.cdf(lo + width) - normal.cdf(lo)
            })
            .collect();
        assert!(total_variation(&p, &exact) < 0.01);
    }

    #[test]
    fn sample_matches_density_at_large_n() {
        let g = Grid::new(vec![Axis::centered(16.0, 128), Axis::centered(16.0, 128)]).unwrap();
        let psi = gaussian(&g, 1.5);
        let n = 20_000;
        let e = sample_born(&psi, n, 2).unwrap();
        let r = distance_report(&e, &psi.density(), &BinSpec { axes: vec![0, 1], bins: vec![16, 16] }, 0.0).unwrap();
        assert!(r.within_bound(), "{r:?}");
        for ks in &r.ks_per_axis {
            assert!(*ks < 1.63 / (n as f64).sqrt() * 1.5);
        }
    }

    #[test]
    fn bins_must_divide_points() {
        let g = Grid::new(vec![Axis::centered(16.0, 128)]).unwrap();
        let psi = gaussian(&g, 1.0);
        assert!(BinSpec::marginal(0, 48).probabilities(&psi.density()).is_err());
        assert!(BinSpec::marginal(1, 16).probabilities(&psi.density()).is_err());
    }

    fn free_setup() -> (WaveEvolution, GuidanceField) {
        let g = Grid::new(vec![Axis::centered(40.0, 1024)]).unwrap();
        let h = HamiltonianSpec::free(&g);
        let psi0 = gaussian(&g, 1.0);
        let ev = evolve(&psi0, &h, 2.0, &PropagatorConfig::with_dt(5e-4, 40)).unwrap();
        let field = GuidanceField::new(&ev, &h).unwrap();
        (ev, field)
    }

    #[test]
    fn push_forward_at_start_is_identity() {
        let (ev, field) = free_setup();
        let e = sample_born(ev.initial(), 50, 1).unwrap();
        let same = push_forward(&e, &field, 0.0, &TrajectoryOptions::new(0.02)).unwrap();
        assert_eq!(same, e);
    }

    #[test]
    fn free_gaussian_width_after_push_forward() {
        let (ev, field) = free_setup();
        let n = 2000;
        let e = sample_born(ev.initial(), n, 4).unwrap();
        let moved = push_forward(&e, &field, 2.0, &TrajectoryOptions::new(0.02)).unwrap();
        let xs = moved.axis_values(0);
        let mean = xs.iter().sum::<f64>() / n as f64;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
        let target = 2f64.sqrt();
        assert!((sd - target).abs() <= 3.0 / (2.0 * n as f64).sqrt() * target, "sd {sd}");
    }

    #[test]
    fn stationary_state_leaves_ensemble_in_place() {
        let g = Grid::new(vec![Axis::centered(20.0, 256)]).unwrap();
        let h = HamiltonianSpec::free(&g);
        let h = h.clone().with_potential(harmonic(&g, &h, 1.0).unwrap());
        let ground = gaussian(&g, std::f64::consts::FRAC_1_SQRT_2);
        let field = GuidanceField::stationary(&ground, &h).unwrap();
        let e = sample_born(&ground, 200, 8).unwrap();
        let moved = push_forward(&e, &field, 1.0, &TrajectoryOptions::new(0.05)).unwrap();
        for (a, b) in e.members().zip(moved.members()) {
            assert!((a[0] - b[0]).abs() < 1e-8);
        }
    }

    #[test]
    fn zeroed_velocities_fail_equivariance() {
        let (ev, field) = free_setup();
        let bins = BinSpec::marginal(0, 64);
        let opts = TrajectoryOptions::new(0.05);
        let good = equivariance_check(&ev, &field, 4000, 3, &[2.0], &bins, &opts).unwrap();
        assert!(good[0].within_bound(), "{:?}", good[0]);
        let bad = equivariance_check(&ev, &field, 4000, 3, &[2.0], &bins, &opts.with_model(crate::guidance::VelocityModel::Zero)).unwrap();
        assert!(bad[0].total_variation > 0.1, "{:?}", bad[0]);
        assert!(!bad[0].within_bound());
    }

    #[test]
    fn typicality_basics() {
        let g = Grid::new(vec![Axis::centered(16.0, 128)]).unwrap();
        let psi = gaussian(&g, 1.0);
        assert!((typicality_measure(&psi, |_| true, 1) - 1.0).abs() < 1e-12);
        // x = 0 is a lattice point; sub-point quadrature splits its cell evenly
        assert!((typicality_measure(&psi, |q| q[0] > 0.0, 2) - 0.5).abs() < 1e-12);
        let band = |q: &[f64]| q[0].abs() < 0.7;
        let brute: f64 = psi.density().cell_masses().iter().enumerate().filter(|(c, _)| band(&g.coords(*c)[..1])).map(|(_, m)| m).sum();
        assert!((typicality_measure(&psi, band, 1) - brute).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn typicality_of_complement_adds_to_one(cut in -3.0f64..3.0, nq in 1usize..4) {
            let g = Grid::new(vec![Axis::centered(12.0, 64), Axis::centered(12.0, 32)]).unwrap();
            let psi = SpinorField::scalar_from_fn(&g, |x| c((-(x[0] - 1.0).powi(2) / 3.0 - x[1] * x[1]).exp(), x[1])).unwrap().normalized().unwrap();
            let pred = |q: &[f64]| q[0] + 0.5 * q[1] > cut;
            let a = typicality_measure(&psi, pred, nq);
            let b = typicality_measure(&psi, |q| !pred(q), nq);
            prop_assert!((a + b - 1.0).abs() < 1e-12);
            let wider = typicality_measure(&psi, |q| q[0] + 0.5 * q[1] > cut - 0.5, nq);
            prop_assert!(wider >= a);
        }

        #[test]
        fn sample_born_is_bit_exact(seed in any::<u64>()) {
            let g = Grid::new(vec![Axis::centered(10.0, 32)]).unwrap();
            let psi = gaussian(&g, 1.0);
            prop_assert_eq!(sample_born(&psi, 64, seed).unwrap(), sample_born(&psi, 64, seed).unwrap());
        }
    }

    fn two_axis() -> Grid {
        Grid::new(vec![Axis::centered(16.0, 64), Axis::centered(24.0, 64)]).unwrap()
    }

    #[test]
    fn conditional_of_product_is_the_factor() {
        let g = two_axis();
        let phi = |x: f64| Complex64::from_polar((-(x - 1.0).powi(2) / 2.0).exp(), 0.4 * x);
        let chi = |y: f64| c((-y * y / 8.0).exp(), 0.0);
        let psi = SpinorField::scalar_from_fn(&g, |q| phi(q[0]) * chi(q[1])).unwrap();
        let sub = g.sub_grid(&[0]).unwrap();
        let target = SpinorField::scalar_from_fn(&sub, |q| phi(q[0])).unwrap();
        let a = conditional_wave_function(&psi, &[1], &[0.3]).unwrap();
        let b = conditional_wave_function(&psi, &[1], &[-2.71]).unwrap();
        assert!(a.fidelity(&target).unwrap() > 1.0 - 1e-10);
        assert!(a.fidelity(&b).unwrap() > 1.0 - 1e-10);
        assert!((a.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conditional_selects_the_occupied_branch() {
        let g = two_axis();
        let phi1 = |x: f64| c((-(x * x) / 2.0).exp(), 0.0);
        let phi2 = |x: f64| c(x * (-(x * x) / 2.0).exp(), 0.0);
        let chi = |y: f64| c((-y * y / 0.5).exp(), 0.0);
        let psi = SpinorField::scalar_from_fn(&g, |q| phi1(q[0]) * chi(q[1] - 6.0) * 0.6 + phi2(q[0]) * chi(q[1] + 6.0) * 0.8).unwrap();
        let sub = g.sub_grid(&[0]).unwrap();
        let f1 = SpinorField::scalar_from_fn(&sub, |q| phi1(q[0])).unwrap();
        let cwf = conditional_wave_function(&psi, &[1], &[6.1]).unwrap();
        assert!(cwf.fidelity(&f1).unwrap() > 1.0 - 1e-10);
        // between the branches the slice is (numerically) empty
        assert!(matches!(conditional_wave_function(&psi, &[1], &[-11.9]), Err(EnsembleError::VanishingSlice(_))));
    }

    #[test]
    fn conditional_on_a_lattice_line_is_the_raw_slice() {
        let g = two_axis();
        let psi = SpinorField::scalar_from_fn(&g, |q| Complex64::from_polar((-(q[0] * q[0]) / 4.0 - q[1] * q[1] / 9.0).exp(), q[0] * q[1])).unwrap();
        let j = 37;
        let y = g.axis(1).coord(j);
        let cwf = conditional_wave_function(&psi, &[1], &[y]).unwrap();
        let raw: Vec<Complex64> = (0..64).map(|i| psi.value(g.flat_index(&[i, j]), 0)).collect();
        let sub = g.sub_grid(&[0]).unwrap();
        let raw = SpinorField::from_amplitudes(&sub, 1, raw).unwrap().normalized().unwrap();
        assert!(cwf.max_abs_diff(&raw).unwrap() < 1e-10);
    }

    #[test]
    fn branch_overlap_cases() {
        let g = Grid::new(vec![Axis::centered(40.0, 256)]).unwrap();
        let packet = |x0: f64| SpinorField::scalar_from_fn(&g, move |q| c((-(q[0] - x0).powi(2) / 2.0).exp(), 0.0)).unwrap();
        let (a, b) = (packet(-10.0), packet(10.0));
        let masks = vec![
            (0..256).map(|c| g.coords(c)[0] < 0.0).collect::<Vec<_>>(),
            (0..256).map(|c| g.coords(c)[0] >= 0.0).collect::<Vec<_>>(),
        ];
        let psi = a.combine(c(1.0, 0.0), &b, c(1.0, 0.0)).unwrap();
        let masked = mask_branches(&psi, &masks).unwrap();
        assert_eq!(branch_overlap(&masked).unwrap(), 0.0);
        assert!(branch_overlap(&[a.clone(), b.clone()]).unwrap() < 1e-20);
        assert!((branch_overlap(&[a.clone(), a.clone()]).unwrap() - a.norm_sqr()).abs() < 1e-15);
        assert!(branch_overlap(&[a.clone()]).is_err());
        let mut clash = masks.clone();
        clash[1][0] = true;
        clash[0][0] = true;
        assert!(matches!(mask_branches(&psi, &clash), Err(EnsembleError::OverlappingMasks(0))));
    }

    #[test]
    fn narrow_spectrum_gives_single_momentum() {
        let g = Grid::new(vec![Axis::centered(400.0, 1024)]).unwrap();
        let h = HamiltonianSpec::free(&g);
        let k0 = 1.5;
        let psi0 = SpinorField::scalar_from_fn(&g, |q| Complex64::from_polar((-(q[0] * q[0]) / 1600.0).exp(), k0 * q[0])).unwrap().normalized().unwrap();
        let ev = evolve(&psi0, &h, 20.0, &PropagatorConfig::with_dt(0.02, 10)).unwrap();
        let field = GuidanceField::new(&ev, &h).unwrap();
        // start near the packet centre so Q(T)/T is dominated by the drift
        let e = Ensemble::new(&g, &[Configuration::new(vec![0.0]), Configuration::new(vec![0.5])], 0, "manual").unwrap();
        let r = asymptotic_momentum(&ev, &field, &h, &e, &[20.0], &TrajectoryOptions::new(0.1)).unwrap();
        for p in &r[0].momenta {
            assert!((p - k0).abs() < 0.03, "{p}");
        }
    }

    #[test]
    fn ensemble_csv_layout() {
        let g = Grid::new(vec![Axis::centered(4.0, 8), Axis::centered(4.0, 8)]).unwrap();
        let e = Ensemble::new(&g, &[Configuration::new(vec![0.5, -1.0]), Configuration::new(vec![0.0, 1.25])], 0, "manual").unwrap();
        let mut buf = Vec::new();
        write_ensemble_csv(&mut buf, &e).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "member_id,q_1,q_2\n0,0.5,-1\n1,0,1.25\n");
    }
}
