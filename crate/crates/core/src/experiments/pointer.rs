use std::collections::BTreeMap;

use nalgebra::DVector;
use num_complex::Complex64;
use rustfft::FftPlanner;

use super::{binomial_sigma, evolve_spaced, gaussian, povm_probability, Check, ExperimentError, PovmTable, Relation, Scenario, ScenarioRun, Table};
use crate::dynamics::HamiltonianSpec;
use crate::ensembles::{branch_overlap, conditional_wave_function, push_forward, sample_born, BinSpec};
use crate::guidance::{GuidanceField, TrajectoryOptions};
use crate::lattice::{Axis, Grid, RealField, SpinorField};

const FIDELITY_LIMIT: f64 = 0.99;
const OVERLAP_LIMIT: f64 = 1e-6;
const LINEARITY_LIMIT: f64 = 1e-10;
const FIDELITY_ROWS: usize = 200;
const HISTOGRAM_BINS: usize = 32;

/// System `x` in a harmonic well, pointer `y`; outcome α = 1, 2 shifts the
/// pointer by `+Δ`, `−Δ`.
#[derive(Debug, Clone)]
pub struct PointerModel {
    pub grid: Grid,
    pub system_grid: Grid,
    /// Ground and first excited oscillator states, orthonormal on the grid.
    pub eigenstates: [Vec<Complex64>; 2],
    pub pointer: Vec<Complex64>,
    pub coefficients: [Complex64; 2],
    pub displacement: f64,
    pub hamiltonian: HamiltonianSpec,
}

impl PointerModel {
    pub fn new(s: &Scenario) -> Result<Self, ExperimentError> {
        let ax = Axis::centered(s.param("extent_x"), s.count("points_x"));
        let ay = Axis::centered(s.param("extent_y"), s.count("points_y"));
        let grid = Grid::new(vec![ax, ay])?;
        let system_grid = grid.sub_grid(&[0])?;
        let omega = s.param("omega");
        let dx = ax.spacing();
        let xs: Vec<f64> = (0..ax.points).map(|i| ax.coord(i)).collect();
        let ground: Vec<f64> = xs.iter().map(|&x| (-0.5 * omega * x * x).exp()).collect();
        let excited: Vec<f64> = xs.iter().map(|&x| x * (-0.5 * omega * x * x).exp()).collect();
        let [g, e] = orthonormalize(ground, excited, dx);
        let sigma = s.param("pointer_width");
        let pointer = (0..ay.points).map(|j| gaussian(ay.coord(j), 0.0, sigma, 0.0)).collect();
        let w = s.param("c1_weight");
        let hamiltonian = HamiltonianSpec::particles(&grid, 2, 1, &[1.0, s.param("pointer_mass")])?
            .with_potential(RealField::from_fn(&grid, |q| 0.5 * omega * omega * q[0] * q[0]));
        Ok(Self {
            grid,
            system_grid,
            eigenstates: [g, e],
            pointer,
            coefficients: [Complex64::new(w.sqrt(), 0.0), Complex64::new((1.0 - w).sqrt(), 0.0)],
            displacement: s.param("displacement"),
            hamiltonian,
        })
    }

    fn shift(alpha: usize) -> f64 {
        if alpha == 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// `Σ_α c_α φ_α(x) χ(y)` before the coupling.
    pub fn initial(&self) -> Result<SpinorField, ExperimentError> {
        let ny = self.pointer.len();
        let amps = (0..self.grid.cells())
            .map(|cell| {
                let (i, j) = (cell / ny, cell % ny);
                (0..2).map(|a| self.coefficients[a] * self.eigenstates[a][i]).sum::<Complex64>() * self.pointer[j]
            })
            .collect();
        Ok(SpinorField::from_amplitudes(&self.grid, 1, amps)?)
    }

    /// Applies `U(s) = Σ_α P_α ⊗ T(s·α·Δ) + (1 − Σ_α P_α) ⊗ 1`, where `P_α`
    /// projects onto the oscillator state `φ_α` and `T(d)` translates the
    /// pointer by `d` through its Fourier phase.
    pub fn couple(&self, psi: &SpinorField, fraction: f64) -> Result<SpinorField, ExperimentError> {
        let ax = self.grid.axis(0);
        let ay = self.grid.axis(1);
        let (nx, ny, dx) = (ax.points, ay.points, ax.spacing());
        let amps = psi.amplitudes();
        let mut out = amps.to_vec();
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(ny);
        let inverse = planner.plan_fft_inverse(ny);
        for (alpha, phi) in self.eigenstates.iter().enumerate() {
            let mut coeff = vec![Complex64::new(0.0, 0.0); ny];
            for i in 0..nx {
                for j in 0..ny {
                    coeff[j] += phi[i].conj() * amps[i * ny + j] * dx;
                }
            }
            let mut shifted = coeff.clone();
            forward.process(&mut shifted);
            let d = fraction * Self::shift(alpha) * self.displacement;
            for (m, c) in shifted.iter_mut().enumerate() {
                *c *= Complex64::from_polar(1.0 / ny as f64, -ay.wavenumber(m) * d);
            }
            inverse.process(&mut shifted);
            for i in 0..nx {
                for j in 0..ny {
                    out[i * ny + j] += phi[i] * (shifted[j] - coeff[j]);
                }
            }
        }
        Ok(SpinorField::from_amplitudes(&self.grid, 1, out)?)
    }

    /// Branch `c_α φ_α(x) χ(y − s·α·Δ)` built directly.
    pub fn branch(&self, alpha: usize, fraction: f64, sigma: f64) -> Result<SpinorField, ExperimentError> {
        let ay = self.grid.axis(1);
        let ny = ay.points;
        let d = fraction * Self::shift(alpha) * self.displacement;
        let amps = (0..self.grid.cells())
            .map(|cell| {
                let (i, j) = (cell / ny, cell % ny);
                let y = ay.coord(j);
                // nearest periodic image of the displaced centre
                let y = y - d - (ay.extent * ((y - d) / ay.extent).round());
                self.coefficients[alpha] * self.eigenstates[alpha][i] * gaussian(y, 0.0, sigma, 0.0)
            })
            .collect();
        Ok(SpinorField::from_amplitudes(&self.grid, 1, amps)?)
    }

    /// `φ_α` as a field on the system axis.
    pub fn eigenstate(&self, alpha: usize) -> Result<SpinorField, ExperimentError> {
        Ok(SpinorField::from_amplitudes(&self.system_grid, 1, self.eigenstates[alpha].clone())?)
    }
}

fn orthonormalize(a: Vec<f64>, b: Vec<f64>, dx: f64) -> [Vec<Complex64>; 2] {
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).sum::<f64>() * dx;
    let na = dot(&a, &a).sqrt();
    let a: Vec<f64> = a.iter().map(|v| v / na).collect();
    let proj = dot(&a, &b);
    let b: Vec<f64> = b.iter().zip(&a).map(|(v, u)| v - proj * u).collect();
    let nb = dot(&b, &b).sqrt();
    let to_c = |v: Vec<f64>, n: f64| v.into_iter().map(|x| Complex64::new(x / n, 0.0)).collect();
    [to_c(a, 1.0), to_c(b, nb)]
}

/// State after a fraction `fraction` of the full pointer displacement.
pub fn pointer_state(s: &Scenario, fraction: f64) -> Result<SpinorField, ExperimentError> {
    let model = PointerModel::new(s)?;
    model.couple(&model.initial()?, fraction)
}

pub(super) fn setup(s: &Scenario) -> Result<(SpinorField, HamiltonianSpec, PointerModel), ExperimentError> {
    let model = PointerModel::new(s)?;
    let psi = model.couple(&model.initial()?, 1.0)?;
    Ok((psi, model.hamiltonian.clone(), model))
}

pub(super) fn run(s: &Scenario, seed: u64) -> Result<ScenarioRun, ExperimentError> {
    let (coupled, h, model) = setup(s)?;
    let settle = s.param("settle_time");
    let spacing = s.param("snapshot_spacing");
    let evolution = evolve_spaced(&coupled, &h, 0.0, settle, spacing)?;
    let field = GuidanceField::new(&evolution, &h)?;
    let opts = TrajectoryOptions::new(s.param("rk_dt"));
    let n = s.ensemble_size;

    let ensemble = sample_born(&coupled, n, seed)?;
    let settled = push_forward(&ensemble, &field, settle, &opts)?;
    let outcomes: Vec<usize> = settled.members().map(|q| if q[1] > 0.0 { 0 } else { 1 }).collect();
    let freq1 = outcomes.iter().filter(|&&a| a == 0).count() as f64 / n as f64;
    let branch_state = DVector::from_vec(model.coefficients.to_vec());
    let predicted = povm_probability(&branch_state, &PovmTable::projective(&[("1", 1.0), ("2", 2.0)]), "1")?;

    let final_state = evolution.last();
    let phis = [model.eigenstate(0)?, model.eigenstate(1)?];
    let fidelities: Vec<f64> = {
        use rayon::prelude::*;
        (0..n)
            .into_par_iter()
            .map(|i| {
                let y = settled.member(i)[1];
                let cwf = conditional_wave_function(final_state, &[1], &[y])?;
                Ok(phis[outcomes[i]].fidelity(&cwf)?)
            })
            .collect::<Result<_, ExperimentError>>()?
    };
    let worst_fidelity = fidelities.iter().copied().fold(f64::INFINITY, f64::min);

    let sigma = s.param("pointer_width");
    let mut branches = Vec::new();
    for alpha in 0..2 {
        let b0 = model.branch(alpha, 1.0, sigma)?;
        branches.push(evolve_spaced(&b0, &h, 0.0, settle, spacing)?.last().clone());
    }
    let overlap = branch_overlap(&branches)?;
    let recombined = branches[0].combine(Complex64::new(1.0, 0.0), &branches[1], Complex64::new(1.0, 0.0))?;
    let linearity = recombined.max_abs_diff(final_state)?;

    let checks = vec![
        Check::new(
            "outcome_frequency",
            "|frequency of pointer reading 1 − |c1|²|",
            (freq1 - predicted).abs(),
            Relation::AtMost,
            3.0 * binomial_sigma(predicted, n),
            "three binomial standard deviations",
        ),
        Check::new(
            "conditional_fidelity",
            "smallest fidelity between a member's conditional wave function and its selected eigenstate",
            worst_fidelity,
            Relation::Above,
            FIDELITY_LIMIT,
            "the conditional wave function collapses onto the eigenstate of the outcome",
        ),
        Check::new(
            "branch_overlap",
            "∫ min_α |ψ_α|² over configuration space at read-out",
            overlap,
            Relation::Below,
            OVERLAP_LIMIT,
            "branches with disjoint supports license effective collapse",
        ),
        Check::new(
            "linearity",
            "largest amplitude difference between the evolved coupled state and the sum of evolved branches",
            linearity,
            Relation::AtMost,
            LINEARITY_LIMIT,
            "the coupling unitary and the evolution are linear",
        ),
    ];

    let mut metrics = BTreeMap::new();
    metrics.insert("outcome_1_frequency".into(), freq1);
    metrics.insert("outcome_1_probability".into(), predicted);
    metrics.insert("mean_fidelity".into(), fidelities.iter().sum::<f64>() / n as f64);

    let bins = BinSpec::marginal(1, HISTOGRAM_BINS);
    let hist = bins.frequencies(&settled)?;
    let probs = bins.probabilities(&final_state.density())?;
    let ay = model.grid.axis(1);
    let per_bin = ay.points / HISTOGRAM_BINS;
    let mut histogram = Table::new("pointer_histogram", &["bin", "y", "density_probability", "frequency"]);
    for j in 0..HISTOGRAM_BINS {
        let y = ay.coord(j * per_bin) + 0.5 * (per_bin as f64 - 1.0) * ay.spacing();
        histogram.push(vec![j as f64, y, probs[j], hist[j]]);
    }
    let mut fid = Table::new("conditional_fidelity", &["member_id", "y", "outcome", "fidelity"]);
    for i in 0..n.min(FIDELITY_ROWS) {
        fid.push(vec![i as f64, settled.member(i)[1], (outcomes[i] + 1) as f64, fidelities[i]]);
    }
    Ok(ScenarioRun::new(checks, metrics, vec![histogram, fid]))
}
