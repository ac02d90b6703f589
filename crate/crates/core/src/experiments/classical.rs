use std::collections::BTreeMap;
use std::f64::consts::PI;

use super::{evolve_spaced, gaussian, Check, ExperimentError, Relation, Scenario, ScenarioRun, Table};
use crate::dynamics::{harmonic, HamiltonianSpec};
use crate::ensembles::{sample_born, transport};
use crate::guidance::{integrate_trajectory, Configuration, GuidanceField, TrajectoryOptions};
use crate::lattice::{Axis, Grid, SpinorField};

const RELATIVE_LIMIT: f64 = 0.02;
const MEAN_RECORDS: usize = 101;

pub(super) fn setup(s: &Scenario) -> Result<(SpinorField, HamiltonianSpec), ExperimentError> {
    let extent = s.param("extent");
    let grid = Grid::new(vec![Axis::centered(extent, s.count("points"))])?;
    let sigma = s.param("width_fraction") * extent;
    let x0 = s.param("amplitude");
    let psi = SpinorField::scalar_from_fn(&grid, |q| gaussian(q[0], x0, sigma, 0.0))?.normalized()?;
    let h = HamiltonianSpec::free(&grid);
    let v = harmonic(&grid, &h, s.param("omega"))?;
    Ok((psi, h.with_potential(v)))
}

/// Standard deviation of position under |ψ|².
fn position_spread(psi: &SpinorField) -> f64 {
    let grid = psi.grid();
    let rho = psi.density();
    let (mut w, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for (c, &p) in rho.values().iter().enumerate() {
        let x = grid.coords(c)[0];
        w += p;
        m1 += p * x;
        m2 += p * x * x;
    }
    let mean = m1 / w;
    (m2 / w - mean * mean).max(0.0).sqrt()
}

pub(super) fn run(s: &Scenario, seed: u64) -> Result<ScenarioRun, ExperimentError> {
    let (psi0, h) = setup(s)?;
    let (x0, omega) = (s.param("amplitude"), s.param("omega"));
    let period = 2.0 * PI / omega;
    let evolution = evolve_spaced(&psi0, &h, 0.0, period, s.param("snapshot_spacing"))?;
    let field = GuidanceField::new(&evolution, &h)?;
    let opts = TrajectoryOptions::new(s.param("rk_dt"));
    let newton = |t: f64| x0 * (omega * t).cos();

    let centre = integrate_trajectory(&field, &Configuration::new(vec![x0]), period, &opts)?;
    let centre_dev = centre.times().iter().zip(centre.points()).map(|(&t, p)| (p[0] - newton(t)).abs()).fold(0.0, f64::max);

    let times: Vec<f64> = (0..MEAN_RECORDS).map(|i| period * i as f64 / (MEAN_RECORDS - 1) as f64).collect();
    let ensemble = sample_born(&psi0, s.ensemble_size, seed)?;
    let moved = transport(&ensemble, &field, &times, &opts)?;
    let means: Vec<f64> = moved.iter().map(|e| e.axis_values(0).iter().sum::<f64>() / e.len() as f64).collect();
    let mean_dev = times.iter().zip(&means).map(|(&t, m)| (m - newton(t)).abs()).fold(0.0, f64::max);
    let spread = evolution.snapshots().iter().map(position_spread).fold(0.0, f64::max);
    let allowance = 3.0 * spread / (s.ensemble_size as f64).sqrt() / x0.abs();

    let checks = vec![
        Check::new(
            "centre_tracks_orbit",
            "largest |Q(t) − x0 cos ωt| over one period for the trajectory from the packet centre, relative to x0",
            centre_dev / x0.abs(),
            Relation::Below,
            RELATIVE_LIMIT,
            "a Gaussian in a harmonic well moves rigidly along the Newtonian orbit",
        ),
        Check::new(
            "mean_tracks_orbit",
            "largest |ensemble mean − x0 cos ωt| over one period, relative to x0",
            mean_dev / x0.abs(),
            Relation::Below,
            RELATIVE_LIMIT + allowance,
            "⟨x⟩ obeys Newton's law in a harmonic well; 3σ sampling allowance from the largest packet width",
        ),
    ];
    let mut metrics = BTreeMap::new();
    metrics.insert("centre_deviation".into(), centre_dev);
    metrics.insert("mean_deviation".into(), mean_dev);
    metrics.insert("largest_width".into(), spread);

    let mut table = Table::new("orbit", &["t", "centre", "ensemble_mean", "newton"]);
    for (i, &t) in times.iter().enumerate() {
        let k = centre.times().partition_point(|&c| c < t - 1e-9).min(centre.len() - 1);
        table.push(vec![t, centre.point(k)[0], means[i], newton(t)]);
    }
    Ok(ScenarioRun::new(checks, metrics, vec![table]))
}
