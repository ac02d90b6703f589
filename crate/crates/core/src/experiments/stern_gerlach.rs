use std::collections::BTreeMap;

use nalgebra::DVector;
use num_complex::Complex64;
use rayon::prelude::*;

use super::{binomial_sigma, evolve_spaced, gaussian, povm_probability, Check, ExperimentError, PovmTable, Relation, Scenario, ScenarioRun, Table};
use crate::dynamics::{HamiltonianSpec, SpinCoupling, WaveEvolution};
use crate::ensembles::{push_forward, sample_born, Ensemble};
use crate::guidance::{integrate_trajectory, GuidanceField, TrajectoryOptions};
use crate::lattice::{Axis, Grid, SpinorField};

const FAN: usize = 40;

/// Packet with spinor `(√w, √(1-w))` and the coupling Hamiltonian for field
/// sign `sign` (−1 inverts the field).
pub(super) fn setup(s: &Scenario, up_weight: f64, sign: f64) -> Result<(SpinorField, HamiltonianSpec), ExperimentError> {
    let grid = Grid::new(vec![Axis::centered(s.param("extent"), s.count("points"))])?;
    let spinor = [Complex64::new(up_weight.sqrt(), 0.0), Complex64::new((1.0 - up_weight).sqrt(), 0.0)];
    let sigma = s.param("packet_width");
    let psi = SpinorField::product(&grid, &spinor, |q| gaussian(q[0], 0.0, sigma, 0.0))?.normalized()?;
    let h = HamiltonianSpec::free(&grid).with_spin_coupling(SpinCoupling::linear_gradient(&grid, 0, sign * s.param("strength"))?);
    Ok((psi, h))
}

fn history(s: &Scenario, up_weight: f64, sign: f64) -> Result<(WaveEvolution, GuidanceField), ExperimentError> {
    let (psi0, coupled) = setup(s, up_weight, sign)?;
    let tau = s.param("coupling_time");
    let spacing = s.param("snapshot_spacing");
    let mut evolution = evolve_spaced(&psi0, &coupled, 0.0, tau, spacing)?;
    let free = HamiltonianSpec::free(psi0.grid());
    let flight = evolve_spaced(evolution.last(), &free, tau, s.param("readout_time") - tau, spacing)?;
    evolution.append(flight)?;
    // the velocity field does not depend on the potential, only on ψ and the masses
    let field = GuidanceField::new(&evolution, &free)?;
    Ok((evolution, field))
}

/// Outcome "up" per member: deflected upwards under the original field,
/// downwards under the inverted one.
fn outcomes(arrived: &Ensemble, sign: f64) -> Vec<bool> {
    arrived.members().map(|q| sign * q[0] > 0.0).collect()
}

fn fraction(v: &[bool]) -> f64 {
    v.iter().filter(|&&b| b).count() as f64 / v.len() as f64
}

/// Centroid and rms width of one spin component's density.
fn component_moments(psi: &SpinorField, spin: usize) -> (f64, f64) {
    let grid = psi.grid();
    let (mut m0, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for cell in 0..grid.cells() {
        let (z, w) = (grid.coords(cell)[0], psi.value(cell, spin).norm_sqr());
        m0 += w;
        m1 += w * z;
        m2 += w * z * z;
    }
    let mean = m1 / m0;
    (mean, (m2 / m0 - mean * mean).max(0.0).sqrt())
}

pub(super) fn run(s: &Scenario, seed: u64) -> Result<ScenarioRun, ExperimentError> {
    let opts = TrajectoryOptions::new(s.param("rk_dt"));
    let t_read = s.param("readout_time");
    let n = s.ensemble_size;
    let w = s.param("up_weight");

    let spin_state = DVector::from_vec(vec![Complex64::new(w.sqrt(), 0.0), Complex64::new((1.0 - w).sqrt(), 0.0)]);
    let predicted = povm_probability(&spin_state, &PovmTable::sigma_z(), "up")?;
    let sigma = binomial_sigma(predicted, n);

    let mut outcome_sets = Vec::new();
    for &(weight, sign) in &[(w, 1.0), (w, -1.0), (0.5, 1.0), (0.5, -1.0)] {
        let (evolution, field) = history(s, weight, sign)?;
        let ensemble = sample_born(evolution.initial(), n, seed)?;
        let arrived = push_forward(&ensemble, &field, t_read, &opts)?;
        outcome_sets.push((ensemble, arrived, evolution, field, sign));
    }
    let up = fraction(&outcomes(&outcome_sets[0].1, 1.0));
    let up_inverted = fraction(&outcomes(&outcome_sets[1].1, -1.0));

    let (x_start, x_arrived, x_evolution, x_field, _) = &outcome_sets[2];
    let original = outcomes(x_arrived, 1.0);
    let inverted = outcomes(&outcome_sets[3].1, -1.0);
    let upper: Vec<usize> = (0..n).filter(|&i| x_start.member(i)[0] > 0.0).collect();
    let upper_up = upper.iter().filter(|&&i| original[i]).count() as f64 / upper.len().max(1) as f64;
    let flips = original.iter().zip(&inverted).filter(|(a, b)| a != b).count() as f64 / n as f64;

    let (up_mean, up_width) = component_moments(x_evolution.last(), 0);
    let (down_mean, _) = component_moments(x_evolution.last(), 1);
    let separation = (up_mean - down_mean) / up_width;

    let checks = vec![
        Check::new(
            "up_fraction",
            "|fraction ending z > 0 − |c↑|²|",
            (up - predicted).abs(),
            Relation::AtMost,
            3.0 * sigma,
            "three binomial standard deviations",
        ),
        Check::new(
            "inverted_statistics",
            "|fraction reading up under the inverted field − |c↑|²|",
            (up_inverted - predicted).abs(),
            Relation::AtMost,
            3.0 * sigma,
            "three binomial standard deviations",
        ),
        Check::new(
            "upper_half_up",
            "fraction of x-up members starting above the packet centre that end up",
            upper_up,
            Relation::AtLeast,
            0.95,
            "members in the upper half are deflected upwards",
        ),
        Check::new(
            "inverted_flips",
            "fraction of x-up members whose outcome changes when the field is inverted",
            flips,
            Relation::AtLeast,
            0.9,
            "the outcome depends on the apparatus, not only on the spin",
        ),
        Check::new(
            "packet_separation",
            "distance between the spin components at read-out in units of their rms width",
            separation,
            Relation::AtLeast,
            6.0,
            "read-out is taken once the components are well separated",
        ),
    ];

    let mut metrics = BTreeMap::new();
    metrics.insert("up_frequency".into(), up);
    metrics.insert("up_frequency_inverted".into(), up_inverted);
    metrics.insert("up_probability".into(), predicted);

    let (_, _, _, inv_field, _) = &outcome_sets[3];
    let mut table = Table::new("trajectories", &["trajectory_id", "field_sign", "t", "z"]);
    for (field, sign) in [(x_field, 1.0), (inv_field, -1.0)] {
        let fan: Vec<_> = (0..FAN.min(n))
            .into_par_iter()
            .map(|i| integrate_trajectory(field, &x_start.configuration(i), t_read, &opts))
            .collect::<Result<_, _>>()?;
        for (id, traj) in fan.iter().enumerate() {
            for (k, p) in traj.points().enumerate() {
                table.push(vec![id as f64, sign, traj.times()[k], p[0]]);
            }
        }
    }
    Ok(ScenarioRun::new(checks, metrics, vec![table]))
}
