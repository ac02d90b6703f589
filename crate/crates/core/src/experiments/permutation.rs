use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{evolve_spaced, gaussian, Check, ExperimentError, Relation, Scenario, ScenarioRun, Table};
use crate::dynamics::HamiltonianSpec;
use crate::ensembles::sample_born;
use crate::guidance::{integrate_trajectory, permute, GuidanceField, Trajectory, TrajectoryOptions};
use crate::lattice::{Axis, Grid, SpinorField};

const LIMIT: f64 = 1e-8;

/// `φa(x1)φb(x2) + sign·φb(x1)φa(x2)` with packets approaching each other.
pub(super) fn setup(s: &Scenario, sign: f64) -> Result<(SpinorField, HamiltonianSpec), ExperimentError> {
    let axis = Axis::centered(s.param("extent"), s.count("points"));
    let grid = Grid::new(vec![axis, axis])?;
    let (d, k) = (s.param("offset"), s.param("wavenumber"));
    let a = |x: f64| gaussian(x, -d, 1.0, k);
    let b = |x: f64| gaussian(x, d, 1.0, -k);
    let psi = SpinorField::scalar_from_fn(&grid, |q| a(q[0]) * b(q[1]) + b(q[0]) * a(q[1]) * sign)?.normalized()?;
    Ok((psi, HamiltonianSpec::particles(&grid, 2, 1, &[1.0, 1.0])?))
}

fn largest_mismatch(first: &Trajectory, second: &Trajectory) -> f64 {
    if first.len() != second.len() {
        return f64::INFINITY;
    }
    first
        .points()
        .zip(second.points())
        .map(|(p, q)| (p[0] - q[1]).abs().max((p[1] - q[0]).abs()))
        .fold(0.0, f64::max)
}

pub(super) fn run(s: &Scenario, seed: u64) -> Result<ScenarioRun, ExperimentError> {
    let duration = s.param("duration");
    let opts = TrajectoryOptions::new(s.param("rk_dt"));
    let mut checks = Vec::new();
    let mut metrics = BTreeMap::new();
    let mut table = Table::new("trajectory_pairs", &["symmetry", "pair_id", "t", "q1", "q2", "q1_swapped", "q2_swapped"]);
    for (name, sign) in [("symmetric", 1.0), ("antisymmetric", -1.0)] {
        let (psi0, h) = setup(s, sign)?;
        let evolution = evolve_spaced(&psi0, &h, 0.0, duration, s.param("snapshot_spacing"))?;
        let field = GuidanceField::new(&evolution, &h)?;
        let ensemble = sample_born(&psi0, s.ensemble_size, seed)?;
        let pairs: Vec<(Trajectory, Trajectory)> = (0..ensemble.len())
            .into_par_iter()
            .map(|i| {
                let q = ensemble.configuration(i);
                let swapped = permute(&q, &[1, 0], &h)?;
                Ok((integrate_trajectory(&field, &q, duration, &opts)?, integrate_trajectory(&field, &swapped, duration, &opts)?))
            })
            .collect::<Result<_, ExperimentError>>()?;
        let worst = pairs.iter().map(|(a, b)| largest_mismatch(a, b)).fold(0.0, f64::max);
        checks.push(Check::new(
            &format!("{name}_equivariance"),
            "largest difference between the trajectory from swapped initial positions and the swapped trajectory",
            worst,
            Relation::AtMost,
            LIMIT,
            "the guidance flow of a (anti)symmetric state commutes with particle exchange",
        ));
        metrics.insert(format!("{name}_pairs"), pairs.len() as f64);
        for (id, (a, b)) in pairs.iter().enumerate() {
            for k in 0..a.len().min(b.len()) {
                let (p, q) = (a.point(k), b.point(k));
                table.push(vec![sign, id as f64, a.times()[k], p[0], p[1], q[0], q[1]]);
            }
        }
    }
    Ok(ScenarioRun::new(checks, metrics, vec![table]))
}
