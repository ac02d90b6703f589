use std::collections::BTreeMap;

use nalgebra::DVector;
use num_complex::Complex64;

use super::{binomial_sigma, evolve_spaced, gaussian, Check, ExperimentError, PovmTable, Relation, Scenario, ScenarioRun, Table};
use crate::dynamics::HamiltonianSpec;
use crate::ensembles::{sample_born, transport};
use crate::guidance::{GuidanceField, TrajectoryOptions};
use crate::lattice::{Axis, Grid, SpinorField};

/// Time for the packets to exchange places.
const EXCHANGE_TIME: f64 = 1.0;
const TRAJECTORY_ROWS: usize = 100;

fn amplitudes(s: &Scenario) -> (f64, f64) {
    let w = s.param("c1_weight");
    (w.sqrt(), (1.0 - w).sqrt())
}

pub(super) fn setup(s: &Scenario) -> Result<(SpinorField, HamiltonianSpec), ExperimentError> {
    let grid = Grid::new(vec![Axis::centered(s.param("extent"), s.count("points"))])?;
    let half = 0.5 * s.param("separation");
    let k = s.param("separation") / EXCHANGE_TIME;
    let sigma = s.param("packet_width");
    let (c1, c2) = amplitudes(s);
    let psi = SpinorField::scalar_from_fn(&grid, |q| {
        gaussian(q[0], -half, sigma, k) * c1 + gaussian(q[0], half, sigma, -k) * c2
    })?
    .normalized()?;
    Ok((psi, HamiltonianSpec::free(&grid)))
}

pub(super) fn run(s: &Scenario, seed: u64) -> Result<ScenarioRun, ExperimentError> {
    let (psi0, h) = setup(s)?;
    let evolution = evolve_spaced(&psi0, &h, 0.0, EXCHANGE_TIME, s.param("snapshot_spacing"))?;
    let field = GuidanceField::new(&evolution, &h)?;
    let opts = TrajectoryOptions::new(s.param("rk_dt")).with_tolerance(s.param("tolerance"));
    let records = s.count("records");
    let times: Vec<f64> = (0..records).map(|i| EXCHANGE_TIME * i as f64 / (records - 1) as f64).collect();

    let ensemble = sample_born(&psi0, s.ensemble_size, seed)?;
    let moved = transport(&ensemble, &field, &times, &opts)?;
    let n = ensemble.len();

    let start = ensemble.axis_values(0);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| start[a].total_cmp(&start[b]));
    let inversions: usize = moved
        .iter()
        .map(|e| {
            let x = e.axis_values(0);
            order.windows(2).filter(|p| x[p[0]] >= x[p[1]]).count()
        })
        .sum();

    let end = moved.last().expect("at least two records").axis_values(0);
    // experiment (i): which packet holds the particle at t = 0
    let first: Vec<bool> = start.iter().map(|&x| x < 0.0).collect();
    // experiment (ii): where it is after the exchange, with the packet labels swapped
    let second: Vec<bool> = end.iter().map(|&x| x > 0.0).collect();
    let freq = |v: &[bool]| v.iter().filter(|&&b| b).count() as f64 / n as f64;
    let (p_first, p_second) = (freq(&first), freq(&second));
    let (c1, c2) = amplitudes(s);
    let branch_state = DVector::from_vec(vec![Complex64::new(c1, 0.0), Complex64::new(c2, 0.0)]);
    let predicted = super::povm_probability(&branch_state, &PovmTable::coarse_position(-0.5 * s.param("separation"), 0.5 * s.param("separation")), "x1")?;
    let sigma = binomial_sigma(predicted, n);
    let disagree = first.iter().zip(&second).filter(|(a, b)| a != b).count() as f64 / n as f64;

    let left: Vec<usize> = (0..n).filter(|&i| first[i]).collect();
    let stayed = left.iter().filter(|&&i| end[i] < 0.0).count() as f64 / left.len().max(1) as f64;
    let w = s.param("c1_weight");
    let expected_stay = ((1.0 - w) / w).min(1.0);
    let stay_bound = expected_stay - 3.0 * binomial_sigma(expected_stay, left.len().max(1));

    let checks = vec![
        Check::new(
            "order_preserved",
            "adjacent order inversions summed over all record times",
            inversions as f64,
            Relation::AtMost,
            0.0,
            "trajectories of a first-order flow on a line cannot cross",
        ),
        Check::new(
            "left_stays_left",
            "fraction of members starting in the left packet that end on the left",
            stayed,
            Relation::AtLeast,
            stay_bound,
            "order preservation fixes which members end left",
        ),
        Check::new(
            "statistics_agree",
            "largest deviation of either experiment's x1 frequency from ⟨ψ|F(x1)|ψ⟩",
            (p_first - predicted).abs().max((p_second - predicted).abs()),
            Relation::AtMost,
            3.0 * sigma,
            "three binomial standard deviations",
        ),
        Check::new(
            "members_disagree",
            "fraction of members whose outcomes differ between the two experiments",
            disagree,
            Relation::Above,
            0.0,
            "the outcome need not reveal the initial position",
        ),
    ];

    let mut metrics = BTreeMap::new();
    metrics.insert("x1_frequency_initial".into(), p_first);
    metrics.insert("x1_frequency_exchanged".into(), p_second);
    metrics.insert("x1_probability".into(), predicted);

    let mut table = Table::new("trajectories", &["trajectory_id", "t", "x"]);
    for id in 0..n.min(TRAJECTORY_ROWS) {
        for (e, &t) in moved.iter().zip(&times) {
            table.push(vec![id as f64, t, e.member(id)[0]]);
        }
    }
    Ok(ScenarioRun::new(checks, metrics, vec![table]))
}
