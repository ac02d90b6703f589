use std::collections::BTreeMap;

use num_complex::Complex64;

use super::{evolve_spaced, gaussian, Check, ExperimentError, Relation, Scenario, ScenarioRun, Table};
use crate::dynamics::HamiltonianSpec;
use crate::ensembles::{distance_report, push_forward, sample_born, BinSpec};
use crate::guidance::{integrate_trajectory, GuidanceField, Trajectory, TrajectoryOptions, VelocityModel};
use crate::lattice::{Axis, Grid, SpinorField};

const TV_LIMIT: f64 = 0.03;
const CONTROL_TV: f64 = 0.1;
const REVERSAL_TOLERANCE: f64 = 1e-5;
const PROMINENCE: f64 = 0.1;

/// Beams start at `x = -k T / 2` so the packet is centred at the screen time.
fn launch_x(s: &Scenario) -> f64 {
    -0.5 * s.param("wavenumber") * s.param("screen_time")
}

/// The slit plane lies four longitudinal widths ahead of the beam centre,
/// so every trajectory crosses it after leaving its aperture.
pub(super) fn slit_plane(s: &Scenario) -> f64 {
    launch_x(s) + 4.0 * s.param("packet_length")
}

pub(super) fn setup(s: &Scenario) -> Result<(SpinorField, HamiltonianSpec), ExperimentError> {
    let grid = Grid::new(vec![
        Axis::centered(s.param("extent_x"), s.count("points_x")),
        Axis::centered(s.param("extent_y"), s.count("points_y")),
    ])?;
    let (xc, sx, k) = (launch_x(s), s.param("packet_length"), s.param("wavenumber"));
    let (half, sy) = (0.5 * s.param("slit_separation"), s.param("beam_width"));
    let both = s.param("mask_slit") == 0.0;
    let psi = SpinorField::scalar_from_fn(&grid, |q| {
        let upper = gaussian(q[1], half, sy, 0.0);
        let lower = if both { gaussian(q[1], -half, sy, 0.0) } else { Complex64::new(0.0, 0.0) };
        gaussian(q[0], xc, sx, k) * (upper + lower)
    })?
    .normalized()?;
    Ok((psi, HamiltonianSpec::free(&grid)))
}

/// Indices of local maxima holding at least `PROMINENCE` of the largest value.
fn local_maxima(v: &[f64]) -> Vec<usize> {
    let top = v.iter().copied().fold(0.0, f64::max);
    (0..v.len())
        .filter(|&i| {
            let left = i == 0 || v[i] > v[i - 1];
            let right = i + 1 == v.len() || v[i] >= v[i + 1];
            left && right && v[i] >= PROMINENCE * top && v[i] > 0.0
        })
        .collect()
}

/// Whether the trajectory fails to cross the slit plane exactly once,
/// forwards, on the side of the axis it started from.
fn slit_violation(traj: &Trajectory, plane: f64) -> bool {
    let mut crossings = Vec::new();
    for i in 1..traj.len() {
        let (a, b) = (traj.point(i - 1), traj.point(i));
        if (a[0] < plane) != (b[0] < plane) {
            crossings.push((b[0] > a[0], 0.5 * (a[1] + b[1])));
        }
    }
    match crossings.as_slice() {
        [(rising, y)] => !rising || *y == 0.0 || (y.signum() != traj.first()[1].signum()),
        _ => true,
    }
}

fn axis_crossings(traj: &Trajectory) -> usize {
    let side = traj.first()[1].signum();
    traj.points().filter(|p| p[1].signum() != side).count()
}

pub(super) fn run(s: &Scenario, seed: u64) -> Result<ScenarioRun, ExperimentError> {
    let (psi0, h) = setup(s)?;
    let t_screen = s.param("screen_time");
    let evolution = evolve_spaced(&psi0, &h, 0.0, t_screen, s.param("snapshot_spacing"))?;
    let field = GuidanceField::new(&evolution, &h)?;
    let opts = TrajectoryOptions::new(s.param("rk_dt"));
    let grid = psi0.grid().clone();
    let screen_density = evolution.last().density();

    let ensemble = sample_born(&psi0, s.ensemble_size, seed)?;
    let arrived = push_forward(&ensemble, &field, t_screen, &opts)?;

    let bins = BinSpec::marginal(1, s.count("screen_bins"));
    let dist = distance_report(&arrived, &screen_density, &bins, t_screen)?;
    let frozen = push_forward(&ensemble, &field, t_screen, &opts.with_model(VelocityModel::Zero))?;
    let control = distance_report(&frozen, &screen_density, &bins, t_screen)?;
    let along_x = distance_report(&arrived, &screen_density, &BinSpec::marginal(0, s.count("screen_bins")), t_screen)?;

    let fan_size = s.count("fan_size").min(ensemble.len());
    let fan: Vec<Trajectory> = {
        use rayon::prelude::*;
        (0..fan_size)
            .into_par_iter()
            .map(|i| integrate_trajectory(&field, &ensemble.configuration(i), t_screen, &opts))
            .collect::<Result<_, _>>()?
    };
    let plane = slit_plane(s);
    let slit_failures = fan.iter().filter(|t| slit_violation(t, plane)).count();
    let endpoint_crossings = ensemble.members().zip(arrived.members()).filter(|(a, b)| a[1].signum() != b[1].signum()).count();
    let fan_crossings: usize = fan.iter().map(axis_crossings).sum();

    let hist = bins.frequencies(&arrived)?;
    let probs = bins.probabilities(&screen_density)?;
    let (hist_max, dens_max) = (local_maxima(&hist), local_maxima(&probs));
    let ax = grid.axis(1);
    let per_bin = ax.points / bins.bins[0];
    let centre = |j: usize| ax.coord(j * per_bin) + 0.5 * (per_bin as f64 - 1.0) * ax.spacing();
    let matched: Vec<bool> = dens_max.iter().map(|&j| hist_max.iter().any(|&i| i.abs_diff(j) <= 1)).collect();
    let central = dens_max
        .iter()
        .zip(&matched)
        .min_by(|a, b| centre(*a.0).abs().total_cmp(&centre(*b.0).abs()))
        .map(|(_, &m)| m)
        .unwrap_or(false);
    let matched_count = if central { matched.iter().filter(|&&m| m).count() } else { 0 };

    let reversal_n = s.count("reversal_members").min(arrived.len());
    let reversed_field = GuidanceField::new(&evolution.conjugate_reversed(), &h)?;
    let returned = push_forward(&arrived.truncated(reversal_n), &reversed_field, t_screen, &opts)?;
    let reversal_error = ensemble
        .truncated(reversal_n)
        .members()
        .zip(returned.members())
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);

    let checks = vec![
        Check::new(
            "one_slit_each",
            "fan trajectories not crossing the slit plane exactly once, forwards, on their own side",
            slit_failures as f64,
            Relation::AtMost,
            0.0,
            "every trajectory passes through exactly one slit",
        ),
        Check::new(
            "no_axis_crossing",
            "crossings of the symmetry axis y = 0 (fan records and ensemble endpoints)",
            (endpoint_crossings + fan_crossings) as f64,
            Relation::AtMost,
            0.0,
            "trajectories cannot cross the node-free symmetry axis of a symmetric state",
        ),
        Check::new(
            "fringe_maxima",
            "screen-histogram maxima matching |ψ|² maxima within one bin, central maximum required",
            matched_count as f64,
            Relation::AtLeast,
            3.0,
            "arrivals concentrate where |ψ|² is large",
        ),
        Check::new(
            "equivariance_tv",
            "total variation between arrivals and |ψ|² across the screen",
            dist.total_variation,
            Relation::AtMost,
            TV_LIMIT,
            "fixed acceptance limit at n = 10⁴",
        ),
        Check::new(
            "equivariance_bound",
            "total variation against three times the expected multinomial fluctuation",
            dist.total_variation,
            Relation::AtMost,
            dist.tv_bound,
            "multinomial sampling noise",
        ),
        Check::new(
            "zero_velocity_control",
            "total variation when the velocity field is replaced by zero",
            control.total_variation,
            Relation::Above,
            CONTROL_TV,
            "negative control: without guidance the ensemble cannot follow |ψ|²",
        ),
        Check::new(
            "time_reversal",
            "largest coordinate error after transporting arrivals back along the conjugated history",
            reversal_error,
            Relation::AtMost,
            REVERSAL_TOLERANCE,
            "time-reversal invariance, limited by the integration error",
        ),
    ];

    let mut metrics = BTreeMap::new();
    metrics.insert("tv_bound".into(), dist.tv_bound);
    metrics.insert("tv_along_x".into(), along_x.total_variation);
    metrics.insert("tv_along_x_bound".into(), along_x.tv_bound);
    metrics.insert("density_maxima".into(), dens_max.len() as f64);
    metrics.insert("histogram_maxima".into(), hist_max.len() as f64);
    metrics.insert("slit_plane".into(), plane);
    metrics.insert("final_norm".into(), evolution.last().norm());

    let mut fan_table = Table::new("fan", &["trajectory_id", "t", "x", "y"]);
    for (id, traj) in fan.iter().enumerate() {
        for (i, p) in traj.points().enumerate() {
            fan_table.push(vec![id as f64, traj.times()[i], p[0], p[1]]);
        }
    }
    let mut screen = Table::new("screen_histogram", &["bin", "y", "density_probability", "arrival_frequency"]);
    for j in 0..probs.len() {
        screen.push(vec![j as f64, centre(j), probs[j], hist[j]]);
    }
    let mut fringes = Table::new("fringe_maxima", &["bin", "y", "density_probability", "matched"]);
    for (&j, &m) in dens_max.iter().zip(&matched) {
        fringes.push(vec![j as f64, centre(j), probs[j], if m { 1.0 } else { 0.0 }]);
    }
    let mut profile = Table::new("screen_density", &["y", "density"]);
    let marginal = screen_density.marginal_masses(1);
    for (j, m) in marginal.iter().enumerate() {
        profile.push(vec![ax.coord(j), m / ax.spacing()]);
    }

    Ok(ScenarioRun::new(checks, metrics, vec![fan_table, screen, fringes, profile]))
}
