use std::collections::BTreeMap;

use super::{evolve_spaced, gaussian, Check, ExperimentError, Relation, Scenario, ScenarioRun, Table};
use crate::dynamics::HamiltonianSpec;
use crate::ensembles::{asymptotic_momentum, sample_born};
use crate::guidance::{GuidanceField, TrajectoryOptions};
use crate::lattice::{Axis, Grid, SpinorField};

const KS_LIMIT: f64 = 0.05;
const QUANTILES: usize = 199;

pub(super) fn setup(s: &Scenario) -> Result<(SpinorField, HamiltonianSpec), ExperimentError> {
    let grid = Grid::new(vec![Axis::centered(s.param("extent"), s.count("points"))])?;
    let (sigma, k) = (s.param("packet_width"), s.param("wavenumber"));
    let psi = SpinorField::scalar_from_fn(&grid, |q| gaussian(q[0], 0.0, sigma, k))?.normalized()?;
    Ok((psi, HamiltonianSpec::free(&grid)))
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    sorted[((p * sorted.len() as f64) as usize).min(sorted.len() - 1)]
}

pub(super) fn run(s: &Scenario, seed: u64) -> Result<ScenarioRun, ExperimentError> {
    let (psi0, h) = setup(s)?;
    let (long, short) = (s.param("horizon"), s.param("short_horizon"));
    let evolution = evolve_spaced(&psi0, &h, 0.0, long, s.param("snapshot_spacing"))?;
    let field = GuidanceField::new(&evolution, &h)?;
    let opts = TrajectoryOptions::new(s.param("rk_dt"));
    let ensemble = sample_born(&psi0, s.ensemble_size, seed)?;
    let mut horizons = vec![short, long];
    horizons.sort_by(f64::total_cmp);
    let reports = asymptotic_momentum(&evolution, &field, &h, &ensemble, &horizons, &opts)?;
    let at = |t: f64| reports.iter().find(|r| r.horizon == t).expect("requested horizon");
    let (r_long, r_short) = (at(long), at(short));
    let (ks_long, ks_short) = (r_long.ks_per_axis[0], r_short.ks_per_axis[0]);

    let checks = vec![
        Check::new(
            "ks_long_horizon",
            "KS distance between m·Q(T)/T and |ψ̂|² at the long horizon",
            ks_long,
            Relation::AtMost,
            KS_LIMIT,
            "asymptotic velocities are distributed like the momentum",
        ),
        Check::new(
            "ks_improves",
            "KS distance at the long horizon minus that at the short horizon",
            ks_long - ks_short,
            Relation::Below,
            0.0,
            "convergence improves with time",
        ),
    ];
    let mut metrics = BTreeMap::new();
    metrics.insert("ks_short_horizon".into(), ks_short);

    let sorted = |v: &[f64]| {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        v
    };
    let (pl, ps) = (sorted(&r_long.momenta), sorted(&r_short.momenta));
    let mut table = Table::new("momentum_quantiles", &["probability", "momentum_long", "momentum_short"]);
    for i in 1..=QUANTILES {
        let p = i as f64 / (QUANTILES + 1) as f64;
        table.push(vec![p, quantile(&pl, p), quantile(&ps, p)]);
    }
    Ok(ScenarioRun::new(checks, metrics, vec![table]))
}
