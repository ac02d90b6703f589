use std::collections::BTreeMap;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{evolve_spaced, gaussian, Check, ExperimentError, Relation, ScenarioRun, Table};
use crate::dynamics::{HamiltonianSpec, PotentialSpec};
use crate::ensembles::{distance_report, push_forward, sample_born, BinSpec};
use crate::guidance::{GuidanceField, TrajectoryOptions};
use crate::lattice::{Axis, Grid, SpinorField};

const NORM_LIMIT: f64 = 1e-10;

fn free() -> String {
    "free".into()
}
fn one() -> f64 {
    1.0
}
fn spacing() -> f64 {
    0.05
}
fn rk() -> f64 {
    0.01
}

/// A Gaussian on a user-defined grid, evolved in a built-in potential.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomSpec {
    pub extent: Vec<f64>,
    pub points: Vec<usize>,
    /// Per-axis periodicity; periodic when omitted.
    #[serde(default)]
    pub periodic: Option<Vec<bool>>,
    pub center: Vec<f64>,
    pub width: Vec<f64>,
    #[serde(default)]
    pub wavenumber: Option<Vec<f64>>,
    /// Potential in the syntax of [`PotentialSpec`], e.g. `harmonic(1.0)`.
    #[serde(default = "free")]
    pub potential: String,
    pub duration: f64,
    #[serde(default = "spacing")]
    pub snapshot_spacing: f64,
    #[serde(default = "rk")]
    pub rk_dt: f64,
    #[serde(default = "one")]
    pub hbar: f64,
    #[serde(default = "one")]
    pub mass: f64,
    /// Bins per axis for the equivariance check; the grid default when omitted.
    #[serde(default)]
    pub bins: Option<usize>,
}

impl CustomSpec {
    /// Checks ranges, naming the offending key.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let nd = self.extent.len();
        let bad = |key: &str, value: f64, min: f64, max: f64| Err(ExperimentError::OutOfRange { key: key.to_string(), value, min, max });
        if !(1..=3).contains(&nd) {
            return bad("extent", nd as f64, 1.0, 3.0);
        }
        let lengths = [
            ("points", self.points.len()),
            ("center", self.center.len()),
            ("width", self.width.len()),
            ("periodic", self.periodic.as_ref().map_or(nd, Vec::len)),
            ("wavenumber", self.wavenumber.as_ref().map_or(nd, Vec::len)),
        ];
        for (key, len) in lengths {
            if len != nd {
                return bad(key, len as f64, nd as f64, nd as f64);
            }
        }
        for &w in &self.width {
            if !(w > 0.0 && w.is_finite()) {
                return bad("width", w, f64::MIN_POSITIVE, f64::MAX);
            }
        }
        for (key, v) in [("duration", self.duration), ("snapshot_spacing", self.snapshot_spacing), ("rk_dt", self.rk_dt), ("hbar", self.hbar), ("mass", self.mass)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(key, v, f64::MIN_POSITIVE, f64::MAX);
            }
        }
        if self.bins == Some(0) {
            return bad("bins", 0.0, 1.0, f64::MAX);
        }
        self.potential.parse::<PotentialSpec>()?;
        Ok(())
    }

    pub fn setup(&self) -> Result<(SpinorField, HamiltonianSpec), ExperimentError> {
        self.validate()?;
        let nd = self.extent.len();
        let axes = (0..nd)
            .map(|a| {
                let periodic = self.periodic.as_ref().is_none_or(|p| p[a]);
                Axis::centered(self.extent[a], self.points[a]).with_periodic(periodic)
            })
            .collect();
        let grid = Grid::new(axes)?;
        let k = self.wavenumber.clone().unwrap_or_else(|| vec![0.0; nd]);
        let psi = SpinorField::scalar_from_fn(&grid, |q| {
            (0..nd).map(|a| gaussian(q[a], self.center[a], self.width[a], k[a])).product::<Complex64>()
        })?
        .normalized()?;
        let h = HamiltonianSpec::free(&grid).with_hbar(self.hbar).with_mass(self.mass);
        let h = self.potential.parse::<PotentialSpec>()?.apply(&grid, 1, h)?;
        Ok((psi, h))
    }
}

/// Evolves the custom state and checks norm conservation and equivariance.
pub fn run_custom(spec: &CustomSpec, n: usize, seed: u64) -> Result<ScenarioRun, ExperimentError> {
    if n == 0 {
        return Err(ExperimentError::EmptyEnsemble);
    }
    let (psi0, h) = spec.setup()?;
    let evolution = evolve_spaced(&psi0, &h, 0.0, spec.duration, spec.snapshot_spacing)?;
    let field = GuidanceField::new(&evolution, &h)?;
    let opts = TrajectoryOptions::new(spec.rk_dt);
    let ensemble = sample_born(&psi0, n, seed)?;
    let moved = push_forward(&ensemble, &field, spec.duration, &opts)?;
    let grid = psi0.grid();
    let bins = match spec.bins {
        Some(b) => BinSpec { axes: (0..grid.ndim()).collect(), bins: vec![b; grid.ndim()] },
        None => BinSpec::default_for(grid),
    };
    let density = evolution.last().density();
    let dist = distance_report(&moved, &density, &bins, spec.duration)?;
    let norm_drift = (evolution.last().norm() - 1.0).abs();

    let checks = vec![
        Check::new("norm_conservation", "|‖ψ(T)‖ − 1|", norm_drift, Relation::Below, NORM_LIMIT, "unitary propagation"),
        Check::new(
            "equivariance_bound",
            "total variation between the transported ensemble and |ψ(T)|²",
            dist.total_variation,
            Relation::AtMost,
            dist.tv_bound,
            "three times the expected multinomial fluctuation",
        ),
    ];
    let mut metrics = BTreeMap::new();
    for (a, ks) in dist.ks_per_axis.iter().enumerate() {
        metrics.insert(format!("ks_axis_{}", a + 1), *ks);
    }
    let mut table = Table::new("marginal_axis_1", &["x", "density", "ensemble_density"]);
    let ax = grid.axis(0);
    let marginal = density.marginal_masses(0);
    let mut counts = vec![0.0; ax.points];
    for q in moved.members() {
        let i = (((q[0] - ax.origin) / ax.spacing() + 0.5).floor() as i64).rem_euclid(ax.points as i64) as usize;
        counts[i] += 1.0;
    }
    for (i, m) in marginal.iter().enumerate() {
        table.push(vec![ax.coord(i), m / ax.spacing(), counts[i] / (n as f64 * ax.spacing())]);
    }
    Ok(ScenarioRun::new(checks, metrics, vec![table]))
}
