//! Named scenarios reproducing the classic pilot-wave experiments, each with
//! pass/fail checks, plus outcome bookkeeping with POVMs.
//!
//! Every scenario is fully determined by its name, its numeric parameters
//! and a seed. All defaults live in [`registry`].

use std::collections::BTreeMap;
use std::io::{self, Write};

use num_complex::Complex64;
use serde::Serialize;
use thiserror::Error;

use crate::dynamics::{evolve_from, DynamicsError, HamiltonianSpec, PropagatorConfig, WaveEvolution};
use crate::ensembles::EnsembleError;
use crate::guidance::GuidanceError;
use crate::lattice::{LatticeError, SpinorField};

mod classical;
mod custom;
mod double_slit;
mod epr;
mod exchange;
mod momentum;
mod permutation;
mod pointer;
pub mod povm;
mod stern_gerlach;

pub use custom::{run_custom, CustomSpec};
pub use pointer::{pointer_state, PointerModel};
pub use povm::{observable_from_povm, povm_distribution, povm_probability, PovmError, PovmTable};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExperimentError {
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("scenario `{scenario}` has no parameter `{key}`")]
    UnknownParameter { scenario: String, key: String },
    #[error("parameter `{key}` = {value} is outside [{min}, {max}]")]
    OutOfRange { key: String, value: f64, min: f64, max: f64 },
    #[error("parameter `{key}` must be an integer, got {value}")]
    NotInteger { key: String, value: f64 },
    #[error("ensemble size must be at least 1")]
    EmptyEnsemble,
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Povm(#[from] PovmError),
}

impl ExperimentError {
    /// Whether the failure is a numerical fault (non-finite values) rather
    /// than a bad request.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            ExperimentError::Dynamics(DynamicsError::NonFinite { .. }) | ExperimentError::Lattice(LatticeError::ZeroNorm)
        )
    }
}

/// One numeric knob of a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParamSpec {
    pub name: &'static str,
    pub default: f64,
    pub min: f64,
    pub max: f64,
    pub integer: bool,
    pub doc: &'static str,
}

const fn real(name: &'static str, default: f64, min: f64, max: f64, doc: &'static str) -> ParamSpec {
    ParamSpec { name, default, min, max, integer: false, doc }
}

const fn int(name: &'static str, default: f64, min: f64, max: f64, doc: &'static str) -> ParamSpec {
    ParamSpec { name, default, min, max, integer: true, doc }
}

/// Registry entry: name, description, defaults and the checks it runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScenarioInfo {
    pub name: &'static str,
    pub summary: &'static str,
    pub default_ensemble: usize,
    pub params: &'static [ParamSpec],
    pub checks: &'static [&'static str],
}

static REGISTRY: [ScenarioInfo; 8] = [
    ScenarioInfo {
        name: "double_slit",
        summary: "two coherent Gaussian beams leaving a pair of slits; trajectory fan, fringes and equivariance",
        default_ensemble: 10_000,
        params: &[
            real("slit_separation", 5.0, 1.0, 12.0, "distance between the beam centres (units of x)"),
            real("beam_width", 0.5, 0.2, 2.0, "transverse width σ_y of each beam"),
            real("packet_length", 1.0, 0.5, 3.0, "longitudinal width σ_x"),
            real("wavenumber", 4.0, 1.0, 6.0, "mean longitudinal wavenumber k_x"),
            real("screen_time", 5.0, 1.0, 8.0, "time of arrival at the screen"),
            real("extent_x", 52.0, 20.0, 200.0, "grid extent along x"),
            real("extent_y", 64.0, 20.0, 200.0, "grid extent along y"),
            int("points_x", 128.0, 16.0, 1024.0, "lattice points along x"),
            int("points_y", 256.0, 16.0, 1024.0, "lattice points along y"),
            real("snapshot_spacing", 0.05, 0.005, 0.5, "time between stored wave-function snapshots"),
            real("rk_dt", 0.01, 1e-4, 0.1, "largest trajectory integration step"),
            int("fan_size", 80.0, 1.0, 1000.0, "trajectories written to the fan table"),
            int("screen_bins", 32.0, 4.0, 256.0, "coarse bins across the screen"),
            int("reversal_members", 100.0, 1.0, 10_000.0, "members used for the round-trip reversal check"),
            int("mask_slit", 0.0, 0.0, 1.0, "1 blocks the lower slit"),
        ],
        checks: &[
            "one_slit_each",
            "no_axis_crossing",
            "fringe_maxima",
            "equivariance_tv",
            "equivariance_bound",
            "zero_velocity_control",
            "time_reversal",
        ],
    },
    ScenarioInfo {
        name: "packet_exchange",
        summary: "two packets exchanging places; trajectories cannot cross so they turn around",
        default_ensemble: 1000,
        params: &[
            real("c1_weight", 0.5, 0.05, 0.95, "|c1|², the weight of the left packet"),
            real("separation", 10.0, 6.0, 20.0, "initial distance between the packets"),
            real("packet_width", 1.0, 0.5, 2.0, "width σ of each packet"),
            real("extent", 40.0, 30.0, 200.0, "grid extent"),
            int("points", 256.0, 64.0, 4096.0, "lattice points"),
            real("snapshot_spacing", 0.005, 0.001, 0.05, "time between stored snapshots"),
            real("rk_dt", 0.005, 1e-4, 0.05, "nominal trajectory integration step"),
            real("tolerance", 1e-7, 1e-12, 1e-3, "local error tolerance of the adaptive integrator"),
            int("records", 101.0, 2.0, 10_000.0, "record times used for the ordering check"),
        ],
        checks: &["order_preserved", "left_stays_left", "statistics_agree", "members_disagree"],
    },
    ScenarioInfo {
        name: "stern_gerlach",
        summary: "spin-½ packet in a field gradient, with the inverted-field variant",
        default_ensemble: 10_000,
        params: &[
            real("up_weight", 0.3, 0.0, 1.0, "|c↑|² for the statistics run"),
            real("strength", 4.0, 0.5, 10.0, "field gradient μb"),
            real("coupling_time", 1.0, 0.1, 3.0, "duration τ of the coupling"),
            real("readout_time", 5.0, 1.0, 10.0, "time of the sign read-out"),
            real("packet_width", 1.0, 0.5, 3.0, "packet width σ"),
            real("extent", 80.0, 20.0, 400.0, "grid extent"),
            int("points", 256.0, 64.0, 4096.0, "lattice points"),
            real("snapshot_spacing", 0.05, 0.005, 0.5, "time between stored snapshots"),
            real("rk_dt", 0.025, 1e-4, 0.1, "largest trajectory integration step"),
        ],
        checks: &["up_fraction", "inverted_statistics", "upper_half_up", "inverted_flips", "packet_separation"],
    },
    ScenarioInfo {
        name: "pointer_measurement",
        summary: "ideal measurement with a pointer; outcome statistics, conditional wave function and branch overlap",
        default_ensemble: 10_000,
        params: &[
            real("c1_weight", 0.3, 0.0, 1.0, "|c1|², the weight of the ground state"),
            real("displacement", 4.0, 1.0, 10.0, "pointer shift Δ per outcome"),
            real("pointer_width", 0.5, 0.1, 2.0, "pointer packet width"),
            real("pointer_mass", 10.0, 1.0, 1000.0, "pointer mass"),
            real("omega", 1.0, 0.2, 5.0, "system oscillator frequency"),
            real("settle_time", 1.0, 0.1, 5.0, "free evolution after the coupling"),
            real("extent_x", 16.0, 8.0, 64.0, "system grid extent"),
            real("extent_y", 32.0, 8.0, 128.0, "pointer grid extent"),
            int("points_x", 64.0, 16.0, 512.0, "system lattice points"),
            int("points_y", 128.0, 16.0, 1024.0, "pointer lattice points"),
            real("snapshot_spacing", 0.02, 0.001, 0.5, "time between stored snapshots after the coupling"),
            real("rk_dt", 0.005, 1e-4, 0.1, "largest trajectory integration step"),
        ],
        checks: &["outcome_frequency", "conditional_fidelity", "branch_overlap", "linearity"],
    },
    ScenarioInfo {
        name: "epr_nonlocality",
        summary: "velocity of particle 1 depends on where particle 2 is",
        default_ensemble: 1,
        params: &[
            real("q1", 0.3, -4.0, 4.0, "position of particle 1"),
            real("q2", 2.5, -8.0, 8.0, "first position of particle 2"),
            real("q2_alt", -2.5, -8.0, 8.0, "second position of particle 2"),
            real("wavenumber", 2.0, 0.1, 5.0, "opposite momenta ±k of the particle-1 packets"),
            real("offset", 3.0, 1.0, 6.0, "particle-2 packets sit at ±offset"),
            real("extent", 24.0, 16.0, 64.0, "grid extent per axis"),
            int("points", 256.0, 32.0, 1024.0, "lattice points per axis"),
        ],
        checks: &["entangled_dependence", "oracle_agreement", "product_independence"],
    },
    ScenarioInfo {
        name: "asymptotic_momentum",
        summary: "m·Q(T)/T approaches the momentum distribution",
        default_ensemble: 10_000,
        params: &[
            real("horizon", 50.0, 5.0, 200.0, "long horizon T"),
            real("short_horizon", 5.0, 0.5, 50.0, "short horizon for comparison"),
            real("packet_width", 1.0, 0.5, 3.0, "initial width σ0"),
            real("wavenumber", 0.0, -2.0, 2.0, "mean wavenumber"),
            real("extent", 320.0, 100.0, 2000.0, "grid extent"),
            int("points", 1024.0, 256.0, 16_384.0, "lattice points"),
            real("snapshot_spacing", 0.1, 0.01, 1.0, "time between stored snapshots"),
            real("rk_dt", 0.1, 1e-3, 1.0, "largest trajectory integration step"),
        ],
        checks: &["ks_long_horizon", "ks_improves"],
    },
    ScenarioInfo {
        name: "classical_limit",
        summary: "narrow packet in a harmonic well follows Newton's orbit",
        default_ensemble: 1000,
        params: &[
            real("amplitude", 4.0, 0.5, 6.0, "initial displacement x0"),
            real("omega", 1.0, 0.2, 5.0, "trap frequency"),
            real("width_fraction", 0.05, 0.01, 0.1, "packet width as a fraction of the extent"),
            real("extent", 24.0, 12.0, 100.0, "grid extent"),
            int("points", 128.0, 64.0, 2048.0, "lattice points"),
            real("snapshot_spacing", 0.02, 0.001, 0.2, "time between stored snapshots"),
            real("rk_dt", 0.01, 1e-4, 0.1, "largest trajectory integration step"),
        ],
        checks: &["centre_tracks_orbit", "mean_tracks_orbit"],
    },
    ScenarioInfo {
        name: "permutation_symmetry",
        summary: "identical particles: permuted initial positions give permuted trajectories",
        default_ensemble: 8,
        params: &[
            real("offset", 2.0, 0.5, 5.0, "packets start at ±offset"),
            real("wavenumber", 1.0, 0.0, 4.0, "packets move towards each other with ±k"),
            real("duration", 2.0, 0.1, 5.0, "integration time"),
            real("extent", 20.0, 12.0, 64.0, "grid extent per particle"),
            int("points", 128.0, 32.0, 512.0, "lattice points per particle"),
            real("snapshot_spacing", 0.02, 0.001, 0.2, "time between stored snapshots"),
            real("rk_dt", 0.005, 1e-4, 0.1, "largest trajectory integration step"),
        ],
        checks: &["symmetric_equivariance", "antisymmetric_equivariance"],
    },
];

/// Every built-in scenario with its defaults.
pub fn registry() -> &'static [ScenarioInfo] {
    &REGISTRY
}

pub fn scenario_info(name: &str) -> Option<&'static ScenarioInfo> {
    REGISTRY.iter().find(|s| s.name == name)
}

/// A scenario with validated parameters.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub name: &'static str,
    pub params: BTreeMap<String, f64>,
    pub ensemble_size: usize,
}

/// Looks up `name` and applies `overrides` on top of the defaults.
pub fn build_scenario(name: &str, overrides: &BTreeMap<String, f64>) -> Result<Scenario, ExperimentError> {
    let info = scenario_info(name).ok_or_else(|| ExperimentError::UnknownScenario(name.to_string()))?;
    let mut params: BTreeMap<String, f64> = info.params.iter().map(|p| (p.name.to_string(), p.default)).collect();
    for (key, &value) in overrides {
        let spec = info
            .params
            .iter()
            .find(|p| p.name == key)
            .ok_or_else(|| ExperimentError::UnknownParameter { scenario: name.to_string(), key: key.clone() })?;
        validate_param(spec, value)?;
        params.insert(key.clone(), value);
    }
    Ok(Scenario { name: info.name, params, ensemble_size: info.default_ensemble })
}

fn validate_param(spec: &ParamSpec, value: f64) -> Result<(), ExperimentError> {
    if !(value >= spec.min && value <= spec.max) {
        return Err(ExperimentError::OutOfRange { key: spec.name.to_string(), value, min: spec.min, max: spec.max });
    }
    if spec.integer && value.fract() != 0.0 {
        return Err(ExperimentError::NotInteger { key: spec.name.to_string(), value });
    }
    Ok(())
}

impl Scenario {
    pub fn info(&self) -> &'static ScenarioInfo {
        scenario_info(self.name).expect("scenarios are built from the registry")
    }

    pub fn with_ensemble_size(mut self, n: usize) -> Result<Self, ExperimentError> {
        if n == 0 {
            return Err(ExperimentError::EmptyEnsemble);
        }
        self.ensemble_size = n;
        Ok(self)
    }

    pub fn param(&self, key: &str) -> f64 {
        self.params[key]
    }

    fn count(&self, key: &str) -> usize {
        self.params[key] as usize
    }

    /// Initial wave function and Hamiltonian of the scenario's main run.
    pub fn initial_state(&self) -> Result<(SpinorField, HamiltonianSpec), ExperimentError> {
        match self.name {
            "double_slit" => double_slit::setup(self),
            "packet_exchange" => exchange::setup(self),
            "stern_gerlach" => stern_gerlach::setup(self, self.param("up_weight"), 1.0),
            "pointer_measurement" => pointer::setup(self).map(|(psi, h, _)| (psi, h)),
            "epr_nonlocality" => epr::setup(self, true),
            "asymptotic_momentum" => momentum::setup(self),
            "classical_limit" => classical::setup(self),
            "permutation_symmetry" => permutation::setup(self, 1.0),
            other => Err(ExperimentError::UnknownScenario(other.to_string())),
        }
    }
}

/// Runs a scenario with the given seed.
pub fn run_scenario(scenario: &Scenario, seed: u64) -> Result<ScenarioRun, ExperimentError> {
    let mut run = match scenario.name {
        "double_slit" => double_slit::run(scenario, seed),
        "packet_exchange" => exchange::run(scenario, seed),
        "stern_gerlach" => stern_gerlach::run(scenario, seed),
        "pointer_measurement" => pointer::run(scenario, seed),
        "epr_nonlocality" => epr::run(scenario),
        "asymptotic_momentum" => momentum::run(scenario, seed),
        "classical_limit" => classical::run(scenario, seed),
        "permutation_symmetry" => permutation::run(scenario, seed),
        other => Err(ExperimentError::UnknownScenario(other.to_string())),
    }?;
    run.report.scenario = scenario.name.to_string();
    run.report.seed = seed;
    run.report.ensemble_size = scenario.ensemble_size;
    run.report.params = scenario.params.clone();
    Ok(run)
}

/// How a measured value is compared with its bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    AtMost,
    Below,
    AtLeast,
    Above,
}

impl Relation {
    pub fn holds(self, measured: f64, bound: f64) -> bool {
        match self {
            Relation::AtMost => measured <= bound,
            Relation::Below => measured < bound,
            Relation::AtLeast => measured >= bound,
            Relation::Above => measured > bound,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Relation::AtMost => "<=",
            Relation::Below => "<",
            Relation::AtLeast => ">=",
            Relation::Above => ">",
        }
    }
}

/// One pass/fail comparison in a report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub description: String,
    pub measured: f64,
    pub relation: Relation,
    pub bound: f64,
    /// Where the bound comes from.
    pub basis: String,
    pub passed: bool,
}

impl Check {
    pub fn new(name: &str, description: &str, measured: f64, relation: Relation, bound: f64, basis: &str) -> Self {
        Self {
            name: name.to_string(),
            description: description.to_string(),
            measured,
            relation,
            bound,
            basis: basis.to_string(),
            passed: measured.is_finite() && relation.holds(measured, bound),
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: {} {} {} ({})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.relation.symbol(),
            self.bound,
            self.description
        )
    }
}

/// Outcome of one scenario run.
#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct Report {
    pub scenario: String,
    pub seed: u64,
    pub ensemble_size: usize,
    pub params: BTreeMap<String, f64>,
    pub checks: Vec<Check>,
    /// Additional measured quantities that are not checked.
    pub metrics: BTreeMap<String, f64>,
}

impl Report {
    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// Whether any check or metric is not finite.
    pub fn has_non_finite(&self) -> bool {
        self.checks.iter().any(|c| !c.measured.is_finite()) || self.metrics.values().any(|v| !v.is_finite())
    }
}

/// Columnar numeric data for plotting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Self { name: name.to_string(), columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{}", self.columns.join(","))?;
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Report plus plot tables.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioRun {
    pub report: Report,
    pub tables: Vec<Table>,
}

impl ScenarioRun {
    fn new(checks: Vec<Check>, metrics: BTreeMap<String, f64>, tables: Vec<Table>) -> Self {
        Self { report: Report { checks, metrics, ..Report::default() }, tables }
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }
}

/// Normalized Gaussian `(2πσ²)^{-1/4} exp(-(x-x0)²/4σ² + ikx)`.
pub fn gaussian(x: f64, x0: f64, sigma: f64, k: f64) -> Complex64 {
    let norm = (2.0 * std::f64::consts::PI * sigma * sigma).powf(-0.25);
    let d = x - x0;
    Complex64::from_polar(norm * (-d * d / (4.0 * sigma * sigma)).exp(), k * x)
}

/// Evolves with snapshots every `spacing`, stepping at most 0.2 × the
/// kinetic phase bound.
pub fn evolve_spaced(
    psi0: &SpinorField,
    h: &HamiltonianSpec,
    t_start: f64,
    duration: f64,
    spacing: f64,
) -> Result<WaveEvolution, ExperimentError> {
    let max_dt = 0.2 * h.kinetic_phase_bound(psi0.grid())?;
    let stride = (spacing / max_dt).ceil().max(1.0) as usize;
    let cfg = PropagatorConfig::with_dt(spacing / stride as f64, stride);
    Ok(evolve_from(psi0, h, t_start, duration, &cfg)?)
}

/// Binomial standard deviation of a frequency.
pub fn binomial_sigma(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}
