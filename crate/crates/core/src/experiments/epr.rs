use std::collections::BTreeMap;

use num_complex::Complex64;

use super::{gaussian, Check, ExperimentError, Relation, Scenario, ScenarioRun, Table};
use crate::dynamics::HamiltonianSpec;
use crate::guidance::{velocity, Configuration, NodeGuard};
use crate::lattice::{Axis, Grid, SpinorField};

const DEPENDENCE_LIMIT: f64 = 0.01;
const PRODUCT_LIMIT: f64 = 1e-12;
const ORACLE_LIMIT: f64 = 1e-4;
const PROFILE_POINTS: usize = 121;

struct Packets {
    k: f64,
    offset: f64,
}

impl Packets {
    fn new(s: &Scenario) -> Self {
        Self { k: s.param("wavenumber"), offset: s.param("offset") }
    }

    /// ψ and ∂ψ/∂x1 of the entangled or product state, in closed form.
    fn value(&self, x1: f64, x2: f64, entangled: bool) -> (Complex64, Complex64) {
        let a = gaussian(x1, 0.0, 1.0, self.k);
        let a_alt = gaussian(x1, 0.0, 1.0, -self.k);
        let da = a * Complex64::new(-0.5 * x1, self.k);
        let da_alt = a_alt * Complex64::new(-0.5 * x1, -self.k);
        let b = gaussian(x2, self.offset, 1.0, 0.0);
        let b_alt = gaussian(x2, -self.offset, 1.0, 0.0);
        if entangled {
            (a * b + a_alt * b_alt, da * b + da_alt * b_alt)
        } else {
            (a * (b + b_alt), da * (b + b_alt))
        }
    }

    /// Velocity of particle 1 from the closed form, `Im(∂₁ψ/ψ)` with ħ = m = 1.
    fn oracle(&self, x1: f64, x2: f64) -> f64 {
        let (psi, d) = self.value(x1, x2, true);
        (d / psi).im
    }
}

pub(super) fn setup(s: &Scenario, entangled: bool) -> Result<(SpinorField, HamiltonianSpec), ExperimentError> {
    let axis = Axis::centered(s.param("extent"), s.count("points"));
    let grid = Grid::new(vec![axis, axis])?;
    let packets = Packets::new(s);
    let psi = SpinorField::scalar_from_fn(&grid, |q| packets.value(q[0], q[1], entangled).0)?.normalized()?;
    let h = HamiltonianSpec::particles(&grid, 2, 1, &[1.0, 1.0])?;
    Ok((psi, h))
}

pub(super) fn run(s: &Scenario) -> Result<ScenarioRun, ExperimentError> {
    let (entangled, h) = setup(s, true)?;
    let (product, _) = setup(s, false)?;
    let guard = NodeGuard::default();
    let v1 = |psi: &SpinorField, q1: f64, q2: f64| -> Result<f64, ExperimentError> {
        Ok(velocity(psi, &h, &Configuration::new(vec![q1, q2]), &guard)?.velocity[0])
    };
    let (q1, q2, q2_alt) = (s.param("q1"), s.param("q2"), s.param("q2_alt"));
    let packets = Packets::new(s);

    let (va, vb) = (v1(&entangled, q1, q2)?, v1(&entangled, q1, q2_alt)?);
    let oracle_error = (va - packets.oracle(q1, q2)).abs().max((vb - packets.oracle(q1, q2_alt)).abs());
    let product_diff = (v1(&product, q1, q2)? - v1(&product, q1, q2_alt)?).abs();

    let checks = vec![
        Check::new(
            "entangled_dependence",
            "|v1(Q1, Q2) − v1(Q1, Q2')| for the entangled state",
            (va - vb).abs(),
            Relation::Above,
            DEPENDENCE_LIMIT,
            "the velocity of particle 1 depends on the position of particle 2",
        ),
        Check::new(
            "oracle_agreement",
            "largest difference between lattice and closed-form velocities at the two configurations",
            oracle_error,
            Relation::AtMost,
            ORACLE_LIMIT,
            "cubic interpolation error of the lattice velocity field at this spacing",
        ),
        Check::new(
            "product_independence",
            "|v1(Q1, Q2) − v1(Q1, Q2')| for a product state",
            product_diff,
            Relation::Below,
            PRODUCT_LIMIT,
            "a product state factorises the dependence on Q2 out of v1",
        ),
    ];

    let mut metrics = BTreeMap::new();
    metrics.insert("v1_at_q2".into(), va);
    metrics.insert("v1_at_q2_alt".into(), vb);

    let mut table = Table::new("velocity_profile", &["q2", "v1_entangled", "v1_closed_form", "v1_product"]);
    let span = s.param("extent") / 4.0;
    for i in 0..PROFILE_POINTS {
        let q2v = -span + 2.0 * span * i as f64 / (PROFILE_POINTS - 1) as f64;
        table.push(vec![q2v, v1(&entangled, q1, q2v)?, packets.oracle(q1, q2v), v1(&product, q1, q2v)?]);
    }
    Ok(ScenarioRun::new(checks, metrics, vec![table]))
}
