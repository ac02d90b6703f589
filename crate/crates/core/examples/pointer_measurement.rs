//! A pointer coupled to a two-state system: outcome statistics, the
//! conditional wave function of the system, and branch separation.

use std::collections::BTreeMap;

use bohmian::experiments::{build_scenario, pointer_state, run_scenario};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scenario = build_scenario("pointer_measurement", &BTreeMap::new())?;
    for fraction in [0.0, 0.5, 1.0] {
        let psi = pointer_state(&scenario, fraction)?;
        let rho = psi.density();
        let marginal = rho.marginal_masses(1);
        let y_axis = psi.grid().axis(1);
        let upper: f64 = marginal.iter().enumerate().filter(|(j, _)| y_axis.coord(*j) > 0.0).map(|(_, m)| m).sum();
        println!("coupling {:>3.0}%: pointer mass at y > 0 is {upper:.4}", 100.0 * fraction);
    }
    let run = run_scenario(&scenario, 0)?;
    for check in &run.report.checks {
        println!("{}", check.line());
    }
    Ok(())
}
