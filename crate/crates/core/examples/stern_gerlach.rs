//! Spin measurement by an inhomogeneous field, with and without inverting
//! the field gradient.

use std::collections::BTreeMap;

use bohmian::experiments::{build_scenario, run_scenario};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for up_weight in [0.3, 0.5, 1.0] {
        let overrides = BTreeMap::from([("up_weight".to_string(), up_weight)]);
        let scenario = build_scenario("stern_gerlach", &overrides)?.with_ensemble_size(5000)?;
        let run = run_scenario(&scenario, 1)?;
        println!("|c↑|² = {up_weight}");
        for check in &run.report.checks {
            println!("  {}", check.line());
        }
    }
    Ok(())
}
