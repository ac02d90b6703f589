//! The velocity of particle 1 in an entangled pair depends on where
//! particle 2 is; for a product state it does not.

use std::collections::BTreeMap;

use bohmian::experiments::{build_scenario, run_scenario};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let run = run_scenario(&build_scenario("epr_nonlocality", &BTreeMap::new())?, 0)?;
    for check in &run.report.checks {
        println!("{}", check.line());
    }
    let profile = run.table("velocity_profile").ok_or("no velocity profile")?;
    println!("\n{:>8} {:>12} {:>12} {:>12}", "q2", "entangled", "closed form", "product");
    for row in profile.rows.iter().step_by((profile.rows.len() / 16).max(1)) {
        println!("{:>8.3} {:>12.6} {:>12.6} {:>12.6}", row[0], row[1], row[2], row[3]);
    }
    Ok(())
}
