//! A narrow packet in a harmonic well follows the Newtonian orbit.

use std::collections::BTreeMap;

use bohmian::experiments::{build_scenario, run_scenario};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let run = run_scenario(&build_scenario("classical_limit", &BTreeMap::new())?, 0)?;
    for check in &run.report.checks {
        println!("{}", check.line());
    }
    let orbit = run.table("orbit").ok_or("no orbit")?;
    println!("\n{:>6} {:>10} {:>10} {:>10}", "t", "centre", "mean", "newton");
    for row in orbit.rows.iter().step_by(10) {
        println!("{:>6.3} {:>10.5} {:>10.5} {:>10.5}", row[0], row[1], row[2], row[3]);
    }
    Ok(())
}
