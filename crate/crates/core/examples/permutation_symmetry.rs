//! For symmetric and antisymmetric two-particle states, swapping the
//! starting positions swaps the trajectories.

use std::collections::BTreeMap;

use bohmian::experiments::{build_scenario, run_scenario};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let run = run_scenario(&build_scenario("permutation_symmetry", &BTreeMap::new())?, 7)?;
    for check in &run.report.checks {
        println!("{}", check.line());
    }
    let pairs = run.table("trajectory_pairs").ok_or("no trajectory pairs")?;
    let last_t = pairs.rows.iter().map(|r| r[2]).fold(f64::MIN, f64::max);
    println!("\nendpoints at t = {last_t}: (q1, q2) and the swapped run (q2', q1')");
    for row in pairs.rows.iter().filter(|r| r[2] == last_t) {
        let kind = if row[0] > 0.0 { "symmetric" } else { "antisymmetric" };
        println!("{kind:>13} ({:>8.4}, {:>8.4})  ({:>8.4}, {:>8.4})", row[3], row[4], row[6], row[5]);
    }
    Ok(())
}
