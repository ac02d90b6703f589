//! Two packets pass through each other in one dimension; their trajectories
//! cannot, so a "which packet" question gets different answers from the
//! trajectory and from the wave function.

use std::collections::BTreeMap;

use bohmian::experiments::{build_scenario, run_scenario};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scenario = build_scenario("packet_exchange", &BTreeMap::new())?;
    let run = run_scenario(&scenario, 0)?;
    for check in &run.report.checks {
        println!("{}", check.line());
    }
    let traj = run.table("trajectories").ok_or("no trajectories")?;
    let last_t = traj.rows.iter().map(|r| r[1]).fold(f64::MIN, f64::max);
    let ends: Vec<f64> = traj.rows.iter().filter(|r| r[1] == last_t).map(|r| r[2]).collect();
    let starts: Vec<f64> = traj.rows.iter().filter(|r| r[1] == 0.0).map(|r| r[2]).collect();
    println!("\nfirst members, x(0) → x({last_t}):");
    for (a, b) in starts.iter().zip(&ends).take(10) {
        println!("  {a:>8.3} → {b:>8.3}");
    }
    Ok(())
}
