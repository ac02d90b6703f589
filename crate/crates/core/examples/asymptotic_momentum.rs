//! Late-time velocities m·Q(T)/T reproduce the momentum distribution |ψ̂|².

use std::collections::BTreeMap;

use bohmian::experiments::{build_scenario, run_scenario};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let run = run_scenario(&build_scenario("asymptotic_momentum", &BTreeMap::new())?, 0)?;
    for check in &run.report.checks {
        println!("{}", check.line());
    }
    let q = run.table("momentum_quantiles").ok_or("no quantiles")?;
    println!("\n{:>6} {:>12} {:>12}", "p", "T = 50", "T = 5");
    for row in q.rows.iter().step_by((q.rows.len() / 10).max(1)) {
        println!("{:>6.2} {:>12.5} {:>12.5}", row[0], row[1], row[2]);
    }
    Ok(())
}
