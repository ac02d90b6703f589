//! Two-slit interference: trajectory fan, screen histogram and the
//! equivariance checks.
//!
//! ```text
//! cargo run --release --example double_slit
//! ```

use std::collections::BTreeMap;

use bohmian::experiments::{build_scenario, run_scenario};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scenario = build_scenario("double_slit", &BTreeMap::new())?;
    let run = run_scenario(&scenario, 0)?;
    for check in &run.report.checks {
        println!("{}", check.line());
    }

    let screen = run.table("screen_histogram").ok_or("no screen histogram")?;
    let peak = screen.rows.iter().map(|r| r[2].max(r[3])).fold(0.0, f64::max);
    println!("\n{:>7}  |ψ|² (#) vs arrivals (o)", "y");
    for row in &screen.rows {
        let bar = |p: f64| (60.0 * p / peak).round() as usize;
        println!("{:>7.2}  {}\n         {}", row[1], "#".repeat(bar(row[2])), "o".repeat(bar(row[3])));
    }
    Ok(())
}
