//! Runs any registered scenario and prints its checks.
//!
//! ```text
//! cargo run --release --example scenario_report -- stern_gerlach up_weight=0.7 --seed 3
//! ```

use std::collections::BTreeMap;
use std::time::Instant;

use bohmian::experiments::{build_scenario, registry, run_scenario};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let Some(name) = args.next() else {
        for info in registry() {
            println!("{:<22} {}", info.name, info.summary);
        }
        return Ok(());
    };
    let mut overrides = BTreeMap::new();
    let mut seed = 0;
    let mut n = None;
    while let Some(arg) = args.next() {
        match arg.as_str() {
            "--seed" => seed = args.next().ok_or("--seed needs a value")?.parse()?,
            "-n" => n = Some(args.next().ok_or("-n needs a value")?.parse()?),
            kv => {
                let (k, v) = kv.split_once('=').ok_or("overrides look like key=value")?;
                overrides.insert(k.to_string(), v.parse()?);
            }
        }
    }
    let mut scenario = build_scenario(&name, &overrides)?;
    if let Some(n) = n {
        scenario = scenario.with_ensemble_size(n)?;
    }
    let start = Instant::now();
    let run = run_scenario(&scenario, seed)?;
    for check in &run.report.checks {
        println!("{}", check.line());
    }
    for (k, v) in &run.report.metrics {
        println!("  {k} = {v}");
    }
    println!("{} tables, {:.1} s", run.tables.len(), start.elapsed().as_secs_f64());
    Ok(())
}
