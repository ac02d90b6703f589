//! Configuration jumps in a two-level system: Monte Carlo occupation against
//! sin²t, and the rate 2 tan t.

use bohmian::jumps::{jump_rate, occupation_check, simulate_many, two_level, ExactEvolution, JumpOptions};
use nalgebra::DVector;
use num_complex::Complex64;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let space = two_level(1.0);
    let psi0 = DVector::from_vec(vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)]);
    let evolution = ExactEvolution::new(&space, &psi0)?;
    for t in [0.2, 0.6, 1.0] {
        println!("rate 1 → 2 at t = {t}: {:.6} (2 tan t = {:.6})", jump_rate(&evolution.state(t), &space, 0, 1)?, 2.0 * t.tan());
    }
    let times = [0.25, 0.5, 0.75, 1.0, 1.25];
    let paths = simulate_many(&space, &evolution, 0, 1.25, 0, 10_000, &JumpOptions::default())?;
    println!("{:>6} {:>10} {:>10}", "t", "empirical", "sin²t");
    for r in occupation_check(&paths, &space, &evolution, &times)? {
        println!("{:>6.2} {:>10.4} {:>10.4}", r.time, r.empirical[1], r.expected[1]);
    }
    let jumped = paths.iter().filter(|p| p.first_jump().is_some()).count();
    println!("{jumped} of {} paths jumped", paths.len());
    Ok(())
}
