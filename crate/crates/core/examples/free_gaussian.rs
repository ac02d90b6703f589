//! Spreading of a free Gaussian and one Bohmian trajectory through it.
//!
//! The packet width grows as σ(t) = σ0 √(1 + (t/2σ0²)²) and every trajectory
//! scales with it, so Q(t) = Q0 σ(t)/σ0.

use bohmian::dynamics::{evolve, HamiltonianSpec, PropagatorConfig};
use bohmian::guidance::{integrate_trajectory, Configuration, GuidanceField, TrajectoryOptions};
use bohmian::lattice::{Axis, Grid, SpinorField};
use num_complex::Complex64;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let grid = Grid::new(vec![Axis::centered(40.0, 1024)])?;
    let psi0 = SpinorField::scalar_from_fn(&grid, |x| Complex64::new((-x[0] * x[0] / 4.0).exp(), 0.0))?.normalized()?;
    let h = HamiltonianSpec::free(&grid);
    let evolution = evolve(&psi0, &h, 2.0, &PropagatorConfig::with_dt(5e-4, 20))?;
    println!("norm drift after {} snapshots: {:.2e}", evolution.times().len(), (evolution.last().norm() - 1.0).abs());

    let field = GuidanceField::new(&evolution, &h)?;
    let path = integrate_trajectory(&field, &Configuration::new(vec![1.0]), 2.0, &TrajectoryOptions::new(0.01))?;
    println!("{:>6} {:>12} {:>12}", "t", "Q(t)", "closed form");
    for (t, q) in path.times().iter().zip(path.points()).step_by(20) {
        println!("{t:>6.2} {:>12.8} {:>12.8}", q[0], (1.0 + t * t / 4.0).sqrt());
    }
    println!("Q(2) = {:.8}, √2 = {:.8}", path.last()[0], 2f64.sqrt());
    Ok(())
}
