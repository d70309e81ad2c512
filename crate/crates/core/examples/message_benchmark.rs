//! Compares the message counts of the rank, sensor-norm and actuator-norm
//! objectives on the drone mission.
//!
//! Usage: `cargo run --release --example message_benchmark [horizon]` (default 6).

use commsynth::problem::drone_problem;
use commsynth::synthesis::solve;
use commsynth::Objective;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let horizon: usize = std::env::args().nth(1).map(|a| a.parse()).transpose()?.unwrap_or(6);
    let base = drone_problem(horizon)?;
    let mut counts = Vec::new();
    for objective in [Objective::Rank, Objective::Sensor, Objective::Actuator, Objective::Multipair] {
        let result = solve(&base.clone().with_objective(objective))?;
        println!(
            "{:<10} {:>3} messages  {:>3} iterations  {:>7.1} s",
            objective.name(),
            result.message_count,
            result.diagnostics.iterations.len(),
            result.diagnostics.wall_time
        );
        counts.push(result.message_count);
    }
    println!("rank vs actuator: {:.0}% fewer", 100.0 * (1.0 - counts[0] as f64 / counts[2] as f64));
    Ok(())
}
