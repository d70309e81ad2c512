//! Minimum-rank synthesis on the drone waypoint benchmark.
//!
//! Usage: `cargo run --release --example drone_synthesis [horizon] [objective]`
//! (defaults: 20, rank). Set `COMMSYNTH_SOLVER_VERBOSE=1` for solver output.

use commsynth::problem::drone_problem;
use commsynth::synthesis::solve;
use commsynth::Objective;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let horizon: usize = args.next().map(|a| a.parse()).transpose()?.unwrap_or(20);
    let objective: Objective = args.next().map(|a| a.parse()).transpose()?.unwrap_or(Objective::Rank);
    let problem = drone_problem(horizon)?.with_objective(objective);

    let result = solve(&problem)?;
    println!("objective        {}", objective.name());
    println!("messages         {}", result.message_count);
    println!("rank Phi_uy / K  {} / {}", result.diagnostics.rank_phi_uy, result.diagnostics.rank_k);
    println!("wall time        {:.1} s", result.diagnostics.wall_time);
    for rec in &result.diagnostics.iterations {
        println!(
            "  iter {:>2}: {:<12} {:>6.1} s  weighted {:>12.6}  merit {:>12.6}  count {}",
            rec.iteration, rec.solver.detail, rec.solver.solve_time, rec.weighted_objective, rec.merit, rec.message_count
        );
    }
    let shown: Vec<String> = result.singular_values.iter().take(24).map(|s| format!("{s:.3e}")).collect();
    println!("singular values  {}", shown.join(" "));
    println!("spectral gap     {:.3e}", result.spectral_gap());
    Ok(())
}
