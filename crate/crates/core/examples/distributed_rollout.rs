//! Synthesizes a controller for a short drone mission, splits it into
//! sensor and actuator nodes and replays noise draws through both.

use commsynth::problem::drone_problem;
use commsynth::runtime::SampleMode;
use commsynth::synthesis::solve_min_rank;
use commsynth::{causal_factorize, check_safety, recheck_feasibility, sample_noise, simulate_distributed, simulate_monolithic};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let problem = drone_problem(6)?;
    let result = solve_min_rank(&problem)?;
    let f = causal_factorize(&result.k, problem.options.epsilon)?;
    let report = recheck_feasibility(&f.controller()?, &problem)?;
    println!("messages {} at {:?}, recheck margin {:.2e}", f.band(), f.times, report.worst_margin);

    for mode in [SampleMode::Uniform, SampleMode::Vertex] {
        for (i, draw) in sample_noise(&problem, mode, 3, 1)?.iter().enumerate() {
            let dist = simulate_distributed(&problem, &f, draw)?;
            let mono = simulate_monolithic(&problem, &result.k, draw)?;
            let safety = check_safety(&problem, &dist);
            let end = dist.x.last().unwrap();
            println!(
                "{mode:?} {i}: final position ({:.2}, {:.2}), margin {:.3}, input gap {:.1e}, {} messages",
                end[0],
                end[1],
                safety.worst_margin,
                mono.max_input_deviation(&dist),
                dist.messages.len()
            );
        }
    }
    Ok(())
}
