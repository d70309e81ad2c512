mod common;

use commsynth::cli::{factorize_and_recheck, run_with_args, EXIT_OK};
use commsynth::containment::{build_noise_and_safe_sets, containment_oracle};
use commsynth::problem::drone_problem;
use commsynth::runtime::SampleMode;
use commsynth::sls::{drop_terminal_noise_columns, extract_phi_tilde, response_from_controller};
use commsynth::synthesis::{solve_min_rank, solve_multi_pair_rank};
use commsynth::{
    check_safety, lift, sample_noise, simulate_distributed, simulate_monolithic, BlockLowerTriangular, BoxSet,
    Matrix, Objective, SafetySpec, SolverOptions, SynthesisProblem, TimeVaryingLinearSystem,
};
use common::gaussian;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn boxes(dim: usize, r: f64, n: usize) -> Vec<commsynth::HPolytope> {
    vec![BoxSet::symmetric(dim, r).unwrap().to_hpolytope(); n]
}

#[test]
fn drone_short_horizon_end_to_end() {
    let problem = drone_problem(6).unwrap();
    let result = solve_min_rank(&problem).unwrap();
    assert_eq!(result.diagnostics.rank_k, result.diagnostics.rank_phi_uy);
    let (f, report) = factorize_and_recheck(&result, &problem).unwrap();
    assert!(report.feasible, "worst margin {}", report.worst_margin);
    assert_eq!(f.band(), result.message_count);
    let k_eps = f.controller().unwrap();
    for mode in [SampleMode::Uniform, SampleMode::Vertex] {
        for draw in sample_noise(&problem, mode, 10, 5).unwrap() {
            let mono = simulate_monolithic(&problem, &k_eps, &draw).unwrap();
            let dist = simulate_distributed(&problem, &f, &draw).unwrap();
            assert!(mono.max_input_deviation(&dist) < 1e-9);
            assert_eq!(dist.messages.len(), f.band());
            let safety = check_safety(&problem, &dist);
            assert!(safety.pass, "{mode:?}: worst margin {}", safety.worst_margin);
        }
    }
}

/// Scalar integrator whose state must stay in [-1.05, 1.05] while noise
/// accumulates: open loop fails, one message suffices.
fn scalar_chain() -> SynthesisProblem {
    let one = Matrix::from_element(1, 1, 1.0);
    let sys = TimeVaryingLinearSystem::time_invariant(4, one.clone(), one.clone(), one).unwrap();
    let safety = SafetySpec {
        x0: BoxSet::symmetric(1, 1.0).unwrap().to_hpolytope(),
        x: boxes(1, 1.05, 4),
        u: boxes(1, 3.0, 4),
        w: boxes(1, 0.1, 4),
        v: boxes(1, 0.1, 4),
    };
    SynthesisProblem::new(sys, safety, Objective::Rank, SolverOptions::default()).unwrap()
}

fn robustly_safe(problem: &SynthesisProblem, k: &BlockLowerTriangular) -> bool {
    let ops = lift(&problem.system);
    let resp = response_from_controller(k, &ops).unwrap();
    let pt = drop_terminal_noise_columns(&extract_phi_tilde(&resp), ops.ny, 1e-12).unwrap();
    let (noise, safe) = build_noise_and_safe_sets(&problem.safety);
    let stacked_safe = commsynth::HPolytope::new(safe.h_mat().clone(), safe.h_vec().clone()).unwrap();
    containment_oracle(&noise, &stacked_safe, &pt).unwrap()
}

#[test]
fn scalar_chain_rank_matches_small_rank_search() {
    let problem = scalar_chain();
    let result = solve_min_rank(&problem).unwrap();

    // rank 0 is only K = 0
    assert!(!robustly_safe(&problem, &BlockLowerTriangular::zeros(1, 1, 4)));
    // rank 1: sample causal outer products d e' with e supported up to s and d from s on
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut found = false;
    for _ in 0..4000 {
        let s = rng.gen_range(0..5);
        let mut k = Matrix::zeros(5, 5);
        let e: Vec<f64> = (0..5).map(|c| if c <= s { gaussian(&mut rng) } else { 0.0 }).collect();
        let d: Vec<f64> = (0..5).map(|r| if r >= s { gaussian(&mut rng) } else { 0.0 }).collect();
        for r in 0..5 {
            for c in 0..5 {
                k[(r, c)] = d[r] * e[c];
            }
        }
        if robustly_safe(&problem, &BlockLowerTriangular::new(k, 1, 1, 4).unwrap()) {
            found = true;
            break;
        }
    }
    assert!(found, "no feasible rank-1 controller sampled");
    assert_eq!(result.message_count, 1);
}

#[test]
fn decoupled_channels_have_no_cross_pairs() {
    // two independent scalar integrators, each measured by its own sensor
    let a = Matrix::identity(2, 2);
    let sys = TimeVaryingLinearSystem::time_invariant(3, a.clone(), a.clone(), a).unwrap();
    let safety = SafetySpec {
        x0: BoxSet::symmetric(2, 1.0).unwrap().to_hpolytope(),
        x: boxes(2, 1.05, 3),
        u: boxes(2, 3.0, 3),
        w: boxes(2, 0.1, 3),
        v: boxes(2, 0.1, 3),
    };
    let problem = SynthesisProblem::new(sys, safety, Objective::Multipair, SolverOptions::default()).unwrap();
    let result = solve_multi_pair_rank(&problem).unwrap();
    for p in &result.pair_ranks {
        if p.actuator != p.sensor {
            assert_eq!(p.rank, 0, "pair ({}, {})", p.actuator, p.sensor);
        } else {
            assert!(p.rank >= 1);
        }
    }
}

/// One axis of the drone (position and velocity along `axis`) as its own problem.
fn drone_axis(drone: &SynthesisProblem, axis: usize) -> SynthesisProblem {
    let states = [axis, axis + 2];
    let pick = |m: &Matrix, rows: &[usize], cols: &[usize]| Matrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])]);
    let sys = &drone.system;
    let plant = TimeVaryingLinearSystem::time_invariant(
        drone.horizon(),
        pick(sys.a(0), &states, &states),
        pick(sys.b(0), &states, &[axis]),
        pick(sys.c(0), &[axis], &states),
    )
    .unwrap();
    let project = |p: &commsynth::HPolytope, idx: &[usize]| {
        let b = p.as_box().unwrap();
        let lo: Vec<f64> = idx.iter().map(|&i| b.lower()[i]).collect();
        let hi: Vec<f64> = idx.iter().map(|&i| b.upper()[i]).collect();
        BoxSet::from_slices(&lo, &hi).unwrap().to_hpolytope()
    };
    let s = &drone.safety;
    let safety = SafetySpec {
        x0: project(&s.x0, &states),
        x: s.x.iter().map(|p| project(p, &states)).collect(),
        u: s.u.iter().map(|p| project(p, &[axis])).collect(),
        w: s.w.iter().map(|p| project(p, &states)).collect(),
        v: s.v.iter().map(|p| project(p, &[axis])).collect(),
    };
    SynthesisProblem::new(plant, safety, Objective::Rank, drone.options.clone()).unwrap()
}

#[test]
fn drone_pairs_match_independent_axes() {
    let drone = drone_problem(6).unwrap();
    let pairs = solve_multi_pair_rank(&drone.clone().with_objective(Objective::Multipair)).unwrap();
    for p in &pairs.pair_ranks {
        if p.actuator != p.sensor {
            assert_eq!(p.rank, 0, "pair ({}, {})", p.actuator, p.sensor);
        } else {
            let single = solve_min_rank(&drone_axis(&drone, p.actuator)).unwrap();
            assert_eq!(p.rank, single.message_count, "axis {}", p.actuator);
        }
    }
    let rank = solve_min_rank(&drone).unwrap();
    assert!(pairs.message_count <= 2 * rank.message_count);
}

#[test]
fn cli_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let path = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    assert_eq!(run_with_args(["commsynth", "drone-problem", "--horizon-override", "6", "--out", &path("drone.json")]), EXIT_OK);
    assert_eq!(run_with_args(["commsynth", "synthesize", &path("drone.json"), "--out", &path("synth")]), EXIT_OK);
    let k = format!("{}/controller.json", path("synth"));
    assert_eq!(run_with_args(["commsynth", "factorize", &k, "--out", &path("fact")]), EXIT_OK);
    let f = format!("{}/factorization.json", path("fact"));
    assert_eq!(
        run_with_args(["commsynth", "simulate", &path("drone.json"), &f, "--draws", "3", "--out", &path("sim")]),
        EXIT_OK
    );
    let safety: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("sim/safety.json")).unwrap()).unwrap();
    assert_eq!(safety["draws"], 6);
    assert_eq!(safety["pass"], true);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("synth/manifest.json")).unwrap()).unwrap();
    assert!(manifest["artifacts"].as_array().unwrap().len() >= 4);
}

#[test]
fn scaled_controller_is_unsafe_in_simulation() {
    let problem = drone_problem(6).unwrap();
    let result = solve_min_rank(&problem).unwrap();
    let k = result.k.scaled(10.0);
    let worst = sample_noise(&problem, SampleMode::Vertex, 5, 1)
        .unwrap()
        .iter()
        .map(|d| check_safety(&problem, &simulate_monolithic(&problem, &k, d).unwrap()).worst_margin)
        .fold(f64::INFINITY, f64::min);
    assert!(worst < 0.0);
}
