//! Command-line driver: `synthesize`, `factorize`, `simulate`, `benchmark`
//! and `drone-problem`.
//!
//! Every subcommand writes its artifacts into `--out` together with a
//! `manifest.json` listing the inputs, the options and a SHA-256 checksum
//! of each emitted file.
//!
//! Exit codes: 0 success, 1 infeasible or unsafe, 2 input error, 3 solver failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::block::BltFile;
use crate::error::{Error, Result};
use crate::factorization::{causal_factorize, verify_causality, CausalFactorization, FactorizationFile};
use crate::problem::{drone_problem, load_problem, Objective, SolverOptions, SynthesisProblem};
use crate::runtime::{check_safety, sample_noise, simulate_distributed, SampleMode, SafetyReport};
use crate::synthesis::{self, recheck_feasibility, SynthesisResult};

pub const EXIT_OK: u8 = 0;
pub const EXIT_INFEASIBLE: u8 = 1;
pub const EXIT_INPUT: u8 = 2;
pub const EXIT_SOLVER: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "commsynth", version, about = "Minimum-message controller synthesis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a controller for a problem file.
    Synthesize {
        problem: PathBuf,
        #[arg(long)]
        objective: Option<Objective>,
        #[command(flatten)]
        opts: OptionArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Causally factor a controller file.
    Factorize {
        controller: PathBuf,
        #[arg(long, default_value_t = SolverOptions::default().epsilon)]
        epsilon: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a factored controller on sampled noise and check safety.
    Simulate {
        problem: PathBuf,
        factorization: PathBuf,
        /// Draws per sampling mode (uniform and vertex).
        #[arg(long, default_value_t = 40)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare the rank objective with the sensor and actuator baselines on the drone instance.
    Benchmark {
        #[command(flatten)]
        opts: OptionArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the drone benchmark problem file.
    DroneProblem {
        #[arg(long = "horizon-override")]
        horizon: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Overrides of the problem's solver options.
#[derive(Debug, Clone, Default, Args)]
pub struct OptionArgs {
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Shorter horizon for quick runs.
    #[arg(long = "horizon-override")]
    pub horizon: Option<usize>,
}

impl OptionArgs {
    fn apply(&self, mut o: SolverOptions) -> Result<SolverOptions> {
        if let Some(d) = self.delta {
            o.delta = d;
        }
        if let Some(e) = self.epsilon {
            o.epsilon = e;
        }
        if let Some(i) = self.iters {
            o.max_reweight_iters = i;
        }
        if let Some(s) = self.seed {
            o.seed = s;
        }
        o.validate()?;
        Ok(o)
    }
}

impl std::str::FromStr for SampleMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(SampleMode::Uniform),
            "vertex" => Ok(SampleMode::Vertex),
            other => Err(Error::Parse(format!("unknown sampling mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

/// Record of one CLI run.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub inputs: Vec<String>,
    pub options: serde_json::Value,
    pub output_dir: String,
    pub artifacts: Vec<Artifact>,
}

/// Output directory that remembers what was written into it.
struct OutDir {
    root: PathBuf,
    artifacts: Vec<Artifact>,
}

impl OutDir {
    fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|source| Error::Io { path: root.to_path_buf(), source })?;
        Ok(Self { root: root.to_path_buf(), artifacts: Vec::new() })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|source| Error::Io { path: parent.to_path_buf(), source })?;
        }
        fs::write(&path, bytes).map_err(|source| Error::Io { path: path.clone(), source })?;
        self.artifacts.push(Artifact { path: name.to_string(), sha256: hex::encode(Sha256::digest(bytes)) });
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value).map_err(|e| Error::Internal(e.to_string()))?;
        self.write(name, text.as_bytes())
    }

    fn finish(self, subcommand: &str, inputs: &[&Path], options: serde_json::Value) -> Result<()> {
        let manifest = RunManifest {
            subcommand: subcommand.to_string(),
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            options,
            output_dir: self.root.display().to_string(),
            artifacts: self.artifacts,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Internal(e.to_string()))?;
        let path = self.root.join("manifest.json");
        fs::write(&path, text).map_err(|source| Error::Io { path, source })
    }
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Infeasible { .. } => EXIT_INFEASIBLE,
        Error::SolverFailure { .. } | Error::Feasibility { .. } | Error::Internal(_) => EXIT_SOLVER,
        _ => EXIT_INPUT,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(command: Command) -> Result<u8> {
    match command {
        Command::Synthesize { problem, objective, opts, out } => cmd_synthesize(&problem, objective, &opts, &out),
        Command::Factorize { controller, epsilon, out } => cmd_factorize(&controller, epsilon, &out),
        Command::Simulate { problem, factorization, draws, seed, out } => {
            cmd_simulate(&problem, &factorization, draws, seed, &out)
        }
        Command::Benchmark { opts, out } => cmd_benchmark(&opts, &out),
        Command::DroneProblem { horizon, out } => {
            let problem = drone_problem(horizon.unwrap_or(20))?;
            problem.save(&out)?;
            println!("wrote {}", out.display());
            Ok(EXIT_OK)
        }
    }
}

fn options_json(o: &SolverOptions, horizon: Option<usize>) -> serde_json::Value {
    serde_json::json!({
        "delta": o.delta,
        "epsilon": o.epsilon,
        "iterations": o.max_reweight_iters,
        "seed": o.seed,
        "feasibility_tol": o.feasibility_tol,
        "solver_tol": o.solver_tol,
        "horizon_override": horizon,
    })
}

fn spectrum_csv(result: &SynthesisResult) -> String {
    let mut s = String::from("index,singular_value\n");
    for (i, v) in result.singular_values.iter().enumerate() {
        s.push_str(&format!("{},{}\n", i + 1, v));
    }
    s
}

fn group_norms_csv(result: &SynthesisResult) -> String {
    let mut s = String::from("index,row_norm,column_norm\n");
    let n = result.row_norms.len().max(result.column_norms.len());
    for i in 0..n {
        let cell = |v: Option<&f64>| v.map_or(String::new(), f64::to_string);
        s.push_str(&format!("{},{},{}\n", i + 1, cell(result.row_norms.get(i)), cell(result.column_norms.get(i))));
    }
    s
}

/// Axis metadata for the emitted plot data.
fn plot_metadata(files: &[(&str, &str, &str, bool)]) -> serde_json::Value {
    serde_json::Value::Array(
        files
            .iter()
            .map(|(file, x, y, log_y)| serde_json::json!({"file": file, "x": x, "y": y, "log_y": log_y}))
            .collect(),
    )
}

fn write_result(out: &mut OutDir, prefix: &str, result: &SynthesisResult) -> Result<()> {
    out.write(&format!("{prefix}report.json"), result.report_json().as_bytes())?;
    out.write_json(&format!("{prefix}controller.json"), &BltFile::from_blt(&result.k))?;
    out.write(&format!("{prefix}singular_values.csv"), spectrum_csv(result).as_bytes())?;
    out.write(&format!("{prefix}group_norms.csv"), group_norms_csv(result).as_bytes())?;
    Ok(())
}

fn cmd_synthesize(path: &Path, objective: Option<Objective>, opts: &OptionArgs, out: &Path) -> Result<u8> {
    let mut problem = load_problem(path)?;
    if let Some(t) = opts.horizon {
        problem = problem.truncated(t)?;
    }
    if let Some(o) = objective {
        problem.objective = o;
    }
    problem.options = opts.apply(problem.options)?;
    let mut dir = OutDir::create(out)?;
    let result = synthesis::solve(&problem)?;
    write_result(&mut dir, "", &result)?;
    dir.write_json(
        "plots.json",
        &plot_metadata(&[
            ("singular_values.csv", "index", "singular_value", true),
            ("group_norms.csv", "index", "row_norm,column_norm", true),
        ]),
    )?;
    println!(
        "{}: {} messages (rank of Phi_uy {}), {:.1}s",
        problem.objective.name(),
        result.message_count,
        result.diagnostics.rank_phi_uy,
        result.diagnostics.wall_time
    );
    dir.finish("synthesize", &[path], options_json(&problem.options, opts.horizon))?;
    Ok(EXIT_OK)
}

fn cmd_factorize(path: &Path, epsilon: f64, out: &Path) -> Result<u8> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    let file: BltFile = serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let k = file.into_blt()?;
    let started = Instant::now();
    let f = causal_factorize(&k, epsilon)?;
    let elapsed = started.elapsed();
    let mut dir = OutDir::create(out)?;
    dir.write_json("factorization.json", &FactorizationFile::from(&f))?;
    let residual = (f.product() - k.data()).amax();
    println!("band {}", f.band());
    println!("schedule {:?}", f.times);
    println!("max |DE - K| = {residual:e}, {:.3} ms", elapsed.as_secs_f64() * 1e3);
    dir.finish("factorize", &[path], serde_json::json!({ "epsilon": epsilon }))?;
    Ok(EXIT_OK)
}

fn load_factorization(path: &Path) -> Result<CausalFactorization> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    let file: FactorizationFile =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    CausalFactorization::try_from(file)
}

#[derive(Debug, Serialize)]
struct DrawSummary {
    mode: SampleMode,
    draw: usize,
    messages: usize,
    safety: SafetyReport,
}

#[derive(Debug, Serialize)]
struct SimulationSummary {
    draws: usize,
    pass: bool,
    worst_margin: f64,
    runs: Vec<DrawSummary>,
}

/// Simulates `draws` uniform and `draws` vertex noise sequences, writing
/// per-run CSVs into `dir`.
fn simulate_into(
    dir: &mut OutDir,
    problem: &SynthesisProblem,
    f: &CausalFactorization,
    draws: usize,
    seed: u64,
) -> Result<SimulationSummary> {
    let mut runs = Vec::new();
    let mut positions = String::from("mode,draw,t,p1,p2\n");
    for mode in [SampleMode::Uniform, SampleMode::Vertex] {
        let name = match mode {
            SampleMode::Uniform => "uniform",
            SampleMode::Vertex => "vertex",
        };
        let mode_seed = seed.wrapping_add(if mode == SampleMode::Vertex { 1 } else { 0 });
        for (i, draw) in sample_noise(problem, mode, draws, mode_seed)?.iter().enumerate() {
            let traj = simulate_distributed(problem, f, draw)?;
            let mut buf = Vec::new();
            traj.write_csv(&mut buf)?;
            dir.write(&format!("trajectories/{name}_{i:03}.csv"), &buf)?;
            let mut buf = Vec::new();
            traj.write_messages_csv(&mut buf)?;
            dir.write(&format!("messages/{name}_{i:03}.csv"), &buf)?;
            for (t, x) in traj.x.iter().enumerate() {
                let p2 = x.get(1).map_or(String::new(), f64::to_string);
                positions.push_str(&format!("{name},{i},{t},{},{p2}\n", x[0]));
            }
            runs.push(DrawSummary { mode, draw: i, messages: traj.messages.len(), safety: check_safety(problem, &traj) });
        }
    }
    dir.write("positions.csv", positions.as_bytes())?;
    let worst_margin = runs.iter().map(|r| r.safety.worst_margin).fold(f64::INFINITY, f64::min);
    Ok(SimulationSummary { draws: runs.len(), pass: runs.iter().all(|r| r.safety.pass), worst_margin, runs })
}

fn cmd_simulate(problem_path: &Path, f_path: &Path, draws: usize, seed: u64, out: &Path) -> Result<u8> {
    let problem = load_problem(problem_path)?;
    let f = load_factorization(f_path)?;
    if !verify_causality(&f) {
        return Err(Error::Causality("factorization violates its message schedule".into()));
    }
    let sys = &problem.system;
    if f.nu != sys.nu() || f.ny != sys.ny() || f.horizon != sys.horizon() {
        return Err(Error::dim(format!(
            "factorization is for nu={} ny={} T={}, problem has nu={} ny={} T={}",
            f.nu,
            f.ny,
            f.horizon,
            sys.nu(),
            sys.ny(),
            sys.horizon()
        )));
    }
    let mut dir = OutDir::create(out)?;
    let summary = simulate_into(&mut dir, &problem, &f, draws, seed)?;
    dir.write_json("safety.json", &summary)?;
    dir.write_json("plots.json", &plot_metadata(&[("positions.csv", "p1", "p2", false)]))?;
    println!(
        "{} trajectories, {}, worst margin {:e}",
        summary.draws,
        if summary.pass { "all safe" } else { "SAFETY VIOLATED" },
        summary.worst_margin
    );
    dir.finish("simulate", &[problem_path, f_path], serde_json::json!({ "draws": draws, "seed": seed }))?;
    Ok(if summary.pass { EXIT_OK } else { EXIT_INFEASIBLE })
}

#[derive(Debug, Serialize)]
struct BenchmarkRow {
    objective: Objective,
    message_count: usize,
    solve_time: f64,
}

#[derive(Debug, Serialize)]
struct BenchmarkTable {
    horizon: usize,
    rows: Vec<BenchmarkRow>,
    /// `1 - rank / baseline` for each baseline.
    reduction_vs_sensor: f64,
    reduction_vs_actuator: f64,
    /// Rank count strictly below both baselines.
    rank_fewest: bool,
}

fn cmd_benchmark(opts: &OptionArgs, out: &Path) -> Result<u8> {
    let horizon = opts.horizon.unwrap_or(20);
    let mut problem = drone_problem(horizon)?;
    problem.options = opts.apply(problem.options)?;
    let mut dir = OutDir::create(out)?;
    let mut rows = Vec::new();
    for objective in [Objective::Rank, Objective::Sensor, Objective::Actuator] {
        let result = synthesis::solve(&problem.clone().with_objective(objective))?;
        write_result(&mut dir, &format!("{}/", objective.name()), &result)?;
        println!("{:<9} {:>4} messages {:>8.1}s", objective.name(), result.message_count, result.diagnostics.wall_time);
        rows.push(BenchmarkRow { objective, message_count: result.message_count, solve_time: result.diagnostics.wall_time });
    }
    let count = |o: Objective| rows.iter().find(|r| r.objective == o).map_or(0, |r| r.message_count) as f64;
    let reduction = |base: f64| if base > 0.0 { 1.0 - count(Objective::Rank) / base } else { 0.0 };
    let table = BenchmarkTable {
        horizon,
        reduction_vs_sensor: reduction(count(Objective::Sensor)),
        reduction_vs_actuator: reduction(count(Objective::Actuator)),
        rank_fewest: count(Objective::Rank) < count(Objective::Sensor).min(count(Objective::Actuator)),
        rows,
    };
    println!(
        "reduction: {:.1}% vs sensor norm, {:.1}% vs actuator norm",
        100.0 * table.reduction_vs_sensor,
        100.0 * table.reduction_vs_actuator
    );
    dir.write_json("benchmark.json", &table)?;
    dir.finish("benchmark", &[], options_json(&problem.options, opts.horizon))?;
    Ok(EXIT_OK)
}

/// Factorization of a synthesized controller plus its feasibility recheck,
/// shared by the examples and the end-to-end tests.
pub fn factorize_and_recheck(
    result: &SynthesisResult,
    problem: &SynthesisProblem,
) -> Result<(CausalFactorization, synthesis::FeasibilityReport)> {
    let f = causal_factorize(&result.k, problem.options.epsilon)?;
    let k_eps = f.controller()?;
    let report = recheck_feasibility(&k_eps, problem)?;
    Ok((f, report))
}
