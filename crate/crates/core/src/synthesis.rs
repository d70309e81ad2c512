//! Controller synthesis: minimum-message controllers through reweighted
//! nuclear-norm minimization of the Youla parameter, plus the sensor- and
//! actuator-norm baselines.
//!
//! Every objective is solved over the same constraint set: the affine
//! closed-loop response constraints, causality of all four responses and
//! the Farkas conditions that make the closed loop robustly safe.

use std::time::Instant;

use serde::Serialize;

use crate::block::{lift, singular_values, BlockLowerTriangular, LiftedOperators};
use crate::conic::{self, AffineConstraintSet, AffineExpr, BackendSettings, ConicProgram, ConicSolution, PsdConstraint, SolveStatus};
use crate::containment::{assemble_farkas_constraints, build_noise_and_safe_sets, containment_margins, FarkasCertificate, ProductPolytope};
use crate::error::{Error, Result};
use crate::problem::{Objective, SynthesisProblem};
use crate::sls::{
    assemble_sensor_isolation, assemble_sls_equalities, controller_from_response, drop_terminal_noise_columns,
    extract_pair_response, extract_phi_tilde, groups, response_from_controller, sls_residuals, DecisionLayout,
    SystemResponse,
};
use crate::Matrix;

/// Message count of one sensor/actuator pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PairRank {
    pub actuator: usize,
    pub sensor: usize,
    pub rank: usize,
}

/// Solver record of one reweighting iteration.
#[derive(Debug, Clone, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub solver: ConicSolution,
    /// Weighted objective at the solution, with the weights used for this solve.
    pub weighted_objective: f64,
    /// Smooth surrogate the reweighting decreases.
    pub merit: f64,
    pub message_count: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Diagnostics {
    pub iterations: Vec<IterationRecord>,
    /// Max-norm residual of the affine response constraints.
    pub sls_residual: f64,
    pub lambda_min: f64,
    pub farkas_match_residual: f64,
    pub farkas_bound_violation: f64,
    pub rank_phi_uy: usize,
    pub rank_k: usize,
    pub stopped_early: bool,
    pub wall_time: f64,
}

/// Output of one synthesis run.
#[derive(Debug, Clone)]
pub struct SynthesisResult {
    pub objective: Objective,
    pub response: SystemResponse,
    pub k: BlockLowerTriangular,
    pub certificate: FarkasCertificate,
    /// Singular values of `Phi_uy`, descending.
    pub singular_values: Vec<f64>,
    pub row_norms: Vec<f64>,
    pub column_norms: Vec<f64>,
    /// Filled for the multi-pair objective.
    pub pair_ranks: Vec<PairRank>,
    /// Majorize-minimize merit after each iteration: `log det(Y + delta I) +
    /// log det(Z + delta I)` summed over nuclear blocks, or
    /// `sum_g log(||g|| + delta)` for group norms. Non-increasing.
    pub objective_trace: Vec<f64>,
    /// Weighted norm at each solution, under the weights of that solve.
    pub weighted_trace: Vec<f64>,
    pub count_trace: Vec<usize>,
    pub message_count: usize,
    pub epsilon: f64,
    pub diagnostics: Diagnostics,
}

/// JSON report of a [`SynthesisResult`].
#[derive(Debug, Clone, Serialize)]
pub struct SynthesisReport<'a> {
    pub objective: Objective,
    pub message_count: usize,
    pub epsilon: f64,
    pub singular_values: &'a [f64],
    pub row_norms: &'a [f64],
    pub column_norms: &'a [f64],
    pub pair_ranks: &'a [PairRank],
    pub objective_trace: &'a [f64],
    pub weighted_trace: &'a [f64],
    pub count_trace: &'a [usize],
    pub diagnostics: &'a Diagnostics,
}

impl SynthesisResult {
    pub fn report(&self) -> SynthesisReport<'_> {
        SynthesisReport {
            objective: self.objective,
            message_count: self.message_count,
            epsilon: self.epsilon,
            singular_values: &self.singular_values,
            row_norms: &self.row_norms,
            column_norms: &self.column_norms,
            pair_ranks: &self.pair_ranks,
            objective_trace: &self.objective_trace,
            weighted_trace: &self.weighted_trace,
            count_trace: &self.count_trace,
            diagnostics: &self.diagnostics,
        }
    }

    pub fn report_json(&self) -> String {
        serde_json::to_string_pretty(&self.report()).expect("report serializes")
    }

    /// `sigma_r / sigma_{r+1}` at the reported rank of `Phi_uy`, infinite
    /// when the tail is exactly zero.
    pub fn spectral_gap(&self) -> f64 {
        let r = self.diagnostics.rank_phi_uy;
        match (r.checked_sub(1).map(|i| self.singular_values[i]), self.singular_values.get(r)) {
            (Some(a), Some(&b)) if b > 0.0 => a / b,
            (Some(_), _) => f64::INFINITY,
            (None, _) => f64::NAN,
        }
    }
}

/// Outcome of [`recheck_feasibility`].
#[derive(Debug, Clone, Serialize)]
pub struct FeasibilityReport {
    pub feasible: bool,
    /// Smallest `h_S - Lambda h_N` entry; negative means a violated face.
    pub worst_margin: f64,
    pub margins: Vec<f64>,
}

/// Dispatches on `problem.objective`.
pub fn solve(problem: &SynthesisProblem) -> Result<SynthesisResult> {
    match problem.objective {
        Objective::Rank => solve_min_rank(problem),
        Objective::Sensor => solve_sensor_norm(problem),
        Objective::Actuator => solve_actuator_norm(problem),
        Objective::Multipair => solve_multi_pair_rank(problem),
    }
}

/// Reweighted nuclear-norm minimization of `Phi_uy`.
pub fn solve_min_rank(problem: &SynthesisProblem) -> Result<SynthesisResult> {
    let setup = Setup::new(problem, false)?;
    let (rows, cols) = (setup.ops.input_dim(), setup.ops.output_dim());
    let (nu, ny) = (setup.ops.nu, setup.ops.ny);
    let layout = setup.layout;
    let block = NuclearBlock {
        rows,
        cols,
        entry: Box::new(move |i, j| (j / ny <= i / nu).then(|| layout.phi_uy(i, j))),
    };
    run_reweighted(problem, &setup, Objective::Rank, Penalty::Nuclear(vec![block]))
}

/// Reweighted column-group norm of `Phi_uy` (one group per sensor sample).
pub fn solve_sensor_norm(problem: &SynthesisProblem) -> Result<SynthesisResult> {
    let setup = Setup::new(problem, false)?;
    let (rows, cols) = (setup.ops.input_dim(), setup.ops.output_dim());
    let (nu, ny) = (setup.ops.nu, setup.ops.ny);
    let groups = (0..cols)
        .map(|j| (0..rows).filter(|&i| j / ny <= i / nu).map(|i| setup.layout.phi_uy(i, j)).collect())
        .collect();
    run_reweighted(problem, &setup, Objective::Sensor, Penalty::Group(groups))
}

/// Reweighted row-group norm of `Phi_uy` (one group per actuator sample).
pub fn solve_actuator_norm(problem: &SynthesisProblem) -> Result<SynthesisResult> {
    let setup = Setup::new(problem, false)?;
    let (rows, cols) = (setup.ops.input_dim(), setup.ops.output_dim());
    let (nu, ny) = (setup.ops.nu, setup.ops.ny);
    let groups = (0..rows)
        .map(|i| (0..cols).filter(|&j| j / ny <= i / nu).map(|j| setup.layout.phi_uy(i, j)).collect())
        .collect();
    run_reweighted(problem, &setup, Objective::Actuator, Penalty::Group(groups))
}

/// Sum of reweighted nuclear norms of every scalar sensor-to-actuator channel,
/// with sensors barred from sharing measurements.
pub fn solve_multi_pair_rank(problem: &SynthesisProblem) -> Result<SynthesisResult> {
    let setup = Setup::new(problem, true)?;
    let (nu, ny) = (setup.ops.nu, setup.ops.ny);
    let n = setup.ops.horizon + 1;
    let mut blocks = Vec::with_capacity(nu * ny);
    for i in 0..nu {
        for j in 0..ny {
            let layout = setup.layout;
            blocks.push(NuclearBlock {
                rows: n,
                cols: n,
                entry: Box::new(move |t, tau| (tau <= t).then(|| layout.phi_uy(t * nu + i, tau * ny + j))),
            });
        }
    }
    run_reweighted(problem, &setup, Objective::Multipair, Penalty::Nuclear(blocks))
}

/// Closed-loop responses of `k_eps` and the best Farkas margins for them.
pub fn recheck_feasibility(k_eps: &BlockLowerTriangular, problem: &SynthesisProblem) -> Result<FeasibilityReport> {
    problem.safety.validate(&problem.system)?;
    let ops = lift(&problem.system);
    let resp = response_from_controller(k_eps, &ops)?;
    let phi_tilde = drop_terminal_noise_columns(&extract_phi_tilde(&resp), ops.ny, problem.options.feasibility_tol)?;
    let (noise, safe) = build_noise_and_safe_sets(&problem.safety);
    let settings = BackendSettings::with_tol(problem.options.solver_tol);
    let (margins, _) = containment_margins(&noise, &safe, &phi_tilde, &settings)?;
    let worst_margin = margins.min();
    Ok(FeasibilityReport {
        feasible: worst_margin >= -problem.options.feasibility_tol,
        worst_margin,
        margins: margins.iter().copied().collect(),
    })
}

/// Lifted operators, decision layout and constraints shared by all objectives.
struct Setup {
    ops: LiftedOperators,
    layout: DecisionLayout,
    noise: ProductPolytope,
    /// Safe set shrunk by the constraint back-off.
    tightened: ProductPolytope,
    constraints: AffineConstraintSet,
    base: ConicProgram,
}

impl Setup {
    fn new(problem: &SynthesisProblem, isolate_sensors: bool) -> Result<Self> {
        problem.options.validate()?;
        problem.safety.validate(&problem.system)?;
        let ops = lift(&problem.system);
        let (noise, safe) = build_noise_and_safe_sets(&problem.safety);
        let layout = DecisionLayout::new(&ops, safe.num_constraints(), noise.num_constraints());
        let mut constraints = assemble_sls_equalities(&ops, &layout);
        let tightened = safe.tightened(problem.options.constraint_backoff)?;
        constraints.append(assemble_farkas_constraints(&noise, &tightened, &layout)?);
        if isolate_sensors {
            constraints.append(assemble_sensor_isolation(&ops, &layout));
        }
        let mut base = ConicProgram::new(layout.len());
        // implied by the other three response constraints; kept for the residual check
        base.add_constraints(&constraints.without_equality_group(groups::STATE_RIGHT));
        Ok(Self { ops, layout, noise, tightened, constraints, base })
    }
}

/// Matrix whose nuclear norm is penalized; `entry` gives the variable of
/// each entry, `None` for structural zeros.
struct NuclearBlock {
    rows: usize,
    cols: usize,
    entry: Box<dyn Fn(usize, usize) -> Option<usize>>,
}

impl NuclearBlock {
    fn value(&self, x: &[f64]) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| (self.entry)(i, j).map_or(0.0, |v| x[v]))
    }
}

enum Penalty {
    Nuclear(Vec<NuclearBlock>),
    /// Variables of each group.
    Group(Vec<Vec<usize>>),
}

/// Symmetric positive definite weight with its inverse.
#[derive(Clone)]
struct Weight {
    w: Matrix,
    w_inv: Matrix,
}

impl Weight {
    fn identity(n: usize) -> Self {
        Self { w: Matrix::identity(n, n), w_inv: Matrix::identity(n, n) }
    }

    /// `(Y + delta I)^{-1/2}` and its inverse; also returns `log det(Y + delta I)`.
    fn from_gram(y: &Matrix, delta: f64) -> (Self, f64) {
        let n = y.nrows();
        let sym = (y + y.transpose()) * 0.5 + Matrix::identity(n, n) * delta;
        let eig = sym.symmetric_eigen();
        // rounding can push tiny eigenvalues of Y below zero
        let vals = eig.eigenvalues.map(|v| v.max(delta * 0.5));
        let q = &eig.eigenvectors;
        let w = q * Matrix::from_diagonal(&vals.map(|v| 1.0 / v.sqrt())) * q.transpose();
        let w_inv = q * Matrix::from_diagonal(&vals.map(f64::sqrt)) * q.transpose();
        (Self { w, w_inv }, vals.iter().map(|v| v.ln()).sum())
    }
}

struct NuclearState {
    left: Weight,
    right: Weight,
}

impl NuclearState {
    /// `||W1 X W2||_*` and the majorizer's gram factors of `X`.
    fn evaluate(&self, x: &Matrix) -> (f64, Matrix, Matrix) {
        let weighted = &self.left.w * x * &self.right.w;
        let svd = weighted.svd(true, true);
        let u = svd.u.expect("requested");
        let v_t = svd.v_t.expect("requested");
        let s = Matrix::from_diagonal(&svd.singular_values);
        // minimizers of the epigraph program, mapped back through the weights
        let p = &self.left.w_inv * &u * &s * u.transpose() * &self.left.w_inv;
        let q = &self.right.w_inv * v_t.transpose() * &s * &v_t * &self.right.w_inv;
        (svd.singular_values.sum(), p, q)
    }
}

/// Adds `min (tr(W1^2 P) + tr(W2^2 Q)) / 2` s.t. `[P X; X' Q] >= 0`.
fn add_nuclear_term(prog: &mut ConicProgram, block: &NuclearBlock, state: &NuclearState) {
    let (m, n) = (block.rows, block.cols);
    let p0 = prog.add_variables(m * (m + 1) / 2);
    let q0 = prog.add_variables(n * (n + 1) / 2);
    let w1sq = &state.left.w * &state.left.w;
    let w2sq = &state.right.w * &state.right.w;
    for b in 0..m {
        for a in 0..=b {
            let scale = if a == b { 0.5 } else { 1.0 };
            prog.objective[p0 + PsdConstraint::index(a, b)] = scale * w1sq[(a, b)];
        }
    }
    for b in 0..n {
        for a in 0..=b {
            let scale = if a == b { 0.5 } else { 1.0 };
            prog.objective[q0 + PsdConstraint::index(a, b)] = scale * w2sq[(a, b)];
        }
    }
    let dim = m + n;
    let mut upper = vec![AffineExpr::constant(0.0); dim * (dim + 1) / 2];
    for b in 0..dim {
        for a in 0..=b {
            let expr = if b < m {
                AffineExpr::var(p0 + PsdConstraint::index(a, b))
            } else if a >= m {
                AffineExpr::var(q0 + PsdConstraint::index(a - m, b - m))
            } else {
                match (block.entry)(a, b - m) {
                    Some(v) => AffineExpr::var(v),
                    None => continue,
                }
            };
            upper[PsdConstraint::index(a, b)] = expr;
        }
    }
    prog.add_psd(PsdConstraint { dim, upper });
}

/// Adds `min sum_g w_g t_g` s.t. `t_g >= ||x_g||_2`.
fn add_group_terms(prog: &mut ConicProgram, groups: &[Vec<usize>], weights: &[f64]) {
    let t0 = prog.add_variables(groups.len());
    for (g, members) in groups.iter().enumerate() {
        prog.objective[t0 + g] = weights[g];
        let mut cone = vec![AffineExpr::var(t0 + g)];
        cone.extend(members.iter().map(|&v| AffineExpr::var(v)));
        prog.add_second_order(cone);
    }
}

fn group_norm(x: &[f64], members: &[usize]) -> f64 {
    members.iter().map(|&v| x[v] * x[v]).sum::<f64>().sqrt()
}

/// Entries of `values` above `epsilon` times the largest one and above the
/// absolute `floor`, below which solver output is indistinguishable from zero.
fn count_above(values: &[f64], epsilon: f64, floor: f64) -> usize {
    let max = values.iter().copied().fold(0.0, f64::max);
    let threshold = (epsilon * max).max(floor);
    values.iter().filter(|&&v| v > threshold).count()
}

fn row_norms(m: &Matrix) -> Vec<f64> {
    m.row_iter().map(|r| r.norm()).collect()
}

fn column_norms(m: &Matrix) -> Vec<f64> {
    m.column_iter().map(|c| c.norm()).collect()
}

/// Per-channel ranks, each thresholded against `epsilon * sigma_max(Phi_uy)`
/// so all channels share one truncation level.
fn pair_ranks(phi_uy: &BlockLowerTriangular, epsilon: f64, floor: f64) -> Result<Vec<PairRank>> {
    let scale = singular_values(phi_uy.data()).first().copied().unwrap_or(0.0);
    let threshold = (epsilon * scale).max(floor);
    let mut out = Vec::new();
    for i in 0..phi_uy.block_rows() {
        for j in 0..phi_uy.block_cols() {
            let sv = singular_values(&extract_pair_response(phi_uy, i, j)?);
            let rank = sv.iter().filter(|&&s| s > threshold).count();
            out.push(PairRank { actuator: i, sensor: j, rank });
        }
    }
    Ok(out)
}

fn message_count(objective: Objective, phi_uy: &BlockLowerTriangular, epsilon: f64, floor: f64) -> Result<usize> {
    Ok(match objective {
        Objective::Rank => count_above(&singular_values(phi_uy.data()), epsilon, floor),
        Objective::Sensor => count_above(&column_norms(phi_uy.data()), epsilon, floor),
        Objective::Actuator => count_above(&row_norms(phi_uy.data()), epsilon, floor),
        Objective::Multipair => pair_ranks(phi_uy, epsilon, floor)?.iter().map(|p| p.rank).sum(),
    })
}

fn check_status(sol: &ConicSolution, iteration: usize) -> Result<()> {
    match sol.status {
        SolveStatus::Solved | SolveStatus::AlmostSolved => Ok(()),
        SolveStatus::Infeasible => Err(Error::Infeasible { status: sol.detail.clone() }),
        _ => Err(Error::SolverFailure { iteration, status: sol.detail.clone() }),
    }
}

fn run_reweighted(
    problem: &SynthesisProblem,
    setup: &Setup,
    objective: Objective,
    penalty: Penalty,
) -> Result<SynthesisResult> {
    let started = Instant::now();
    let opts = &problem.options;
    let settings = BackendSettings::with_tol(opts.solver_tol);
    let layout = &setup.layout;

    let mut nuclear: Vec<NuclearState> = match &penalty {
        Penalty::Nuclear(blocks) => blocks
            .iter()
            .map(|b| NuclearState { left: Weight::identity(b.rows), right: Weight::identity(b.cols) })
            .collect(),
        Penalty::Group(_) => Vec::new(),
    };
    let mut group_weights: Vec<f64> = match &penalty {
        Penalty::Group(g) => vec![1.0; g.len()],
        Penalty::Nuclear(_) => Vec::new(),
    };

    let mut records = Vec::new();
    let mut objective_trace = Vec::new();
    let mut weighted_trace = Vec::new();
    let mut count_trace: Vec<usize> = Vec::new();
    let mut last_x = Vec::new();
    let mut stopped_early = false;

    for iteration in 1..=opts.max_reweight_iters {
        let mut prog = setup.base.clone();
        match &penalty {
            Penalty::Nuclear(blocks) => {
                for (block, state) in blocks.iter().zip(&nuclear) {
                    add_nuclear_term(&mut prog, block, state);
                }
            }
            Penalty::Group(groups) => add_group_terms(&mut prog, groups, &group_weights),
        }
        let sol = conic::solve(&prog, &settings);
        log::info!(
            "{} iteration {iteration}: {} in {:.2}s ({} ipm iterations)",
            objective.name(),
            sol.detail,
            sol.solve_time,
            sol.iterations
        );
        check_status(&sol, iteration)?;
        let x = &sol.x[..layout.len()];

        let (weighted, merit) = match &penalty {
            Penalty::Nuclear(blocks) => {
                let mut weighted = 0.0;
                let mut merit = 0.0;
                for (block, state) in blocks.iter().zip(nuclear.iter_mut()) {
                    let (value, p, q) = state.evaluate(&block.value(x));
                    weighted += value;
                    let (left, ld_left) = Weight::from_gram(&p, opts.delta);
                    let (right, ld_right) = Weight::from_gram(&q, opts.delta);
                    merit += ld_left + ld_right;
                    *state = NuclearState { left, right };
                }
                (weighted, merit)
            }
            Penalty::Group(groups) => {
                let norms: Vec<f64> = groups.iter().map(|g| group_norm(x, g)).collect();
                let weighted = norms.iter().zip(&group_weights).map(|(n, w)| n * w).sum();
                let merit = norms.iter().map(|n| (n + opts.delta).ln()).sum();
                group_weights = norms.iter().map(|n| 1.0 / (n + opts.delta)).collect();
                (weighted, merit)
            }
        };
        let phi_uy = layout.response(x, f64::INFINITY)?.phi_uy;
        let count = message_count(objective, &phi_uy, opts.epsilon, opts.feasibility_tol)?;
        objective_trace.push(merit);
        weighted_trace.push(weighted);
        count_trace.push(count);
        records.push(IterationRecord { iteration, solver: sol.clone(), weighted_objective: weighted, merit, message_count: count });
        last_x = x.to_vec();

        // count unchanged over the last two reweightings
        if iteration < opts.max_reweight_iters && count_trace.len() >= 3 {
            let tail = &count_trace[count_trace.len() - 3..];
            if tail.iter().all(|&c| c == tail[0]) {
                stopped_early = true;
                break;
            }
        }
    }

    finish(problem, setup, objective, &last_x, records, objective_trace, weighted_trace, count_trace, stopped_early, started)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    problem: &SynthesisProblem,
    setup: &Setup,
    objective: Objective,
    x: &[f64],
    iterations: Vec<IterationRecord>,
    objective_trace: Vec<f64>,
    weighted_trace: Vec<f64>,
    count_trace: Vec<usize>,
    stopped_early: bool,
    started: Instant,
) -> Result<SynthesisResult> {
    let opts = &problem.options;
    let tol = opts.feasibility_tol;
    let layout = &setup.layout;
    let ops = &setup.ops;

    let (eq_viol, le_viol) = setup.constraints.max_violation(x);
    let response = layout.response(x, tol)?;
    let (left, right) = sls_residuals(&response, ops);
    let sls_residual = left.max(right);
    let lambda = Matrix::from_fn(layout.lambda_rows, layout.lambda_cols, |i, j| x[layout.lambda(i, j)]);
    let certificate = FarkasCertificate { lambda };
    let phi_tilde = drop_terminal_noise_columns(&extract_phi_tilde(&response), ops.ny, tol)?;
    let (lambda_min, farkas_match_residual, farkas_bound_violation) =
        certificate.residuals(&setup.noise, &setup.tightened, &phi_tilde);
    let worst = eq_viol.max(le_viol).max(sls_residual).max(-lambda_min).max(farkas_match_residual).max(farkas_bound_violation);
    if !(worst <= tol) {
        return Err(Error::Feasibility { residual: worst, tolerance: tol });
    }
    let k = controller_from_response(&response, ops, tol)?;

    let sv = singular_values(response.phi_uy.data());
    let rank_phi_uy = count_above(&sv, opts.epsilon, tol);
    let rank_k = count_above(&singular_values(k.data()), opts.epsilon, tol);
    let pair_ranks = if objective == Objective::Multipair {
        pair_ranks(&response.phi_uy, opts.epsilon, tol)?
    } else {
        Vec::new()
    };
    let message_count = message_count(objective, &response.phi_uy, opts.epsilon, tol)?;
    let row_norms = row_norms(response.phi_uy.data());
    let column_norms = column_norms(response.phi_uy.data());

    Ok(SynthesisResult {
        objective,
        k,
        certificate,
        singular_values: sv,
        row_norms,
        column_norms,
        pair_ranks,
        objective_trace,
        weighted_trace,
        count_trace,
        message_count,
        epsilon: opts.epsilon,
        diagnostics: Diagnostics {
            iterations,
            sls_residual,
            lambda_min,
            farkas_match_residual,
            farkas_bound_violation,
            rank_phi_uy,
            rank_k,
            stopped_early,
            wall_time: started.elapsed().as_secs_f64(),
        },
        response,
    })
}
