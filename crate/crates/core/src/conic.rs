//! Conic program model and its interior-point backend.
//!
//! Programs are stated over a single decision vector `x`:
//!
//! ```text
//! minimise   c' x
//! subject to a_i' x  = b_i         (equalities)
//!            a_j' x <= b_j         (inequalities)
//!            e_0(x) >= ||(e_1(x), ..., e_k(x))||      (second-order cones)
//!            [e_ij(x)] positive semidefinite          (PSD cones)
//! ```
//!
//! where `e(x)` are affine expressions. Before the backend sees a program,
//! equality rows with a single free variable are used to fix that variable
//! and substitute it everywhere (repeated until nothing changes); rows left
//! without free variables are checked for consistency and dropped. This
//! removes the structural zero pattern of block-lower-triangular unknowns.

use std::time::Instant;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use serde::Serialize;

/// Environment variable that turns on interior-point iteration logging.
pub const VERBOSE_ENV: &str = "COMMSYNTH_SOLVER_VERBOSE";

/// `sum coef * x[var]` compared against `rhs`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LinearRow {
    pub terms: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl LinearRow {
    pub fn new(terms: Vec<(usize, f64)>, rhs: f64) -> Self {
        Self { terms, rhs }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(i, c)| c * x[i]).sum()
    }

    /// `lhs - rhs` at `x`.
    pub fn residual(&self, x: &[f64]) -> f64 {
        self.eval(x) - self.rhs
    }
}

/// Affine function `sum coef * x[var] + constant`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AffineExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl AffineExpr {
    pub fn var(i: usize) -> Self {
        Self { terms: vec![(i, 1.0)], constant: 0.0 }
    }

    pub fn constant(c: f64) -> Self {
        Self { terms: Vec::new(), constant: c }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(i, c)| c * x[i]).sum::<f64>()
    }
}

/// Named contiguous range of rows inside an [`AffineConstraintSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct RowGroup {
    pub name: String,
    pub equalities: std::ops::Range<usize>,
    pub inequalities: std::ops::Range<usize>,
}

/// Linear equalities and inequalities over a stacked decision vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AffineConstraintSet {
    pub num_vars: usize,
    pub equalities: Vec<LinearRow>,
    pub inequalities: Vec<LinearRow>,
    pub groups: Vec<RowGroup>,
}

impl AffineConstraintSet {
    pub fn new(num_vars: usize) -> Self {
        Self { num_vars, ..Default::default() }
    }

    /// Starts a named group; rows pushed until the next call belong to it.
    pub fn begin_group(&mut self, name: &str) {
        let (e, i) = (self.equalities.len(), self.inequalities.len());
        self.groups.push(RowGroup { name: name.to_string(), equalities: e..e, inequalities: i..i });
    }

    fn extend_group(&mut self) {
        let (e, i) = (self.equalities.len(), self.inequalities.len());
        if let Some(g) = self.groups.last_mut() {
            g.equalities.end = e;
            g.inequalities.end = i;
        }
    }

    pub fn push_eq(&mut self, row: LinearRow) {
        debug_assert!(row.terms.iter().all(|&(i, _)| i < self.num_vars));
        self.equalities.push(row);
        self.extend_group();
    }

    pub fn push_le(&mut self, row: LinearRow) {
        debug_assert!(row.terms.iter().all(|&(i, _)| i < self.num_vars));
        self.inequalities.push(row);
        self.extend_group();
    }

    pub fn group(&self, name: &str) -> Option<&RowGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn append(&mut self, other: AffineConstraintSet) {
        assert_eq!(self.num_vars, other.num_vars, "constraint sets over different vectors");
        let (e0, i0) = (self.equalities.len(), self.inequalities.len());
        self.equalities.extend(other.equalities);
        self.inequalities.extend(other.inequalities);
        for g in other.groups {
            self.groups.push(RowGroup {
                name: g.name,
                equalities: g.equalities.start + e0..g.equalities.end + e0,
                inequalities: g.inequalities.start + i0..g.inequalities.end + i0,
            });
        }
    }

    /// Removes the equality rows of group `name` (used for rows implied by others).
    pub fn without_equality_group(&self, name: &str) -> AffineConstraintSet {
        let Some(g) = self.group(name) else { return self.clone() };
        let removed = g.equalities.clone();
        let mut out = AffineConstraintSet::new(self.num_vars);
        for group in &self.groups {
            out.begin_group(&group.name);
            if group.name != name {
                for r in group.equalities.clone() {
                    out.push_eq(self.equalities[r].clone());
                }
            }
            for r in group.inequalities.clone() {
                out.push_le(self.inequalities[r].clone());
            }
        }
        debug_assert_eq!(out.equalities.len(), self.equalities.len() - removed.len());
        out
    }

    /// Largest equality residual and largest inequality violation at `x`.
    pub fn max_violation(&self, x: &[f64]) -> (f64, f64) {
        let eq = self.equalities.iter().map(|r| r.residual(x).abs()).fold(0.0, f64::max);
        let le = self.inequalities.iter().map(|r| r.residual(x)).fold(0.0, f64::max);
        (eq, le)
    }

    /// Largest equality residual over the rows of group `name`.
    pub fn group_residual(&self, name: &str, x: &[f64]) -> Option<f64> {
        let g = self.group(name)?;
        Some(
            self.equalities[g.equalities.clone()]
                .iter()
                .map(|r| r.residual(x).abs())
                .fold(0.0, f64::max),
        )
    }
}

/// Symmetric matrix of affine expressions constrained to be PSD; `upper`
/// holds the upper triangle column by column (`(0,0), (0,1), (1,1), (0,2), ...`).
#[derive(Debug, Clone, PartialEq)]
pub struct PsdConstraint {
    pub dim: usize,
    pub upper: Vec<AffineExpr>,
}

impl PsdConstraint {
    pub fn index(i: usize, j: usize) -> usize {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        j * (j + 1) / 2 + i
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConicProgram {
    pub num_vars: usize,
    pub objective: Vec<f64>,
    pub equalities: Vec<LinearRow>,
    pub inequalities: Vec<LinearRow>,
    pub second_order: Vec<Vec<AffineExpr>>,
    pub psd: Vec<PsdConstraint>,
}

impl ConicProgram {
    pub fn new(num_vars: usize) -> Self {
        Self { num_vars, objective: vec![0.0; num_vars], ..Default::default() }
    }

    /// Appends fresh variables, returning the index of the first.
    pub fn add_variables(&mut self, count: usize) -> usize {
        let first = self.num_vars;
        self.num_vars += count;
        self.objective.resize(self.num_vars, 0.0);
        first
    }

    pub fn add_constraints(&mut self, set: &AffineConstraintSet) {
        assert!(set.num_vars <= self.num_vars);
        self.equalities.extend(set.equalities.iter().cloned());
        self.inequalities.extend(set.inequalities.iter().cloned());
    }

    /// `exprs[0] >= ||exprs[1..]||_2`.
    pub fn add_second_order(&mut self, exprs: Vec<AffineExpr>) {
        assert!(!exprs.is_empty());
        self.second_order.push(exprs);
    }

    pub fn add_psd(&mut self, c: PsdConstraint) {
        assert_eq!(c.upper.len(), c.dim * (c.dim + 1) / 2);
        self.psd.push(c);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SolveStatus {
    Solved,
    /// Solved to reduced accuracy.
    AlmostSolved,
    Infeasible,
    Unbounded,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConicSolution {
    pub status: SolveStatus,
    /// Backend status string.
    pub detail: String,
    #[serde(skip)]
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: u32,
    pub solve_time: f64,
    pub fixed_by_presolve: usize,
    pub backend_vars: usize,
    pub backend_rows: usize,
}

impl ConicSolution {
    pub fn is_solved(&self) -> bool {
        matches!(self.status, SolveStatus::Solved | SolveStatus::AlmostSolved)
    }
}

/// Solver settings passed to a backend.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackendSettings {
    pub tol: f64,
    pub max_iter: u32,
    pub verbose: bool,
}

impl BackendSettings {
    pub fn with_tol(tol: f64) -> Self {
        let verbose = std::env::var(VERBOSE_ENV).is_ok_and(|v| !v.is_empty() && v != "0");
        Self { tol, max_iter: 300, verbose }
    }
}

/// A conic solver that can handle the cones of [`ConicProgram`].
pub trait ConicBackend {
    fn solve(&self, program: &ConicProgram, settings: &BackendSettings) -> ConicSolution;
}

/// Interior-point backend built on Clarabel.
#[derive(Debug, Clone, Copy, Default)]
pub struct ClarabelBackend;

/// Solves `program` with the default backend.
pub fn solve(program: &ConicProgram, settings: &BackendSettings) -> ConicSolution {
    ClarabelBackend.solve(program, settings)
}

struct Presolved {
    /// Reduced program over free variables.
    program: ConicProgram,
    /// Original variable -> reduced index, or fixed value.
    map: Vec<VarState>,
    objective_offset: f64,
}

#[derive(Debug, Clone, Copy)]
enum VarState {
    Free(usize),
    Fixed(f64),
}

enum PresolveOutcome {
    Reduced(Presolved),
    Infeasible(String),
}

fn consistency_tol(rhs: f64) -> f64 {
    1e-9 * (1.0 + rhs.abs())
}

fn presolve(p: &ConicProgram) -> PresolveOutcome {
    let n = p.num_vars;
    let mut fixed: Vec<Option<f64>> = vec![None; n];
    let mut consumed = vec![false; p.equalities.len()];

    // rows touching each variable, to revisit after a fix
    let mut rows_of: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (r, row) in p.equalities.iter().enumerate() {
        for &(v, _) in &row.terms {
            rows_of[v].push(r);
        }
    }
    let reduce = |row: &LinearRow, fixed: &[Option<f64>]| {
        let mut rhs = row.rhs;
        let mut free: Vec<(usize, f64)> = Vec::new();
        for &(v, c) in &row.terms {
            match fixed[v] {
                Some(val) => rhs -= c * val,
                None => match free.iter_mut().find(|(u, _)| *u == v) {
                    Some(slot) => slot.1 += c,
                    None => free.push((v, c)),
                },
            }
        }
        free.retain(|&(_, c)| c != 0.0);
        (free, rhs)
    };

    let mut queue: Vec<usize> = (0..p.equalities.len()).collect();
    while let Some(r) = queue.pop() {
        if consumed[r] {
            continue;
        }
        let (free, rhs) = reduce(&p.equalities[r], &fixed);
        match free.len() {
            0 => {
                if rhs.abs() > consistency_tol(p.equalities[r].rhs) {
                    return PresolveOutcome::Infeasible(format!(
                        "equality row {r} reduces to 0 = {rhs:e}"
                    ));
                }
                consumed[r] = true;
            }
            1 => {
                let (v, c) = free[0];
                fixed[v] = Some(rhs / c);
                consumed[r] = true;
                queue.extend(rows_of[v].iter().copied().filter(|&q| !consumed[q]));
            }
            _ => {}
        }
    }

    let mut map = Vec::with_capacity(n);
    let mut next = 0;
    for f in &fixed {
        map.push(match f {
            Some(v) => VarState::Fixed(*v),
            None => {
                next += 1;
                VarState::Free(next - 1)
            }
        });
    }
    let mut out = ConicProgram::new(next);
    let mut objective_offset = 0.0;
    for (i, &c) in p.objective.iter().enumerate() {
        match map[i] {
            VarState::Free(j) => out.objective[j] += c,
            VarState::Fixed(v) => objective_offset += c * v,
        }
    }
    let map_row = |row: &LinearRow| -> LinearRow {
        let mut rhs = row.rhs;
        let mut terms = Vec::with_capacity(row.terms.len());
        for &(v, c) in &row.terms {
            match map[v] {
                VarState::Free(j) => terms.push((j, c)),
                VarState::Fixed(val) => rhs -= c * val,
            }
        }
        LinearRow { terms, rhs }
    };
    let map_expr = |e: &AffineExpr| -> AffineExpr {
        let mut constant = e.constant;
        let mut terms = Vec::with_capacity(e.terms.len());
        for &(v, c) in &e.terms {
            match map[v] {
                VarState::Free(j) => terms.push((j, c)),
                VarState::Fixed(val) => constant += c * val,
            }
        }
        AffineExpr { terms, constant }
    };
    for (r, row) in p.equalities.iter().enumerate() {
        if !consumed[r] {
            out.equalities.push(map_row(row));
        }
    }
    for row in &p.inequalities {
        let m = map_row(row);
        if m.terms.is_empty() {
            if m.rhs < -consistency_tol(row.rhs) {
                return PresolveOutcome::Infeasible(format!("constant inequality 0 <= {:e}", m.rhs));
            }
        } else {
            out.inequalities.push(m);
        }
    }
    out.second_order = p.second_order.iter().map(|c| c.iter().map(map_expr).collect()).collect();
    out.psd = p
        .psd
        .iter()
        .map(|c| PsdConstraint { dim: c.dim, upper: c.upper.iter().map(map_expr).collect() })
        .collect();
    PresolveOutcome::Reduced(Presolved { program: out, map, objective_offset })
}

impl Presolved {
    fn expand(&self, reduced: &[f64]) -> Vec<f64> {
        self.map
            .iter()
            .map(|s| match *s {
                VarState::Free(j) => reduced[j],
                VarState::Fixed(v) => v,
            })
            .collect()
    }
}

impl ConicBackend for ClarabelBackend {
    fn solve(&self, program: &ConicProgram, settings: &BackendSettings) -> ConicSolution {
        let start = Instant::now();
        let pre = match presolve(program) {
            PresolveOutcome::Reduced(p) => p,
            PresolveOutcome::Infeasible(msg) => {
                return ConicSolution {
                    status: SolveStatus::Infeasible,
                    detail: format!("presolve: {msg}"),
                    x: vec![0.0; program.num_vars],
                    objective: f64::NAN,
                    iterations: 0,
                    solve_time: start.elapsed().as_secs_f64(),
                    fixed_by_presolve: 0,
                    backend_vars: 0,
                    backend_rows: 0,
                }
            }
        };
        let fixed_count = pre.map.iter().filter(|s| matches!(s, VarState::Fixed(_))).count();
        let rp = &pre.program;

        // A x + s = b, s in K
        let mut rows = Vec::new();
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        let mut b = Vec::new();
        let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
        let mut push_row = |terms: &[(usize, f64)], scale: f64, rhs: f64, b: &mut Vec<f64>| {
            let r = b.len();
            for &(j, c) in terms {
                rows.push(r);
                cols.push(j);
                vals.push(scale * c);
            }
            b.push(rhs);
        };
        for row in &rp.equalities {
            push_row(&row.terms, 1.0, row.rhs, &mut b);
        }
        if !rp.equalities.is_empty() {
            cones.push(SupportedConeT::ZeroConeT(rp.equalities.len()));
        }
        for row in &rp.inequalities {
            push_row(&row.terms, 1.0, row.rhs, &mut b);
        }
        if !rp.inequalities.is_empty() {
            cones.push(SupportedConeT::NonnegativeConeT(rp.inequalities.len()));
        }
        for soc in &rp.second_order {
            for e in soc {
                push_row(&e.terms, -1.0, e.constant, &mut b);
            }
            cones.push(SupportedConeT::SecondOrderConeT(soc.len()));
        }
        for psd in &rp.psd {
            for j in 0..psd.dim {
                for i in 0..=j {
                    let e = &psd.upper[PsdConstraint::index(i, j)];
                    let s = if i == j { 1.0 } else { std::f64::consts::SQRT_2 };
                    push_row(&e.terms, -s, s * e.constant, &mut b);
                }
            }
            cones.push(SupportedConeT::PSDTriangleConeT(psd.dim));
        }
        let m = b.len();
        let n = rp.num_vars;
        let a = CscMatrix::new_from_triplets(m, n, rows, cols, vals);
        let p_mat = CscMatrix::<f64>::zeros((n, n));

        let clarabel_settings = DefaultSettingsBuilder::default()
            .verbose(settings.verbose)
            .max_iter(settings.max_iter)
            .tol_gap_abs(settings.tol)
            .tol_gap_rel(settings.tol)
            .tol_feas(settings.tol)
            .tol_infeas_abs(settings.tol)
            .tol_infeas_rel(settings.tol)
            .direct_solve_method("faer".to_string())
            .build()
            .expect("valid solver settings");

        let failed = |detail: String| ConicSolution {
            status: SolveStatus::Failed,
            detail,
            x: vec![0.0; program.num_vars],
            objective: f64::NAN,
            iterations: 0,
            solve_time: start.elapsed().as_secs_f64(),
            fixed_by_presolve: fixed_count,
            backend_vars: n,
            backend_rows: m,
        };
        let mut solver = match DefaultSolver::new(&p_mat, &rp.objective, &a, &b, &cones, clarabel_settings) {
            Ok(s) => s,
            Err(e) => return failed(format!("setup: {e}")),
        };
        solver.solve();
        let sol = &solver.solution;
        let status = match sol.status {
            SolverStatus::Solved => SolveStatus::Solved,
            SolverStatus::AlmostSolved => SolveStatus::AlmostSolved,
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => SolveStatus::Infeasible,
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => SolveStatus::Unbounded,
            _ => SolveStatus::Failed,
        };
        let x = pre.expand(&sol.x);
        ConicSolution {
            status,
            detail: format!("{:?}", sol.status),
            objective: sol.obj_val + pre.objective_offset,
            x,
            iterations: sol.iterations,
            solve_time: start.elapsed().as_secs_f64(),
            fixed_by_presolve: fixed_count,
            backend_vars: n,
            backend_rows: m,
        }
    }
}
