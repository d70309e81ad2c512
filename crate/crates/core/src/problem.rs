//! Plant, horizon, safety sets and the problem file.
//!
//! The problem file is a JSON document (`"format": 1`):
//!
//! ```json
//! {
//!   "format": 1,
//!   "horizon": 20,
//!   "dims": { "nx": 4, "nu": 2, "ny": 2 },
//!   "dynamics": {
//!     "A": [[1, 0, 1, 0], [0, 1, 0, 1], [0, 0, 1, 0], [0, 0, 0, 1]],
//!     "B": { "per_step": [ [[0.5, 0], ...], ... ] },
//!     "C": [[1, 0, 0, 0], [0, 1, 0, 0]]
//!   },
//!   "constraints": {
//!     "x0": { "box": { "lower": [-8, -8, 0, 0], "upper": [-6, -6, 0, 0] } },
//!     "x": { "default": { "box": { ... } }, "at": [ { "t": 10, "set": { "box": { ... } } } ] },
//!     "u": { "box": { "lower": [-2, -2], "upper": [2, 2] } },
//!     "w": { "per_step": [ { "hpolytope": { "H": [[...]], "h": [...] } }, ... ] },
//!     "v": { "box": { ... } }
//!   },
//!   "objective": "rank",
//!   "options": { "delta": 0.01, "max_reweight_iters": 8 }
//! }
//! ```
//!
//! A dynamics entry is either a single matrix broadcast over time or
//! `{"per_step": [...]}` with `T` entries for `A`, `B` and `T + 1` entries for
//! `C`. A constraint entry is a single set (broadcast), `{"per_step": [...]}`,
//! or `{"default": set, "at": [{"t": .., "set": ..}]}`. State sets are indexed
//! `t = 1..=T`; input and noise sets `t = 0..T`. `objective` and `options`
//! are optional.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{Matrix, Vector};

/// Current problem-file format version.
pub const FORMAT_VERSION: u32 = 1;

/// `x_{t+1} = A_t x_t + B_t u_t + w_t`, `y_t = C_t x_t + v_t` for `t = 0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeVaryingLinearSystem {
    horizon: usize,
    nx: usize,
    nu: usize,
    ny: usize,
    a: Vec<Matrix>,
    b: Vec<Matrix>,
    c: Vec<Matrix>,
}

impl TimeVaryingLinearSystem {
    /// `a` and `b` hold `T` matrices, `c` holds `T + 1`.
    pub fn new(
        horizon: usize,
        (nx, nu, ny): (usize, usize, usize),
        a: Vec<Matrix>,
        b: Vec<Matrix>,
        c: Vec<Matrix>,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::dim("horizon must be positive"));
        }
        if nx == 0 || nu == 0 || ny == 0 {
            return Err(Error::dim("state, input and output dimensions must be positive"));
        }
        check_sequence("A", &a, horizon, (nx, nx))?;
        check_sequence("B", &b, horizon, (nx, nu))?;
        check_sequence("C", &c, horizon + 1, (ny, nx))?;
        Ok(Self { horizon, nx, nu, ny, a, b, c })
    }

    /// Time-invariant plant over `horizon` steps.
    pub fn time_invariant(horizon: usize, a: Matrix, b: Matrix, c: Matrix) -> Result<Self> {
        let dims = (a.nrows(), b.ncols(), c.nrows());
        Self::new(horizon, dims, vec![a; horizon], vec![b; horizon], vec![c; horizon + 1])
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn nu(&self) -> usize {
        self.nu
    }
    pub fn ny(&self) -> usize {
        self.ny
    }
    pub fn a(&self, t: usize) -> &Matrix {
        &self.a[t]
    }
    pub fn b(&self, t: usize) -> &Matrix {
        &self.b[t]
    }
    pub fn c(&self, t: usize) -> &Matrix {
        &self.c[t]
    }
    pub fn a_seq(&self) -> &[Matrix] {
        &self.a
    }
    pub fn b_seq(&self) -> &[Matrix] {
        &self.b
    }
    pub fn c_seq(&self) -> &[Matrix] {
        &self.c
    }
}

fn check_sequence(name: &str, seq: &[Matrix], len: usize, shape: (usize, usize)) -> Result<()> {
    if seq.len() != len {
        return Err(Error::dim(format!("{name} has {} entries, expected {len}", seq.len())));
    }
    for (t, m) in seq.iter().enumerate() {
        if m.shape() != shape {
            return Err(Error::dim(format!(
                "{name}_{t} is {}x{}, expected {}x{}",
                m.nrows(),
                m.ncols(),
                shape.0,
                shape.1
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::dim(format!("{name}_{t} has non-finite entries")));
        }
    }
    Ok(())
}

/// Axis-aligned box `{p | lower <= p <= upper}`. Degenerate intervals are allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet {
    lower: Vector,
    upper: Vector,
}

impl BoxSet {
    pub fn new(lower: Vector, upper: Vector) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::dim(format!(
                "box bounds have lengths {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        if lower.iter().chain(upper.iter()).any(|v| !v.is_finite()) {
            return Err(Error::dim("box bounds must be finite"));
        }
        if let Some(i) = (0..lower.len()).find(|&i| lower[i] > upper[i]) {
            return Err(Error::EmptySet(format!(
                "box coordinate {i} has lower {} > upper {}",
                lower[i], upper[i]
            )));
        }
        Ok(Self { lower, upper })
    }

    pub fn from_slices(lower: &[f64], upper: &[f64]) -> Result<Self> {
        Self::new(Vector::from_column_slice(lower), Vector::from_column_slice(upper))
    }

    /// Symmetric box `[-r, r]^dim`.
    pub fn symmetric(dim: usize, radius: f64) -> Result<Self> {
        Self::new(Vector::from_element(dim, -radius), Vector::from_element(dim, radius))
    }

    pub fn lower(&self) -> &Vector {
        &self.lower
    }
    pub fn upper(&self) -> &Vector {
        &self.upper
    }
    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, p: &Vector) -> bool {
        p.len() == self.dim() && (0..p.len()).all(|i| self.lower[i] <= p[i] && p[i] <= self.upper[i])
    }

    pub fn to_hpolytope(&self) -> HPolytope {
        HPolytope::from_box(self)
    }
}

/// `{p | H p <= h}`.
#[derive(Debug, Clone, PartialEq)]
pub struct HPolytope {
    h_mat: Matrix,
    h_vec: Vector,
}

impl HPolytope {
    pub fn new(h_mat: Matrix, h_vec: Vector) -> Result<Self> {
        if h_mat.nrows() != h_vec.len() {
            return Err(Error::dim(format!(
                "H has {} rows but h has {} entries",
                h_mat.nrows(),
                h_vec.len()
            )));
        }
        if h_mat.iter().chain(h_vec.iter()).any(|v| !v.is_finite()) {
            return Err(Error::dim("H-representation must be finite"));
        }
        Ok(Self { h_mat, h_vec })
    }

    /// `H = [I; -I]`, `h = [upper; -lower]`.
    pub fn from_box(b: &BoxSet) -> Self {
        let d = b.dim();
        let mut h_mat = Matrix::zeros(2 * d, d);
        let mut h_vec = Vector::zeros(2 * d);
        for i in 0..d {
            h_mat[(i, i)] = 1.0;
            h_mat[(d + i, i)] = -1.0;
            h_vec[i] = b.upper[i];
            h_vec[d + i] = -b.lower[i];
        }
        Self { h_mat, h_vec }
    }

    /// Recognises the exact `[I; -I]` layout produced by [`HPolytope::from_box`].
    pub fn as_box(&self) -> Option<BoxSet> {
        let d = self.dim();
        if self.h_mat.nrows() != 2 * d {
            return None;
        }
        for i in 0..2 * d {
            for j in 0..d {
                let expected = match (i < d, i % d == j) {
                    (_, false) => 0.0,
                    (true, true) => 1.0,
                    (false, true) => -1.0,
                };
                if self.h_mat[(i, j)] != expected {
                    return None;
                }
            }
        }
        let upper = self.h_vec.rows(0, d).into_owned();
        let lower = -self.h_vec.rows(d, d).into_owned();
        BoxSet::new(lower, upper).ok()
    }

    pub fn h_mat(&self) -> &Matrix {
        &self.h_mat
    }
    pub fn h_vec(&self) -> &Vector {
        &self.h_vec
    }
    pub fn dim(&self) -> usize {
        self.h_mat.ncols()
    }
    pub fn num_constraints(&self) -> usize {
        self.h_mat.nrows()
    }

    /// `h - H p`; non-negative entries mean the constraint holds.
    pub fn margins(&self, p: &Vector) -> Vector {
        &self.h_vec - &self.h_mat * p
    }

    pub fn contains(&self, p: &Vector, tol: f64) -> bool {
        self.margins(p).iter().all(|&m| m >= -tol)
    }
}

/// Robust safety requirement over the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct SafetySpec {
    /// Initial set `X_0`.
    pub x0: HPolytope,
    /// `X_t` for `t = 1..=T` (index `t - 1`).
    pub x: Vec<HPolytope>,
    /// `U_t` for `t = 0..T`.
    pub u: Vec<HPolytope>,
    /// `W_t` for `t = 0..T`.
    pub w: Vec<HPolytope>,
    /// `V_t` for `t = 0..T`.
    pub v: Vec<HPolytope>,
}

impl SafetySpec {
    pub fn validate(&self, sys: &TimeVaryingLinearSystem) -> Result<()> {
        let t = sys.horizon();
        let check = |name: &str, sets: &[HPolytope], dim: usize| -> Result<()> {
            if sets.len() != t {
                return Err(Error::dim(format!("{name} has {} sets, expected {t}", sets.len())));
            }
            for (i, s) in sets.iter().enumerate() {
                if s.dim() != dim {
                    return Err(Error::dim(format!(
                        "{name}[{i}] has dimension {}, expected {dim}",
                        s.dim()
                    )));
                }
            }
            Ok(())
        };
        if self.x0.dim() != sys.nx() {
            return Err(Error::dim(format!(
                "X0 has dimension {}, expected {}",
                self.x0.dim(),
                sys.nx()
            )));
        }
        check("X", &self.x, sys.nx())?;
        check("U", &self.u, sys.nu())?;
        check("W", &self.w, sys.nx())?;
        check("V", &self.v, sys.ny())?;
        Ok(())
    }

    /// State set for time `t` in `1..=T`.
    pub fn state_set(&self, t: usize) -> &HPolytope {
        &self.x[t - 1]
    }
}

/// What the synthesis minimises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Reweighted nuclear norm of the Youla parameter (message count = rank).
    #[default]
    #[serde(alias = "messagerank")]
    Rank,
    /// Reweighted column group norm (message count = nonzero columns).
    Sensor,
    /// Reweighted row group norm (message count = nonzero rows).
    Actuator,
    /// Sum of per sensor/actuator pair ranks with no sensor-to-sensor sharing.
    #[serde(alias = "multi_pair")]
    Multipair,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Rank => "rank",
            Objective::Sensor => "sensor",
            Objective::Actuator => "actuator",
            Objective::Multipair => "multipair",
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rank" => Ok(Objective::Rank),
            "sensor" => Ok(Objective::Sensor),
            "actuator" => Ok(Objective::Actuator),
            "multipair" => Ok(Objective::Multipair),
            other => Err(Error::Parse(format!("unknown objective {other:?}"))),
        }
    }
}

/// Numerical settings shared by synthesis and factorization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// Reweighting regularisation.
    pub delta: f64,
    /// Relative rank / group-support tolerance.
    pub epsilon: f64,
    pub max_reweight_iters: usize,
    /// Bound on constraint residuals accepted from the conic solver.
    pub feasibility_tol: f64,
    /// Interior-point stopping tolerance (gap and feasibility).
    pub solver_tol: f64,
    /// Synthesis keeps `Phi~ N` this far inside every face of the safe set,
    /// so truncating the controller to its epsilon-rank stays feasible.
    pub constraint_backoff: f64,
    pub seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            delta: 0.01,
            epsilon: 1e-6,
            max_reweight_iters: 8,
            feasibility_tol: 1e-6,
            solver_tol: 1e-9,
            constraint_backoff: 1e-4,
            seed: 0,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) {
            return Err(Error::InvalidOptions(format!("delta must be > 0, got {}", self.delta)));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::InvalidOptions(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.max_reweight_iters == 0 {
            return Err(Error::InvalidOptions("max_reweight_iters must be >= 1".into()));
        }
        if !(self.feasibility_tol > 0.0) || !(self.solver_tol > 0.0) {
            return Err(Error::InvalidOptions("tolerances must be positive".into()));
        }
        if !(self.constraint_backoff >= 0.0) {
            return Err(Error::InvalidOptions(format!("constraint_backoff must be >= 0, got {}", self.constraint_backoff)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisProblem {
    pub system: TimeVaryingLinearSystem,
    pub safety: SafetySpec,
    pub objective: Objective,
    pub options: SolverOptions,
}

impl SynthesisProblem {
    pub fn new(
        system: TimeVaryingLinearSystem,
        safety: SafetySpec,
        objective: Objective,
        options: SolverOptions,
    ) -> Result<Self> {
        safety.validate(&system)?;
        options.validate()?;
        Ok(Self { system, safety, objective, options })
    }

    pub fn with_objective(mut self, objective: Objective) -> Self {
        self.objective = objective;
        self
    }

    pub fn horizon(&self) -> usize {
        self.system.horizon()
    }

    /// The first `horizon` steps of the problem (plant and sets).
    pub fn truncated(&self, horizon: usize) -> Result<Self> {
        if horizon == 0 || horizon > self.horizon() {
            return Err(Error::InvalidOptions(format!(
                "horizon override {horizon} must lie in 1..={}",
                self.horizon()
            )));
        }
        let sys = &self.system;
        let system = TimeVaryingLinearSystem::new(
            horizon,
            (sys.nx, sys.nu, sys.ny),
            sys.a[..horizon].to_vec(),
            sys.b[..horizon].to_vec(),
            sys.c[..=horizon].to_vec(),
        )?;
        let s = &self.safety;
        let safety = SafetySpec {
            x0: s.x0.clone(),
            x: s.x[..horizon].to_vec(),
            u: s.u[..horizon].to_vec(),
            w: s.w[..horizon].to_vec(),
            v: s.v[..horizon].to_vec(),
        };
        Self::new(system, safety, self.objective, self.options)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ProblemFile::from_problem(self))
            .expect("problem file serialisation cannot fail")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Reads and validates a problem file.
pub fn load_problem(path: impl AsRef<Path>) -> Result<SynthesisProblem> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_problem(&text)
}

pub fn parse_problem(text: &str) -> Result<SynthesisProblem> {
    let file: ProblemFile =
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    file.into_problem()
}

/// Exact zero-order-hold discretisation of the planar double integrator
/// `p'' = u` with step `h`, state `[px, py, vx, vy]`.
pub fn double_integrator(h: f64) -> (Matrix, Matrix) {
    #[rustfmt::skip]
    let a = Matrix::from_row_slice(4, 4, &[
        1.0, 0.0, h,   0.0,
        0.0, 1.0, 0.0, h,
        0.0, 0.0, 1.0, 0.0,
        0.0, 0.0, 0.0, 1.0,
    ]);
    let q = 0.5 * h * h;
    #[rustfmt::skip]
    let b = Matrix::from_row_slice(4, 2, &[
        q,   0.0,
        0.0, q,
        h,   0.0,
        0.0, h,
    ]);
    (a, b)
}

/// Drone waypoint benchmark: planar double integrator with unit step,
/// `T = 20`, position measurements.
pub fn drone_benchmark_problem() -> SynthesisProblem {
    drone_problem(20).expect("benchmark instance is valid")
}

/// Drone benchmark over an even `horizon`. The 20-unit mission time is kept
/// and the discretisation step becomes `20 / horizon`; waypoints sit at the
/// middle and the end of the horizon.
pub fn drone_problem(horizon: usize) -> Result<SynthesisProblem> {
    if horizon < 2 || horizon % 2 != 0 {
        return Err(Error::dim(format!("drone horizon must be even and >= 2, got {horizon}")));
    }
    let h = 20.0 / horizon as f64;
    let (a, b) = double_integrator(h);
    #[rustfmt::skip]
    let c = Matrix::from_row_slice(2, 4, &[
        1.0, 0.0, 0.0, 0.0,
        0.0, 1.0, 0.0, 0.0,
    ]);
    let system = TimeVaryingLinearSystem::time_invariant(horizon, a, b, c)?;

    let boxed = |lo: [f64; 4], hi: [f64; 4]| BoxSet::from_slices(&lo, &hi).map(|b| b.to_hpolytope());
    let x0 = boxed([-8.0, -8.0, 0.0, 0.0], [-6.0, -6.0, 0.0, 0.0])?;
    let mid = boxed([5.0, -9.0, -2.0, -2.0], [9.0, -5.0, 2.0, 2.0])?;
    let fin = boxed([5.0, 5.0, -1.0, -1.0], [9.0, 9.0, 1.0, 1.0])?;
    let free = boxed([-10.0, -10.0, -2.0, -2.0], [10.0, 10.0, 2.0, 2.0])?;
    let x = (1..=horizon)
        .map(|t| match t {
            t if t == horizon / 2 => mid.clone(),
            t if t == horizon => fin.clone(),
            _ => free.clone(),
        })
        .collect();
    let u = vec![BoxSet::symmetric(2, 2.0)?.to_hpolytope(); horizon];
    let w = vec![BoxSet::symmetric(4, 0.05)?.to_hpolytope(); horizon];
    let v = vec![BoxSet::symmetric(2, 0.05)?.to_hpolytope(); horizon];
    SynthesisProblem::new(
        system,
        SafetySpec { x0, x, u, w, v },
        Objective::Rank,
        SolverOptions::default(),
    )
}

// ---------------------------------------------------------------------------
// File schema

type Rows = Vec<Vec<f64>>;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemFile {
    format: u32,
    horizon: usize,
    dims: Dims,
    dynamics: Dynamics,
    constraints: Constraints,
    #[serde(default)]
    objective: Objective,
    #[serde(default)]
    options: SolverOptions,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Dims {
    nx: usize,
    nu: usize,
    ny: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Dynamics {
    #[serde(rename = "A")]
    a: MatrixSeq,
    #[serde(rename = "B")]
    b: MatrixSeq,
    #[serde(rename = "C")]
    c: MatrixSeq,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum MatrixSeq {
    PerStep { per_step: Vec<Rows> },
    Broadcast(Rows),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum SetSpec {
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Hpolytope {
        #[serde(rename = "H")]
        h_mat: Rows,
        h: Vec<f64>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TimedSet {
    t: usize,
    set: SetSpec,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum SetSeq {
    PerStep { per_step: Vec<SetSpec> },
    Sparse {
        default: SetSpec,
        #[serde(default)]
        at: Vec<TimedSet>,
    },
    Broadcast(SetSpec),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Constraints {
    x0: SetSpec,
    x: SetSeq,
    u: SetSeq,
    w: SetSeq,
    v: SetSeq,
}

fn rows_to_matrix(rows: &Rows, what: &str) -> Result<Matrix> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::dim(format!("{what} has ragged rows")));
    }
    Ok(Matrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn matrix_to_rows(m: &Matrix) -> Rows {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

impl MatrixSeq {
    fn expand(&self, len: usize, what: &str) -> Result<Vec<Matrix>> {
        match self {
            MatrixSeq::Broadcast(rows) => Ok(vec![rows_to_matrix(rows, what)?; len]),
            MatrixSeq::PerStep { per_step } => {
                if per_step.len() != len {
                    return Err(Error::dim(format!(
                        "{what} has {} per-step entries, expected {len}",
                        per_step.len()
                    )));
                }
                per_step
                    .iter()
                    .enumerate()
                    .map(|(t, r)| rows_to_matrix(r, &format!("{what}_{t}")))
                    .collect()
            }
        }
    }

    fn compress(seq: &[Matrix]) -> Self {
        if seq.windows(2).all(|w| w[0] == w[1]) {
            MatrixSeq::Broadcast(matrix_to_rows(&seq[0]))
        } else {
            MatrixSeq::PerStep { per_step: seq.iter().map(matrix_to_rows).collect() }
        }
    }
}

impl SetSpec {
    fn to_polytope(&self) -> Result<HPolytope> {
        match self {
            SetSpec::Box { lower, upper } => Ok(BoxSet::from_slices(lower, upper)?.to_hpolytope()),
            SetSpec::Hpolytope { h_mat, h } => {
                HPolytope::new(rows_to_matrix(h_mat, "H")?, Vector::from_column_slice(h))
            }
        }
    }

    fn from_polytope(p: &HPolytope) -> Self {
        match p.as_box() {
            Some(b) => SetSpec::Box {
                lower: b.lower().iter().copied().collect(),
                upper: b.upper().iter().copied().collect(),
            },
            None => SetSpec::Hpolytope {
                h_mat: matrix_to_rows(p.h_mat()),
                h: p.h_vec().iter().copied().collect(),
            },
        }
    }
}

impl SetSeq {
    /// Expands to `len` sets for times `first..first + len`.
    fn expand(&self, first: usize, len: usize, what: &str) -> Result<Vec<HPolytope>> {
        match self {
            SetSeq::Broadcast(s) => Ok(vec![s.to_polytope()?; len]),
            SetSeq::PerStep { per_step } => {
                if per_step.len() != len {
                    return Err(Error::dim(format!(
                        "{what} has {} per-step sets, expected {len}",
                        per_step.len()
                    )));
                }
                per_step.iter().map(SetSpec::to_polytope).collect()
            }
            SetSeq::Sparse { default, at } => {
                let mut out = vec![default.to_polytope()?; len];
                for entry in at {
                    if entry.t < first || entry.t >= first + len {
                        return Err(Error::dim(format!(
                            "{what} override at t={} outside {}..{}",
                            entry.t,
                            first,
                            first + len
                        )));
                    }
                    out[entry.t - first] = entry.set.to_polytope()?;
                }
                Ok(out)
            }
        }
    }

    fn compress(sets: &[HPolytope]) -> Self {
        if sets.windows(2).all(|w| w[0] == w[1]) {
            SetSeq::Broadcast(SetSpec::from_polytope(&sets[0]))
        } else {
            SetSeq::PerStep { per_step: sets.iter().map(SetSpec::from_polytope).collect() }
        }
    }
}

impl ProblemFile {
    fn into_problem(self) -> Result<SynthesisProblem> {
        if self.format != FORMAT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                self.format
            )));
        }
        let t = self.horizon;
        let dims = (self.dims.nx, self.dims.nu, self.dims.ny);
        let system = TimeVaryingLinearSystem::new(
            t,
            dims,
            self.dynamics.a.expand(t, "A")?,
            self.dynamics.b.expand(t, "B")?,
            self.dynamics.c.expand(t + 1, "C")?,
        )?;
        let c = &self.constraints;
        let safety = SafetySpec {
            x0: c.x0.to_polytope()?,
            x: c.x.expand(1, t, "X")?,
            u: c.u.expand(0, t, "U")?,
            w: c.w.expand(0, t, "W")?,
            v: c.v.expand(0, t, "V")?,
        };
        SynthesisProblem::new(system, safety, self.objective, self.options)
    }

    fn from_problem(p: &SynthesisProblem) -> Self {
        let s = &p.system;
        ProblemFile {
            format: FORMAT_VERSION,
            horizon: s.horizon(),
            dims: Dims { nx: s.nx(), nu: s.nu(), ny: s.ny() },
            dynamics: Dynamics {
                a: MatrixSeq::compress(s.a_seq()),
                b: MatrixSeq::compress(s.b_seq()),
                c: MatrixSeq::compress(s.c_seq()),
            },
            constraints: Constraints {
                x0: SetSpec::from_polytope(&p.safety.x0),
                x: SetSeq::compress(&p.safety.x),
                u: SetSeq::compress(&p.safety.u),
                w: SetSeq::compress(&p.safety.w),
                v: SetSeq::compress(&p.safety.v),
            },
            objective: p.objective,
            options: p.options,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drone_dimensions_and_sets() {
        let p = drone_benchmark_problem();
        let s = &p.system;
        assert_eq!((s.horizon(), s.nx(), s.nu(), s.ny()), (20, 4, 2, 2));
        let x10 = p.safety.state_set(10).as_box().unwrap();
        assert_eq!(x10.lower().as_slice(), &[5.0, -9.0, -2.0, -2.0]);
        assert_eq!(x10.upper().as_slice(), &[9.0, -5.0, 2.0, 2.0]);
        let x20 = p.safety.state_set(20).as_box().unwrap();
        assert_eq!(x20.lower().as_slice(), &[5.0, 5.0, -1.0, -1.0]);
        let x0 = p.safety.x0.as_box().unwrap();
        assert_eq!(&x0.lower().as_slice()[2..], &[0.0, 0.0]);
        assert_eq!(&x0.upper().as_slice()[2..], &[0.0, 0.0]);
    }

    #[test]
    fn drone_discretisation_matches_matrix_exponential() {
        // exp([[0, I, 0], [0, 0, I], [0, 0, 0]]) with unit step, truncated series is exact.
        let mut gen = Matrix::zeros(6, 6);
        gen[(0, 2)] = 1.0;
        gen[(1, 3)] = 1.0;
        gen[(2, 4)] = 1.0;
        gen[(3, 5)] = 1.0;
        let g2 = &gen * &gen;
        let expm = Matrix::identity(6, 6) + &gen + &g2 * 0.5 + &g2 * &gen / 6.0;
        let p = drone_benchmark_problem();
        assert_eq!(p.system.a(0), &expm.view((0, 0), (4, 4)).into_owned());
        assert_eq!(p.system.b(0), &expm.view((0, 4), (4, 2)).into_owned());
        assert_eq!(p.system.b(0).view((0, 0), (2, 2)), Matrix::identity(2, 2) * 0.5);
    }

    #[test]
    fn empty_box_rejected() {
        assert!(matches!(BoxSet::from_slices(&[1.0], &[0.0]), Err(Error::EmptySet(_))));
    }

    #[test]
    fn degenerate_box_becomes_paired_inequalities() {
        let b = BoxSet::from_slices(&[0.0], &[0.0]).unwrap();
        let h = b.to_hpolytope();
        assert_eq!(h.h_mat().as_slice(), &[1.0, -1.0]);
        assert_eq!(h.h_vec().as_slice(), &[0.0, -0.0]);
        assert!(h.contains(&Vector::from_element(1, 0.0), 0.0));
        assert!(!h.contains(&Vector::from_element(1, 1e-9), 0.0));
    }

    #[test]
    fn wrong_shape_matrix_rejected() {
        let mut json: serde_json::Value = serde_json::from_str(&drone_benchmark_problem().to_json()).unwrap();
        json["dynamics"]["A"] = serde_json::json!([[1.0, 0.0], [0.0, 1.0]]);
        let err = parse_problem(&json.to_string()).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)), "{err}");
    }

    #[test]
    fn empty_box_in_file_rejected() {
        let mut json: serde_json::Value = serde_json::from_str(&drone_benchmark_problem().to_json()).unwrap();
        json["constraints"]["v"] = serde_json::json!({"box": {"lower": [1.0, 0.0], "upper": [0.0, 0.0]}});
        assert!(matches!(parse_problem(&json.to_string()), Err(Error::EmptySet(_))));
    }

    #[test]
    fn malformed_file_is_parse_error() {
        assert!(matches!(parse_problem("{\"format\": 1,"), Err(Error::Parse(_))));
        let mut json: serde_json::Value = serde_json::from_str(&drone_benchmark_problem().to_json()).unwrap();
        json["format"] = serde_json::json!(2);
        assert!(matches!(parse_problem(&json.to_string()), Err(Error::Parse(_))));
    }

    #[test]
    fn sparse_set_overrides() {
        let text = r#"{
            "format": 1, "horizon": 3, "dims": {"nx": 1, "nu": 1, "ny": 1},
            "dynamics": {"A": [[1.0]], "B": [[1.0]], "C": {"per_step": [[[1.0]], [[1.0]], [[2.0]], [[1.0]]]}},
            "constraints": {
                "x0": {"box": {"lower": [0.0], "upper": [0.0]}},
                "x": {"default": {"box": {"lower": [-5.0], "upper": [5.0]}},
                      "at": [{"t": 3, "set": {"hpolytope": {"H": [[1.0]], "h": [1.0]}}}]},
                "u": {"box": {"lower": [-1.0], "upper": [1.0]}},
                "w": {"box": {"lower": [-0.1], "upper": [0.1]}},
                "v": {"box": {"lower": [-0.1], "upper": [0.1]}}
            },
            "objective": "sensor",
            "options": {"delta": 0.1}
        }"#;
        let p = parse_problem(text).unwrap();
        assert_eq!(p.objective, Objective::Sensor);
        assert_eq!(p.options.delta, 0.1);
        assert_eq!(p.options.max_reweight_iters, 8);
        assert_eq!(p.system.c(2)[(0, 0)], 2.0);
        assert!(p.safety.state_set(1).as_box().is_some());
        assert!(p.safety.state_set(3).as_box().is_none());
        let back = parse_problem(&p.to_json()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn override_outside_range_rejected() {
        let mut json: serde_json::Value = serde_json::from_str(&drone_benchmark_problem().to_json()).unwrap();
        json["constraints"]["u"] = serde_json::json!({
            "default": {"box": {"lower": [-2.0, -2.0], "upper": [2.0, 2.0]}},
            "at": [{"t": 20, "set": {"box": {"lower": [-1.0, -1.0], "upper": [1.0, 1.0]}}}]
        });
        assert!(matches!(parse_problem(&json.to_string()), Err(Error::Dimension(_))));
    }
}
