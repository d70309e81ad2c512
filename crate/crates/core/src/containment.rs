//! Robust polytope containment `M N ⊆ S` through Farkas multipliers.
//!
//! For polytopes `N = {n | H_N n <= h_N}` and `S = {s | H_S s <= h_S}`, the
//! image `M N` lies in `S` iff some `Lambda >= 0` satisfies
//! `Lambda H_N = H_S M` and `Lambda h_N <= h_S`. Both conditions are linear
//! in `(Lambda, M)`, so `M` can itself be a decision variable.

use crate::conic::{self, AffineConstraintSet, BackendSettings, ConicProgram, LinearRow, SolveStatus};
use crate::error::{Error, Result};
use crate::problem::{HPolytope, SafetySpec};
use crate::sls::DecisionLayout;
use crate::{Matrix, Vector};

/// Group names used by [`assemble_farkas_constraints`].
pub mod groups {
    pub const NONNEGATIVE: &str = "farkas/nonnegative";
    pub const MATCH: &str = "farkas/match";
    pub const BOUND: &str = "farkas/bound";
}

/// Cartesian product of polytopes with its stacked H-representation.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductPolytope {
    factors: Vec<HPolytope>,
    h_mat: Matrix,
    h_vec: Vector,
}

impl ProductPolytope {
    pub fn new(factors: Vec<HPolytope>) -> Self {
        let rows: usize = factors.iter().map(HPolytope::num_constraints).sum();
        let cols: usize = factors.iter().map(HPolytope::dim).sum();
        let mut h_mat = Matrix::zeros(rows, cols);
        let mut h_vec = Vector::zeros(rows);
        let (mut r, mut c) = (0, 0);
        for f in &factors {
            let (fr, fc) = f.h_mat().shape();
            h_mat.view_mut((r, c), (fr, fc)).copy_from(f.h_mat());
            h_vec.rows_mut(r, fr).copy_from(f.h_vec());
            r += fr;
            c += fc;
        }
        Self { factors, h_mat, h_vec }
    }

    /// Every face moved inward by `margin` (measured along its normal).
    pub fn tightened(&self, margin: f64) -> Result<Self> {
        let factors = self
            .factors
            .iter()
            .map(|p| {
                let norms = Vector::from_fn(p.num_constraints(), |i, _| p.h_mat().row(i).norm());
                HPolytope::new(p.h_mat().clone(), p.h_vec() - norms * margin)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(factors))
    }

    pub fn factors(&self) -> &[HPolytope] {
        &self.factors
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

    /// Per-coordinate bounds when every factor is a box.
    pub fn box_bounds(&self) -> Result<(Vector, Vector)> {
        let mut lo = Vec::with_capacity(self.dim());
        let mut hi = Vec::with_capacity(self.dim());
        for (i, f) in self.factors.iter().enumerate() {
            let b = f
                .as_box()
                .ok_or_else(|| Error::UnsupportedSet(format!("factor {i} is not a box")))?;
            lo.extend(b.lower().iter());
            hi.extend(b.upper().iter());
        }
        Ok((Vector::from_vec(lo), Vector::from_vec(hi)))
    }
}

/// Nonnegative multipliers certifying containment.
#[derive(Debug, Clone, PartialEq)]
pub struct FarkasCertificate {
    pub lambda: Matrix,
}

impl FarkasCertificate {
    /// `(min entry, max |Lambda H_N - H_S M|, max (Lambda h_N - h_S))`.
    pub fn residuals(&self, n: &ProductPolytope, s: &ProductPolytope, m: &Matrix) -> (f64, f64, f64) {
        let min = self.lambda.min();
        let matched = (&self.lambda * n.h_mat() - s.h_mat() * m).amax();
        let bound = (&self.lambda * n.h_vec() - s.h_vec()).max();
        (min, matched, bound)
    }

    pub fn is_valid(&self, n: &ProductPolytope, s: &ProductPolytope, m: &Matrix, tol: f64) -> bool {
        let (min, matched, bound) = self.residuals(n, s, m);
        min >= -tol && matched <= tol && bound <= tol
    }
}

/// `N = X_0 × W_0..W_{T-1} × V_0..V_{T-1}` and `S = X_1..X_T × U_0..U_{T-1}`,
/// ordered like the columns and rows of `Phi~`.
pub fn build_noise_and_safe_sets(safety: &SafetySpec) -> (ProductPolytope, ProductPolytope) {
    let noise = std::iter::once(safety.x0.clone())
        .chain(safety.w.iter().cloned())
        .chain(safety.v.iter().cloned())
        .collect();
    let safe = safety.x.iter().chain(safety.u.iter()).cloned().collect();
    (ProductPolytope::new(noise), ProductPolytope::new(safe))
}

/// `Lambda >= 0`, `Lambda H_N = H_S Phi~`, `Lambda h_N <= h_S` over the
/// stacked vector of `layout`, with `Lambda` sized `rows(H_S) x rows(H_N)`.
pub fn assemble_farkas_constraints(
    n: &ProductPolytope,
    s: &ProductPolytope,
    layout: &DecisionLayout,
) -> Result<AffineConstraintSet> {
    if n.dim() != layout.phi_tilde_cols() || s.dim() != layout.phi_tilde_rows() {
        return Err(Error::dim(format!(
            "sets have dimensions N={} S={}, response needs N={} S={}",
            n.dim(),
            s.dim(),
            layout.phi_tilde_cols(),
            layout.phi_tilde_rows()
        )));
    }
    if layout.lambda_rows != s.num_constraints() || layout.lambda_cols != n.num_constraints() {
        return Err(Error::dim("multiplier block does not match the H-representations"));
    }
    let mut set = AffineConstraintSet::new(layout.len());
    set.begin_group(groups::NONNEGATIVE);
    for i in 0..layout.lambda_rows {
        for k in 0..layout.lambda_cols {
            set.push_le(LinearRow::new(vec![(layout.lambda(i, k), -1.0)], 0.0));
        }
    }
    let hn_cols: Vec<Vec<(usize, f64)>> = (0..n.dim())
        .map(|c| {
            (0..n.num_constraints())
                .filter(|&k| n.h_mat()[(k, c)] != 0.0)
                .map(|k| (k, n.h_mat()[(k, c)]))
                .collect()
        })
        .collect();
    let hs_rows: Vec<Vec<(usize, f64)>> = (0..s.num_constraints())
        .map(|i| {
            (0..s.dim())
                .filter(|&r| s.h_mat()[(i, r)] != 0.0)
                .map(|r| (r, s.h_mat()[(i, r)]))
                .collect()
        })
        .collect();
    set.begin_group(groups::MATCH);
    for i in 0..s.num_constraints() {
        for c in 0..n.dim() {
            let mut terms: Vec<(usize, f64)> =
                hn_cols[c].iter().map(|&(k, v)| (layout.lambda(i, k), v)).collect();
            terms.extend(hs_rows[i].iter().map(|&(r, v)| (layout.phi_tilde(r, c), -v)));
            set.push_eq(LinearRow::new(terms, 0.0));
        }
    }
    set.begin_group(groups::BOUND);
    for i in 0..s.num_constraints() {
        let terms = (0..n.num_constraints())
            .filter(|&k| n.h_vec()[k] != 0.0)
            .map(|k| (layout.lambda(i, k), n.h_vec()[k]))
            .collect();
        set.push_le(LinearRow::new(terms, s.h_vec()[i]));
    }
    Ok(set)
}

/// `max_{p in N} (H_S M p)_i` for each row, `N` a product of boxes.
pub fn box_support(n: &ProductPolytope, g: &Matrix) -> Result<Vector> {
    let (lo, hi) = n.box_bounds()?;
    if g.ncols() != lo.len() {
        return Err(Error::dim("matrix columns do not match the box dimension"));
    }
    Ok(Vector::from_fn(g.nrows(), |i, _| {
        (0..g.ncols()).map(|j| (g[(i, j)] * lo[j]).max(g[(i, j)] * hi[j])).sum()
    }))
}

/// Exact test of `M N ⊆ S` for `N` a product of boxes: each row of `H_S M`
/// is maximised over the box in closed form.
pub fn containment_oracle(n: &ProductPolytope, s: &HPolytope, m: &Matrix) -> Result<bool> {
    if m.nrows() != s.dim() {
        return Err(Error::dim("matrix rows do not match the target set"));
    }
    let g = s.h_mat() * m;
    let support = box_support(n, &g)?;
    Ok((0..support.len()).all(|i| support[i] <= s.h_vec()[i]))
}

/// Searches for a Farkas certificate of `M N ⊆ S` with `M` fixed.
pub fn find_certificate(
    n: &ProductPolytope,
    s: &ProductPolytope,
    m: &Matrix,
    settings: &BackendSettings,
) -> Result<Option<FarkasCertificate>> {
    let (rows, cols) = (s.num_constraints(), n.num_constraints());
    if m.shape() != (s.dim(), n.dim()) {
        return Err(Error::dim("matrix shape does not match the sets"));
    }
    let g = s.h_mat() * m;
    let mut prog = ConicProgram::new(rows * cols);
    add_fixed_farkas_rows(&mut prog, n, &g, Some(s.h_vec()));
    let sol = conic::solve(&prog, settings);
    match sol.status {
        SolveStatus::Solved | SolveStatus::AlmostSolved => Ok(Some(FarkasCertificate {
            lambda: Matrix::from_row_slice(rows, cols, &sol.x),
        })),
        SolveStatus::Infeasible => Ok(None),
        _ => Err(Error::SolverFailure { iteration: 0, status: sol.detail }),
    }
}

/// Per-row containment margins `h_S - Lambda* h_N` with `Lambda*` the
/// row-wise smallest bound among certificates matching `H_S M`. A negative
/// entry means the corresponding safe-set face is violated.
pub fn containment_margins(
    n: &ProductPolytope,
    s: &ProductPolytope,
    m: &Matrix,
    settings: &BackendSettings,
) -> Result<(Vector, FarkasCertificate)> {
    let (rows, cols) = (s.num_constraints(), n.num_constraints());
    if m.shape() != (s.dim(), n.dim()) {
        return Err(Error::dim("matrix shape does not match the sets"));
    }
    let g = s.h_mat() * m;
    let mut prog = ConicProgram::new(rows * cols);
    add_fixed_farkas_rows(&mut prog, n, &g, None);
    // rows of Lambda decouple, so minimising the sum minimises each row bound
    for i in 0..rows {
        for k in 0..cols {
            prog.objective[i * cols + k] = n.h_vec()[k];
        }
    }
    let sol = conic::solve(&prog, settings);
    if !sol.is_solved() {
        return Err(Error::SolverFailure { iteration: 0, status: sol.detail });
    }
    let lambda = Matrix::from_row_slice(rows, cols, &sol.x).map(|v| v.max(0.0));
    let margins = s.h_vec() - &lambda * n.h_vec();
    Ok((margins, FarkasCertificate { lambda }))
}

fn add_fixed_farkas_rows(prog: &mut ConicProgram, n: &ProductPolytope, g: &Matrix, bound: Option<&Vector>) {
    let cols = n.num_constraints();
    for i in 0..g.nrows() {
        for k in 0..cols {
            prog.inequalities.push(LinearRow::new(vec![(i * cols + k, -1.0)], 0.0));
        }
        for c in 0..n.dim() {
            let terms = (0..cols)
                .filter(|&k| n.h_mat()[(k, c)] != 0.0)
                .map(|k| (i * cols + k, n.h_mat()[(k, c)]))
                .collect();
            prog.equalities.push(LinearRow::new(terms, g[(i, c)]));
        }
        if let Some(h) = bound {
            let terms = (0..cols).map(|k| (i * cols + k, n.h_vec()[k])).collect();
            prog.inequalities.push(LinearRow::new(terms, h[i]));
        }
    }
}
