//! System-level parametrisation of finite-horizon output feedback.
//!
//! With `x = Z calA x + Z calB u + w`, `y = calC x + v` and `u = K y`, the
//! closed loop maps `(w, v)` to `(x, u)` through the four responses
//! `Phi_xx, Phi_xy, Phi_ux, Phi_uy`. The affine constraints
//!
//! ```text
//! [I - Z calA, -Z calB] [Phi_xx Phi_xy; Phi_ux Phi_uy] = [I, 0]
//! [Phi_xx Phi_xy; Phi_ux Phi_uy] [I - Z calA; -calC]   = [I; 0]
//! ```
//!
//! describe every achievable response, and `K = Phi_uy - Phi_ux Phi_xx^-1 Phi_xy`
//! recovers the controller. `rank Phi_uy = rank K`.

use crate::block::{BlockLowerTriangular, LiftedOperators};
use crate::conic::{AffineConstraintSet, LinearRow};
use crate::error::{Error, Result};
use crate::Matrix;

/// Group names used by [`assemble_sls_equalities`].
pub mod groups {
    /// `(I - Z calA) Phi_xx - Z calB Phi_ux = I`.
    pub const STATE_LEFT: &str = "sls/state-left";
    /// `(I - Z calA) Phi_xy - Z calB Phi_uy = 0`.
    pub const OUTPUT_LEFT: &str = "sls/output-left";
    /// `Phi_xx (I - Z calA) - Phi_xy calC = I`.
    pub const STATE_RIGHT: &str = "sls/state-right";
    /// `Phi_ux (I - Z calA) - Phi_uy calC = 0`.
    pub const INPUT_RIGHT: &str = "sls/input-right";
    /// Strictly-upper blocks of all four responses are zero.
    pub const CAUSALITY: &str = "sls/causality";
    /// `[calC Phi_xy]` has no cross-sensor entries.
    pub const SENSOR_ISOLATION: &str = "sls/sensor-isolation";
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemResponse {
    pub phi_xx: BlockLowerTriangular,
    pub phi_xy: BlockLowerTriangular,
    pub phi_ux: BlockLowerTriangular,
    pub phi_uy: BlockLowerTriangular,
}

impl SystemResponse {
    /// Stacked `[Phi_xx Phi_xy; Phi_ux Phi_uy]`.
    pub fn stacked(&self) -> Matrix {
        let (nxr, nur) = (self.phi_xx.data().nrows(), self.phi_ux.data().nrows());
        let (nxc, nyc) = (self.phi_xx.data().ncols(), self.phi_xy.data().ncols());
        let mut m = Matrix::zeros(nxr + nur, nxc + nyc);
        m.view_mut((0, 0), (nxr, nxc)).copy_from(self.phi_xx.data());
        m.view_mut((0, nxc), (nxr, nyc)).copy_from(self.phi_xy.data());
        m.view_mut((nxr, 0), (nur, nxc)).copy_from(self.phi_ux.data());
        m.view_mut((nxr, nxc), (nur, nyc)).copy_from(self.phi_uy.data());
        m
    }
}

/// Max-norm residuals of the left and right affine constraints.
pub fn sls_residuals(resp: &SystemResponse, ops: &LiftedOperators) -> (f64, f64) {
    let nx_all = ops.state_dim();
    let (ny_all, nu_all) = (ops.output_dim(), ops.input_dim());
    let m = ops.i_minus_za();
    let zb = ops.z_b();
    let (pxx, pxy, pux, puy) =
        (resp.phi_xx.data(), resp.phi_xy.data(), resp.phi_ux.data(), resp.phi_uy.data());
    let left_state = &m * pxx - &zb * pux - Matrix::identity(nx_all, nx_all);
    let left_out = &m * pxy - &zb * puy;
    let right_state = pxx * &m - pxy * &ops.cal_c - Matrix::identity(nx_all, nx_all);
    let right_in = pux * &m - puy * &ops.cal_c;
    debug_assert_eq!(left_out.ncols(), ny_all);
    debug_assert_eq!(right_in.nrows(), nu_all);
    (
        left_state.amax().max(left_out.amax()),
        right_state.amax().max(right_in.amax()),
    )
}

/// Closed-loop responses of the block-lower-triangular controller `k`.
pub fn response_from_controller(k: &BlockLowerTriangular, ops: &LiftedOperators) -> Result<SystemResponse> {
    let (t_h, nx, nu, ny) = (ops.horizon, ops.nx, ops.nu, ops.ny);
    if k.block_rows() != nu || k.block_cols() != ny || k.horizon() != t_h {
        return Err(Error::dim(format!(
            "controller has ({},{}) blocks over T={}, plant needs ({nu},{ny}) over T={t_h}",
            k.block_rows(),
            k.block_cols(),
            k.horizon()
        )));
    }
    let kd = k.data();
    let zb = ops.z_b();
    let zbk = &zb * kd;
    // unit lower-triangular
    let closed = ops.i_minus_za() - &zbk * &ops.cal_c;
    let n = ops.state_dim();
    let phi_xx = closed
        .solve_lower_triangular(&Matrix::identity(n, n))
        .ok_or_else(|| Error::Internal("closed-loop map is singular".into()))?;
    let phi_xy = &phi_xx * &zbk;
    let phi_ux = kd * &ops.cal_c * &phi_xx;
    let phi_uy = kd + &phi_ux * &zbk;
    let wrap = |m: Matrix, r: usize, c: usize| BlockLowerTriangular::new(m, r, c, t_h);
    Ok(SystemResponse {
        phi_xx: wrap(phi_xx, nx, nx)?,
        phi_xy: wrap(phi_xy, nx, ny)?,
        phi_ux: wrap(phi_ux, nu, nx)?,
        phi_uy: wrap(phi_uy, nu, ny)?,
    })
}

/// `K = Phi_uy - Phi_ux Phi_xx^-1 Phi_xy`, after checking the affine
/// constraints hold to `tol`. The result must be block-lower-triangular to `tol`.
pub fn controller_from_response(
    resp: &SystemResponse,
    ops: &LiftedOperators,
    tol: f64,
) -> Result<BlockLowerTriangular> {
    let (left, right) = sls_residuals(resp, ops);
    let residual = left.max(right);
    if !(residual <= tol) {
        return Err(Error::Feasibility { residual, tolerance: tol });
    }
    let xx_inv_xy = resp
        .phi_xx
        .data()
        .clone()
        .lu()
        .solve(resp.phi_xy.data())
        .ok_or_else(|| Error::Internal("Phi_xx is singular".into()))?;
    let k = resp.phi_uy.data() - resp.phi_ux.data() * xx_inv_xy;
    BlockLowerTriangular::with_tolerance(k, ops.nu, ops.ny, ops.horizon, tol)
}

/// Rows `x_1..x_T` of `[Phi_xx Phi_xy]` over rows `u_0..u_{T-1}` of
/// `[Phi_ux Phi_uy]`, all `(T+1)(nx + ny)` columns.
pub fn extract_phi_tilde(resp: &SystemResponse) -> Matrix {
    let stacked = resp.stacked();
    let nx = resp.phi_xx.block_rows();
    let nu = resp.phi_ux.block_rows();
    let t_h = resp.phi_xx.horizon();
    let nx_all = (t_h + 1) * nx;
    let mut out = Matrix::zeros(t_h * (nx + nu), stacked.ncols());
    out.view_mut((0, 0), (t_h * nx, stacked.ncols()))
        .copy_from(&stacked.view((nx, 0), (t_h * nx, stacked.ncols())));
    out.view_mut((t_h * nx, 0), (t_h * nu, stacked.ncols()))
        .copy_from(&stacked.view((nx_all, 0), (t_h * nu, stacked.ncols())));
    out
}

/// Drops the `v_T` columns of `phi_tilde`, which causality forces to zero in
/// the constrained rows. Errors if they exceed `tol`.
pub fn drop_terminal_noise_columns(phi_tilde: &Matrix, ny: usize, tol: f64) -> Result<Matrix> {
    let keep = phi_tilde.ncols() - ny;
    let tail = phi_tilde.columns(keep, ny).amax();
    if tail > tol {
        return Err(Error::Internal(format!("v_T columns of the response are nonzero ({tail:e})")));
    }
    Ok(phi_tilde.columns(0, keep).into_owned())
}

/// `(T+1) x (T+1)` scalar channel from sensor `j` to actuator `i` (0-based).
pub fn extract_pair_response(phi_uy: &BlockLowerTriangular, i: usize, j: usize) -> Result<Matrix> {
    let (nu, ny) = (phi_uy.block_rows(), phi_uy.block_cols());
    if i >= nu || j >= ny {
        return Err(Error::IndexOutOfRange(format!(
            "pair ({i},{j}) outside {nu} actuators x {ny} sensors"
        )));
    }
    let n = phi_uy.horizon() + 1;
    let d = phi_uy.data();
    Ok(Matrix::from_fn(n, n, |t, tau| d[(t * nu + i, tau * ny + j)]))
}

/// Index map of the stacked decision vector
/// `[vec Phi_xx, vec Phi_xy, vec Phi_ux, vec Phi_uy, vec Lambda]`, each block
/// stored densely in row-major order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecisionLayout {
    pub horizon: usize,
    pub nx: usize,
    pub nu: usize,
    pub ny: usize,
    pub lambda_rows: usize,
    pub lambda_cols: usize,
}

impl DecisionLayout {
    pub fn new(ops: &LiftedOperators, lambda_rows: usize, lambda_cols: usize) -> Self {
        Self { horizon: ops.horizon, nx: ops.nx, nu: ops.nu, ny: ops.ny, lambda_rows, lambda_cols }
    }

    fn nx_all(&self) -> usize {
        (self.horizon + 1) * self.nx
    }
    fn nu_all(&self) -> usize {
        (self.horizon + 1) * self.nu
    }
    fn ny_all(&self) -> usize {
        (self.horizon + 1) * self.ny
    }

    pub fn phi_xx(&self, i: usize, j: usize) -> usize {
        i * self.nx_all() + j
    }
    pub fn phi_xy(&self, i: usize, j: usize) -> usize {
        self.nx_all() * self.nx_all() + i * self.ny_all() + j
    }
    pub fn phi_ux(&self, i: usize, j: usize) -> usize {
        self.nx_all() * (self.nx_all() + self.ny_all()) + i * self.nx_all() + j
    }
    pub fn phi_uy(&self, i: usize, j: usize) -> usize {
        self.nx_all() * (self.nx_all() + self.ny_all()) + self.nu_all() * self.nx_all() + i * self.ny_all() + j
    }
    pub fn phi_len(&self) -> usize {
        (self.nx_all() + self.nu_all()) * (self.nx_all() + self.ny_all())
    }
    pub fn lambda(&self, i: usize, j: usize) -> usize {
        self.phi_len() + i * self.lambda_cols + j
    }
    pub fn len(&self) -> usize {
        self.phi_len() + self.lambda_rows * self.lambda_cols
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows of `Phi~` (states `x_1..x_T`, then inputs `u_0..u_{T-1}`).
    pub fn phi_tilde_rows(&self) -> usize {
        self.horizon * (self.nx + self.nu)
    }

    /// Columns of `Phi~` used for containment (`x_0, w_0..w_{T-1}, v_0..v_{T-1}`).
    pub fn phi_tilde_cols(&self) -> usize {
        self.nx_all() + self.horizon * self.ny
    }

    /// Variable holding entry `(r, c)` of `Phi~`.
    pub fn phi_tilde(&self, r: usize, c: usize) -> usize {
        let state_rows = self.horizon * self.nx;
        let nx_all = self.nx_all();
        if r < state_rows {
            let i = r + self.nx;
            if c < nx_all { self.phi_xx(i, c) } else { self.phi_xy(i, c - nx_all) }
        } else {
            let i = r - state_rows;
            if c < nx_all { self.phi_ux(i, c) } else { self.phi_uy(i, c - nx_all) }
        }
    }

    /// Reads the four responses out of a solution vector.
    pub fn response(&self, x: &[f64], tol: f64) -> Result<SystemResponse> {
        let (nx_all, nu_all, ny_all) = (self.nx_all(), self.nu_all(), self.ny_all());
        let read = |rows: usize, cols: usize, f: &dyn Fn(usize, usize) -> usize| {
            Matrix::from_fn(rows, cols, |i, j| x[f(i, j)])
        };
        let t = self.horizon;
        Ok(SystemResponse {
            phi_xx: BlockLowerTriangular::with_tolerance(
                read(nx_all, nx_all, &|i, j| self.phi_xx(i, j)), self.nx, self.nx, t, tol)?,
            phi_xy: BlockLowerTriangular::with_tolerance(
                read(nx_all, ny_all, &|i, j| self.phi_xy(i, j)), self.nx, self.ny, t, tol)?,
            phi_ux: BlockLowerTriangular::with_tolerance(
                read(nu_all, nx_all, &|i, j| self.phi_ux(i, j)), self.nu, self.nx, t, tol)?,
            phi_uy: BlockLowerTriangular::with_tolerance(
                read(nu_all, ny_all, &|i, j| self.phi_uy(i, j)), self.nu, self.ny, t, tol)?,
        })
    }

    /// Writes `resp` into a decision vector (Lambda entries zero).
    pub fn pack(&self, resp: &SystemResponse) -> Vec<f64> {
        let mut x = vec![0.0; self.len()];
        let blocks: [(&Matrix, &dyn Fn(usize, usize) -> usize); 4] = [
            (resp.phi_xx.data(), &|i, j| self.phi_xx(i, j)),
            (resp.phi_xy.data(), &|i, j| self.phi_xy(i, j)),
            (resp.phi_ux.data(), &|i, j| self.phi_ux(i, j)),
            (resp.phi_uy.data(), &|i, j| self.phi_uy(i, j)),
        ];
        for (m, idx) in blocks {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    x[idx(i, j)] = m[(i, j)];
                }
            }
        }
        x
    }
}

/// Nonzeros of each row of `m`.
fn row_nonzeros(m: &Matrix) -> Vec<Vec<(usize, f64)>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).filter(|&j| m[(i, j)] != 0.0).map(|j| (j, m[(i, j)])).collect())
        .collect()
}

/// Nonzeros of each column of `m`.
fn col_nonzeros(m: &Matrix) -> Vec<Vec<(usize, f64)>> {
    (0..m.ncols())
        .map(|j| (0..m.nrows()).filter(|&i| m[(i, j)] != 0.0).map(|i| (i, m[(i, j)])).collect())
        .collect()
}

/// The affine SLS constraints plus block-lower-triangularity of all four
/// responses, over the vector described by `layout`.
///
/// Groups: [`groups::STATE_LEFT`], [`groups::OUTPUT_LEFT`],
/// [`groups::STATE_RIGHT`], [`groups::INPUT_RIGHT`], [`groups::CAUSALITY`].
pub fn assemble_sls_equalities(ops: &LiftedOperators, layout: &DecisionLayout) -> AffineConstraintSet {
    let (nx_all, nu_all, ny_all) = (ops.state_dim(), ops.input_dim(), ops.output_dim());
    let m = ops.i_minus_za();
    let zb = ops.z_b();
    let m_rows = row_nonzeros(&m);
    let zb_rows = row_nonzeros(&zb);
    let m_cols = col_nonzeros(&m);
    let c_cols = col_nonzeros(&ops.cal_c);
    let mut set = AffineConstraintSet::new(layout.len());

    // (I - Z calA) Phi_x? - Z calB Phi_u? = [I, 0]
    let left = |set: &mut AffineConstraintSet,
                cols: usize,
                upper: &dyn Fn(usize, usize) -> usize,
                lower: &dyn Fn(usize, usize) -> usize,
                identity: bool| {
        for i in 0..nx_all {
            for j in 0..cols {
                let mut terms: Vec<(usize, f64)> = m_rows[i].iter().map(|&(k, c)| (upper(k, j), c)).collect();
                terms.extend(zb_rows[i].iter().map(|&(k, c)| (lower(k, j), -c)));
                let rhs = if identity && i == j { 1.0 } else { 0.0 };
                set.push_eq(LinearRow::new(terms, rhs));
            }
        }
    };
    set.begin_group(groups::STATE_LEFT);
    left(&mut set, nx_all, &|k, j| layout.phi_xx(k, j), &|k, j| layout.phi_ux(k, j), true);
    set.begin_group(groups::OUTPUT_LEFT);
    left(&mut set, ny_all, &|k, j| layout.phi_xy(k, j), &|k, j| layout.phi_uy(k, j), false);

    // Phi_?x (I - Z calA) - Phi_?y calC = [I; 0]
    let right = |set: &mut AffineConstraintSet,
                 rows: usize,
                 xpart: &dyn Fn(usize, usize) -> usize,
                 ypart: &dyn Fn(usize, usize) -> usize,
                 identity: bool| {
        for i in 0..rows {
            for j in 0..nx_all {
                let mut terms: Vec<(usize, f64)> = m_cols[j].iter().map(|&(k, c)| (xpart(i, k), c)).collect();
                terms.extend(c_cols[j].iter().map(|&(k, c)| (ypart(i, k), -c)));
                let rhs = if identity && i == j { 1.0 } else { 0.0 };
                set.push_eq(LinearRow::new(terms, rhs));
            }
        }
    };
    set.begin_group(groups::STATE_RIGHT);
    right(&mut set, nx_all, &|i, k| layout.phi_xx(i, k), &|i, k| layout.phi_xy(i, k), true);
    set.begin_group(groups::INPUT_RIGHT);
    right(&mut set, nu_all, &|i, k| layout.phi_ux(i, k), &|i, k| layout.phi_uy(i, k), false);

    set.begin_group(groups::CAUSALITY);
    let blocks: [(usize, usize, usize, usize, &dyn Fn(usize, usize) -> usize); 4] = [
        (nx_all, nx_all, ops.nx, ops.nx, &|i, j| layout.phi_xx(i, j)),
        (nx_all, ny_all, ops.nx, ops.ny, &|i, j| layout.phi_xy(i, j)),
        (nu_all, nx_all, ops.nu, ops.nx, &|i, j| layout.phi_ux(i, j)),
        (nu_all, ny_all, ops.nu, ops.ny, &|i, j| layout.phi_uy(i, j)),
    ];
    for (rows, cols, br, bc, idx) in blocks {
        for i in 0..rows {
            for j in ((i / br) + 1) * bc..cols {
                set.push_eq(LinearRow::new(vec![(idx(i, j), 1.0)], 0.0));
            }
        }
    }
    set
}

/// `[calC Phi_xy]_{t ny + j1, tau ny + j2} = 0` for `j1 != j2`: sensors do not
/// share measurements.
pub fn assemble_sensor_isolation(ops: &LiftedOperators, layout: &DecisionLayout) -> AffineConstraintSet {
    let ny = ops.ny;
    let c_rows = row_nonzeros(&ops.cal_c);
    let mut set = AffineConstraintSet::new(layout.len());
    set.begin_group(groups::SENSOR_ISOLATION);
    for r in 0..ops.output_dim() {
        for c in 0..ops.output_dim() {
            if r % ny == c % ny || c / ny > r / ny {
                continue;
            }
            let terms = c_rows[r].iter().map(|&(k, v)| (layout.phi_xy(k, c), v)).collect();
            set.push_eq(LinearRow::new(terms, 0.0));
        }
    }
    set
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::lift;
    use crate::problem::TimeVaryingLinearSystem;

    fn scalar_chain(horizon: usize) -> LiftedOperators {
        let one = Matrix::from_element(1, 1, 1.0);
        lift(&TimeVaryingLinearSystem::time_invariant(horizon, one.clone(), one.clone(), one).unwrap())
    }

    fn example_k() -> BlockLowerTriangular {
        #[rustfmt::skip]
        let k = Matrix::from_row_slice(4, 4, &[
            5.0,  0.0, 0.0, 0.0,
            10.0, 0.0, 0.0, 0.0,
            0.0,  3.0, 4.0, 0.0,
            15.0, 6.0, 8.0, 0.0,
        ]);
        BlockLowerTriangular::new(k, 1, 1, 3).unwrap()
    }

    #[test]
    fn open_loop_response() {
        let ops = scalar_chain(3);
        let resp = response_from_controller(&BlockLowerTriangular::zeros(1, 1, 3), &ops).unwrap();
        let expected = ops.i_minus_za().try_inverse().unwrap();
        assert!((resp.phi_xx.data() - expected).amax() < 1e-14);
        assert_eq!(resp.phi_xy.data().amax(), 0.0);
        assert_eq!(resp.phi_ux.data().amax(), 0.0);
        assert_eq!(resp.phi_uy.data().amax(), 0.0);
    }

    #[test]
    fn example_controller_satisfies_affine_constraints() {
        let ops = scalar_chain(3);
        let resp = response_from_controller(&example_k(), &ops).unwrap();
        let (l, r) = sls_residuals(&resp, &ops);
        assert!(l < 1e-10 && r < 1e-10, "{l} {r}");
        let back = controller_from_response(&resp, &ops, 1e-8).unwrap();
        assert!((back.data() - example_k().data()).amax() < 1e-8);
        // diagonal blocks
        for t in 0..=3 {
            assert_eq!(resp.phi_xx.block(t, t)[(0, 0)], 1.0);
            assert_eq!(resp.phi_xy.block(t, t)[(0, 0)], 0.0);
        }
    }

    #[test]
    fn decoupled_response_gives_phi_uy() {
        let ops = scalar_chain(2);
        let phi_uy = BlockLowerTriangular::project(Matrix::from_fn(3, 3, |i, j| (i + j + 1) as f64), 1, 1, 2).unwrap();
        let resp = SystemResponse {
            phi_xx: BlockLowerTriangular::new(ops.i_minus_za().try_inverse().unwrap(), 1, 1, 2).unwrap(),
            phi_xy: BlockLowerTriangular::zeros(1, 1, 2),
            phi_ux: BlockLowerTriangular::zeros(1, 1, 2),
            phi_uy: phi_uy.clone(),
        };
        // not a consistent response for this plant, so the residual check rejects it
        assert!(matches!(controller_from_response(&resp, &ops, 1e-8), Err(Error::Feasibility { .. })));
        // with a zero input matrix the same response is consistent and K = Phi_uy
        let zero = Matrix::zeros(1, 1);
        let one = Matrix::from_element(1, 1, 1.0);
        let ops0 = lift(&TimeVaryingLinearSystem::time_invariant(2, one.clone(), zero.clone(), zero).unwrap());
        let k = controller_from_response(&resp, &ops0, 1e-8).unwrap();
        assert_eq!(k.data(), phi_uy.data());
    }

    #[test]
    fn one_step_constraints_force_identity() {
        let one = Matrix::from_element(1, 1, 1.0);
        let ops = lift(&TimeVaryingLinearSystem::time_invariant(1, one.clone(), one.clone(), one).unwrap());
        let layout = DecisionLayout::new(&ops, 0, 0);
        let set = assemble_sls_equalities(&ops, &layout);
        // row (0,0) of the left state group reads Phi_xx(0,0) = 1 once upper entries vanish
        let g = set.group(groups::STATE_LEFT).unwrap();
        let row = &set.equalities[g.equalities.start];
        assert_eq!(row.terms, vec![(layout.phi_xx(0, 0), 1.0)]);
        assert_eq!(row.rhs, 1.0);
        // row (0,0) of the left output group: Phi_xy(0,0) = 0
        let g = set.group(groups::OUTPUT_LEFT).unwrap();
        let row = &set.equalities[g.equalities.start];
        assert_eq!(row.terms, vec![(layout.phi_xy(0, 0), 1.0)]);
        assert_eq!(row.rhs, 0.0);
    }

    #[test]
    fn constraint_counts() {
        let ops = scalar_chain(3);
        let layout = DecisionLayout::new(&ops, 0, 0);
        let set = assemble_sls_equalities(&ops, &layout);
        let (nx, nu, ny) = (ops.state_dim(), ops.input_dim(), ops.output_dim());
        let causality = set.group(groups::CAUSALITY).unwrap().equalities.len();
        assert_eq!(set.equalities.len() - causality, nx * (nx + ny) + (nx + nu) * nx);
        assert_eq!(causality, 4 * 6);
    }

    #[test]
    fn constructed_response_has_zero_residual() {
        let ops = scalar_chain(3);
        let resp = response_from_controller(&example_k(), &ops).unwrap();
        let layout = DecisionLayout::new(&ops, 0, 0);
        let x = layout.pack(&resp);
        let set = assemble_sls_equalities(&ops, &layout);
        let (eq, _) = set.max_violation(&x);
        assert!(eq < 1e-12, "{eq}");
        assert_eq!(layout.response(&x, 0.0).unwrap(), resp);
    }

    #[test]
    fn phi_tilde_shapes() {
        let ops = scalar_chain(1);
        let resp = response_from_controller(&BlockLowerTriangular::zeros(1, 1, 1), &ops).unwrap();
        let pt = extract_phi_tilde(&resp);
        assert_eq!(pt.shape(), (2, 4));
        assert!(pt.row(1).iter().all(|&v| v == 0.0));

        let p = crate::problem::drone_benchmark_problem();
        let ops = lift(&p.system);
        let resp = response_from_controller(&BlockLowerTriangular::zeros(2, 2, 20), &ops).unwrap();
        let pt = extract_phi_tilde(&resp);
        assert_eq!(pt.nrows(), 120);
        let layout = DecisionLayout::new(&ops, 0, 0);
        let x = layout.pack(&resp);
        let trimmed = drop_terminal_noise_columns(&pt, 2, 0.0).unwrap();
        assert_eq!(trimmed.ncols(), layout.phi_tilde_cols());
        for r in 0..trimmed.nrows() {
            for c in 0..trimmed.ncols() {
                assert_eq!(x[layout.phi_tilde(r, c)], trimmed[(r, c)]);
            }
        }
    }

    #[test]
    fn pair_response_indexing() {
        let phi = BlockLowerTriangular::project(
            Matrix::from_fn(6, 9, |i, j| (10 * i + j) as f64), 2, 3, 2).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                let pr = extract_pair_response(&phi, i, j).unwrap();
                for t in 0..3 {
                    for tau in 0..3 {
                        assert_eq!(pr[(t, tau)], phi.data()[(t * 2 + i, tau * 3 + j)]);
                    }
                }
            }
        }
        assert!(matches!(extract_pair_response(&phi, 2, 0), Err(Error::IndexOutOfRange(_))));
        let single = BlockLowerTriangular::project(Matrix::from_fn(3, 3, |i, j| (i * 3 + j) as f64), 1, 1, 2).unwrap();
        assert_eq!(&extract_pair_response(&single, 0, 0).unwrap(), single.data());
        let zero = BlockLowerTriangular::zeros(2, 2, 2);
        assert_eq!(extract_pair_response(&zero, 1, 1).unwrap().amax(), 0.0);
    }
}
