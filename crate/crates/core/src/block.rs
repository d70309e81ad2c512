//! Block-lower-triangular matrices, lifted plant operators and tolerant rank.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::TimeVaryingLinearSystem;
use crate::Matrix;

/// Dense `((T+1) m) x ((T+1) n)` matrix whose `(t, tau)` blocks vanish for `tau > t`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockLowerTriangular {
    data: Matrix,
    block_rows: usize,
    block_cols: usize,
    horizon: usize,
}

impl BlockLowerTriangular {
    /// Checks the structure exactly (upper blocks must be `== 0.0`).
    pub fn new(data: Matrix, block_rows: usize, block_cols: usize, horizon: usize) -> Result<Self> {
        Self::with_tolerance(data, block_rows, block_cols, horizon, 0.0)
    }

    /// Accepts upper-block entries up to `tol` in magnitude and zeroes them.
    pub fn with_tolerance(
        mut data: Matrix,
        block_rows: usize,
        block_cols: usize,
        horizon: usize,
        tol: f64,
    ) -> Result<Self> {
        let max_upper = max_upper_block_entry(&data, block_rows, block_cols, horizon)?;
        if max_upper > tol {
            return Err(Error::NotBlockLowerTriangular { block_rows, block_cols, max_upper });
        }
        zero_upper_blocks(&mut data, block_rows, block_cols, horizon);
        Ok(Self { data, block_rows, block_cols, horizon })
    }

    pub fn zeros(block_rows: usize, block_cols: usize, horizon: usize) -> Self {
        let data = Matrix::zeros((horizon + 1) * block_rows, (horizon + 1) * block_cols);
        Self { data, block_rows, block_cols, horizon }
    }

    /// Keeps only the block-lower part of `data`.
    pub fn project(mut data: Matrix, block_rows: usize, block_cols: usize, horizon: usize) -> Result<Self> {
        check_shape(&data, block_rows, block_cols, horizon)?;
        zero_upper_blocks(&mut data, block_rows, block_cols, horizon);
        Ok(Self { data, block_rows, block_cols, horizon })
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }
    pub fn into_inner(self) -> Matrix {
        self.data
    }
    pub fn block_rows(&self) -> usize {
        self.block_rows
    }
    pub fn block_cols(&self) -> usize {
        self.block_cols
    }
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// The `(t, tau)` block.
    pub fn block(&self, t: usize, tau: usize) -> Matrix {
        self.data
            .view((t * self.block_rows, tau * self.block_cols), (self.block_rows, self.block_cols))
            .into_owned()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { data: &self.data * factor, ..self.clone() }
    }

    /// `self * other`, which is again block-lower-triangular.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        if self.block_cols != other.block_rows || self.horizon != other.horizon {
            return Err(Error::dim("incompatible block-lower-triangular product"));
        }
        Ok(Self {
            data: &self.data * &other.data,
            block_rows: self.block_rows,
            block_cols: other.block_cols,
            horizon: self.horizon,
        })
    }
}

fn check_shape(m: &Matrix, block_rows: usize, block_cols: usize, horizon: usize) -> Result<()> {
    if block_rows == 0 || block_cols == 0 {
        return Err(Error::dim("block sizes must be positive"));
    }
    let expected = ((horizon + 1) * block_rows, (horizon + 1) * block_cols);
    if m.shape() != expected {
        return Err(Error::dim(format!(
            "matrix is {}x{}, expected {}x{} for ({block_rows},{block_cols}) blocks and T={horizon}",
            m.nrows(),
            m.ncols(),
            expected.0,
            expected.1
        )));
    }
    Ok(())
}

fn max_upper_block_entry(m: &Matrix, block_rows: usize, block_cols: usize, horizon: usize) -> Result<f64> {
    check_shape(m, block_rows, block_cols, horizon)?;
    let mut max = 0.0f64;
    for i in 0..m.nrows() {
        let t = i / block_rows;
        for j in (t + 1) * block_cols..m.ncols() {
            max = max.max(m[(i, j)].abs());
        }
    }
    Ok(max)
}

fn zero_upper_blocks(m: &mut Matrix, block_rows: usize, block_cols: usize, _horizon: usize) {
    for i in 0..m.nrows() {
        let t = i / block_rows;
        for j in (t + 1) * block_cols..m.ncols() {
            m[(i, j)] = 0.0;
        }
    }
}

/// True iff every strictly-upper block entry has magnitude `<= tol`.
pub fn is_blt(m: &Matrix, block_rows: usize, block_cols: usize, horizon: usize, tol: f64) -> Result<bool> {
    Ok(max_upper_block_entry(m, block_rows, block_cols, horizon)? <= tol)
}

/// Lifted plant: block downshift `Z` and block-diagonal `calA`, `calB`, `calC`.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedOperators {
    pub horizon: usize,
    pub nx: usize,
    pub nu: usize,
    pub ny: usize,
    /// `(T+1) nx` square block-downshift.
    pub z: Matrix,
    /// `blkdiag(A_0, ..., A_{T-1}, 0)`.
    pub cal_a: Matrix,
    /// `blkdiag(B_0, ..., B_{T-1}, 0)`.
    pub cal_b: Matrix,
    /// `blkdiag(C_0, ..., C_T)`.
    pub cal_c: Matrix,
}

impl LiftedOperators {
    pub fn state_dim(&self) -> usize {
        (self.horizon + 1) * self.nx
    }
    pub fn input_dim(&self) -> usize {
        (self.horizon + 1) * self.nu
    }
    pub fn output_dim(&self) -> usize {
        (self.horizon + 1) * self.ny
    }

    /// `Z calA`.
    pub fn z_a(&self) -> Matrix {
        &self.z * &self.cal_a
    }

    /// `Z calB`.
    pub fn z_b(&self) -> Matrix {
        &self.z * &self.cal_b
    }

    /// `I - Z calA`, unit block-lower-triangular.
    pub fn i_minus_za(&self) -> Matrix {
        Matrix::identity(self.state_dim(), self.state_dim()) - self.z_a()
    }
}

pub fn lift(sys: &TimeVaryingLinearSystem) -> LiftedOperators {
    let (t_h, nx, nu, ny) = (sys.horizon(), sys.nx(), sys.nu(), sys.ny());
    let n = (t_h + 1) * nx;
    let mut z = Matrix::zeros(n, n);
    for t in 0..t_h {
        for i in 0..nx {
            z[((t + 1) * nx + i, t * nx + i)] = 1.0;
        }
    }
    let mut cal_a = Matrix::zeros(n, n);
    let mut cal_b = Matrix::zeros(n, (t_h + 1) * nu);
    let mut cal_c = Matrix::zeros((t_h + 1) * ny, n);
    for t in 0..t_h {
        cal_a.view_mut((t * nx, t * nx), (nx, nx)).copy_from(sys.a(t));
        cal_b.view_mut((t * nx, t * nu), (nx, nu)).copy_from(sys.b(t));
    }
    for t in 0..=t_h {
        cal_c.view_mut((t * ny, t * nx), (ny, nx)).copy_from(sys.c(t));
    }
    LiftedOperators { horizon: t_h, nx, nu, ny, z, cal_a, cal_b, cal_c }
}

/// Singular values in descending order.
pub fn singular_values(m: &Matrix) -> Vec<f64> {
    if m.is_empty() {
        return Vec::new();
    }
    let mut sv: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Number of singular values strictly above `epsilon * sigma_max`; 0 for the zero matrix.
pub fn tolerant_rank(m: &Matrix, epsilon: f64) -> usize {
    rank_from_singular_values(&singular_values(m), epsilon)
}

/// Counts `sv` entries above `epsilon * sv[0]`; `sv` must be descending.
pub fn rank_from_singular_values(sv: &[f64], epsilon: f64) -> usize {
    match sv.first() {
        Some(&max) if max > 0.0 => sv.iter().filter(|&&s| s > epsilon * max).count(),
        _ => 0,
    }
}

/// Serialized form of a block-lower-triangular matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BltFile {
    pub block_rows: usize,
    pub block_cols: usize,
    pub horizon: usize,
    pub data: Vec<Vec<f64>>,
}

impl BltFile {
    pub fn from_blt(k: &BlockLowerTriangular) -> Self {
        let d = k.data();
        Self {
            block_rows: k.block_rows(),
            block_cols: k.block_cols(),
            horizon: k.horizon(),
            data: (0..d.nrows()).map(|i| d.row(i).iter().copied().collect()).collect(),
        }
    }

    /// Exact structural check (tolerance 0).
    pub fn into_blt(self) -> Result<BlockLowerTriangular> {
        self.into_blt_with_tolerance(0.0)
    }

    pub fn into_blt_with_tolerance(self, tol: f64) -> Result<BlockLowerTriangular> {
        let nrows = self.data.len();
        let ncols = self.data.first().map_or(0, Vec::len);
        if self.data.iter().any(|r| r.len() != ncols) {
            return Err(Error::Parse("matrix has ragged rows".into()));
        }
        let m = Matrix::from_fn(nrows, ncols, |i, j| self.data[i][j]);
        BlockLowerTriangular::with_tolerance(m, self.block_rows, self.block_cols, self.horizon, tol)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn example_k() -> Matrix {
        #[rustfmt::skip]
        let k = Matrix::from_row_slice(4, 4, &[
            5.0,  0.0, 0.0, 0.0,
            10.0, 0.0, 0.0, 0.0,
            0.0,  3.0, 4.0, 0.0,
            15.0, 6.0, 8.0, 0.0,
        ]);
        k
    }

    #[test]
    fn lift_scalar_one_step() {
        let sys = TimeVaryingLinearSystem::time_invariant(
            1,
            Matrix::from_element(1, 1, 2.0),
            Matrix::from_element(1, 1, 1.0),
            Matrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let ops = lift(&sys);
        assert_eq!(ops.cal_a, Matrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]));
        assert_eq!(ops.z, Matrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]));
        assert_eq!(ops.cal_b, Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn lift_drone_dimensions() {
        let p = crate::problem::drone_benchmark_problem();
        let ops = lift(&p.system);
        assert_eq!(ops.cal_c.shape(), (42, 84));
        assert_eq!(ops.cal_b.shape(), (84, 42));
        // trailing zero blocks
        assert!(ops.cal_a.view((80, 80), (4, 4)).iter().all(|&v| v == 0.0));
        assert!(ops.cal_b.view((80, 40), (4, 2)).iter().all(|&v| v == 0.0));
        // position selection on every block
        for t in 0..=20 {
            assert_eq!(ops.cal_c[(2 * t, 4 * t)], 1.0);
            assert_eq!(ops.cal_c[(2 * t + 1, 4 * t + 1)], 1.0);
        }
        assert_eq!(ops.cal_c.iter().filter(|&&v| v != 0.0).count(), 42);
    }

    #[test]
    fn tolerant_rank_examples() {
        assert_eq!(tolerant_rank(&Matrix::identity(3, 3), 0.5), 3);
        assert_eq!(tolerant_rank(&Matrix::zeros(3, 4), 1e-9), 0);
        let d = Matrix::from_diagonal(&crate::Vector::from_column_slice(&[1.0, 1e-12]));
        assert_eq!(tolerant_rank(&d, 1e-9), 1);
        assert_eq!(tolerant_rank(&d, 1e-13), 2);
    }

    #[test]
    fn blt_checks() {
        let k = example_k();
        assert!(is_blt(&k, 1, 1, 3, 0.0).unwrap());
        assert!(!is_blt(&k.transpose(), 1, 1, 3, 0.0).unwrap());
        let mut noisy = k.clone();
        noisy[(0, 3)] = 1e-12;
        assert!(!is_blt(&noisy, 1, 1, 3, 0.0).unwrap());
        assert!(is_blt(&noisy, 1, 1, 3, 1e-9).unwrap());
        let cleaned = BlockLowerTriangular::with_tolerance(noisy, 1, 1, 3, 1e-9).unwrap();
        assert_eq!(cleaned.data()[(0, 3)], 0.0);
        assert!(matches!(is_blt(&k, 2, 1, 3, 0.0), Err(Error::Dimension(_))));
    }

    #[test]
    fn blt_file_round_trip() {
        let k = BlockLowerTriangular::new(example_k(), 1, 1, 3).unwrap();
        let text = serde_json::to_string(&BltFile::from_blt(&k)).unwrap();
        let back: BltFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back.into_blt().unwrap(), k);
    }

    fn random_blt(rows: usize, cols: usize, horizon: usize, vals: &[f64]) -> BlockLowerTriangular {
        let m = Matrix::from_fn((horizon + 1) * rows, (horizon + 1) * cols, |i, j| {
            vals[(i * 31 + j * 7) % vals.len()]
        });
        BlockLowerTriangular::project(m, rows, cols, horizon).unwrap()
    }

    proptest! {
        #[test]
        fn blt_product_is_blt(
            m in 1usize..4, p in 1usize..4, n in 1usize..4, horizon in 0usize..5,
            vals in proptest::collection::vec(-3.0f64..3.0, 16..64),
        ) {
            let a = random_blt(m, p, horizon, &vals);
            let b = random_blt(p, n, horizon, &vals[3..]);
            let prod = a.mul(&b).unwrap();
            prop_assert!(is_blt(prod.data(), m, n, horizon, 0.0).unwrap());
        }

        #[test]
        fn identity_plus_strictly_lower_is_invertible(
            nx in 1usize..4, horizon in 1usize..6,
            vals in proptest::collection::vec(-2.0f64..2.0, 16..64),
        ) {
            let d = random_blt(nx, nx, horizon, &vals);
            let sys = TimeVaryingLinearSystem::time_invariant(
                horizon, Matrix::identity(nx, nx), Matrix::identity(nx, 1), Matrix::identity(1, nx),
            ).unwrap();
            let ops = lift(&sys);
            let mut block_diag = Matrix::zeros(d.data().nrows(), d.data().ncols());
            for t in 0..=horizon {
                block_diag.view_mut((t * nx, t * nx), (nx, nx)).copy_from(&d.block(t, t));
            }
            let strictly_lower = &ops.z * &block_diag;
            // strictly lower: diagonal blocks vanish as well
            for t in 0..=horizon {
                prop_assert!(strictly_lower.view((t * nx, t * nx), (nx, nx)).iter().all(|&v| v == 0.0));
            }
            let m = Matrix::identity(ops.state_dim(), ops.state_dim()) + strictly_lower;
            let rhs = Matrix::from_fn(ops.state_dim(), 2, |i, j| (i + 2 * j) as f64);
            let sol = m.clone().lu().solve(&rhs).expect("invertible");
            prop_assert!((&m * sol - rhs).amax() < 1e-10);
        }
    }
}
