//! Causal factorization `K = D E` of a block-lower-triangular controller.
//!
//! Rows of `K` are scanned top to bottom. A row that is (numerically)
//! independent of the rows above it becomes the next encoder row `E_k`; its
//! time block fixes the transmission time `t_k`. Every row of `K` is then
//! written as a combination of the encoder rows available at that point,
//! which gives the decoder row. The band equals `rank K`, so the encoder
//! sends exactly `rank K` scalar messages.

use serde::{Deserialize, Serialize};

use crate::block::{singular_values, tolerant_rank, BlockLowerTriangular};
use crate::error::{Error, Result};
use crate::{Matrix, Vector};

#[derive(Debug, Clone, PartialEq)]
pub struct CausalFactorization {
    /// Decoder, `(T+1) nu x r`.
    pub d: Matrix,
    /// Encoder, `r x (T+1) ny`.
    pub e: Matrix,
    /// Transmission time of each message, non-decreasing in `0..=T`.
    pub times: Vec<usize>,
    /// Row of `K` each encoder row was copied from (0-based, increasing).
    pub pivot_rows: Vec<usize>,
    pub nu: usize,
    pub ny: usize,
    pub horizon: usize,
}

impl CausalFactorization {
    pub fn band(&self) -> usize {
        self.times.len()
    }

    /// `D E`.
    pub fn product(&self) -> Matrix {
        &self.d * &self.e
    }

    /// `D E` as a block-lower-triangular controller (exact when causal).
    pub fn controller(&self) -> Result<BlockLowerTriangular> {
        BlockLowerTriangular::new(self.product(), self.nu, self.ny, self.horizon)
    }

    /// Builds a factorization from explicit parts, checking shapes only.
    pub fn from_parts(
        d: Matrix,
        e: Matrix,
        times: Vec<usize>,
        (nu, ny, horizon): (usize, usize, usize),
    ) -> Result<Self> {
        let r = times.len();
        if d.shape() != ((horizon + 1) * nu, r) || e.shape() != (r, (horizon + 1) * ny) {
            return Err(Error::dim(format!(
                "decoder {}x{} / encoder {}x{} do not match band {r}, nu={nu}, ny={ny}, T={horizon}",
                d.nrows(),
                d.ncols(),
                e.nrows(),
                e.ncols()
            )));
        }
        Ok(Self { d, e, pivot_rows: Vec::new(), times, nu, ny, horizon })
    }
}

/// Prefix ranks `r_l = rank K_{1:l,:}` for `l = 1..=(T+1) nu`, with every
/// prefix judged against the same threshold `epsilon * sigma_max(K)`.
pub fn rank_profile(k: &BlockLowerTriangular, epsilon: f64) -> Vec<usize> {
    let m = k.data();
    let threshold = epsilon * singular_values(m).first().copied().unwrap_or(0.0);
    let profile = RowBasis::scan(m, threshold).profile;
    if profile.last().copied().unwrap_or(0) == tolerant_rank(m, epsilon) {
        profile
    } else {
        // near-threshold rows can make the residual test and the spectrum disagree
        rank_profile_svd(m, threshold)
    }
}

/// Prefix ranks from one SVD per prefix: singular values above `threshold`.
pub fn rank_profile_svd(m: &Matrix, threshold: f64) -> Vec<usize> {
    (1..=m.nrows())
        .map(|l| {
            let sv = singular_values(&m.rows(0, l).into_owned());
            if threshold == 0.0 && sv.first().map_or(true, |&s| s == 0.0) {
                0
            } else {
                sv.iter().filter(|&&s| s > threshold).count()
            }
        })
        .collect()
}

/// Orthonormal basis of the accepted rows, grown one row at a time.
struct RowBasis {
    /// Orthonormal rows `q_1..q_r`.
    q: Vec<Vector>,
    profile: Vec<usize>,
}

impl RowBasis {
    fn scan(m: &Matrix, threshold: f64) -> Self {
        let mut basis = RowBasis { q: Vec::new(), profile: Vec::with_capacity(m.nrows()) };
        for l in 0..m.nrows() {
            let row: Vector = m.row(l).transpose();
            let (residual, _) = basis.project_out(&row);
            let norm = residual.norm();
            if norm > threshold && norm > 0.0 {
                basis.q.push(residual / norm);
            }
            basis.profile.push(basis.q.len());
        }
        basis
    }

    /// Residual of `row` against the basis, two Gram-Schmidt passes.
    fn project_out(&self, row: &Vector) -> (Vector, Vector) {
        let mut r = row.clone();
        let mut coeffs = Vector::zeros(self.q.len());
        for _ in 0..2 {
            for (k, q) in self.q.iter().enumerate() {
                let c = q.dot(&r);
                coeffs[k] += c;
                r.axpy(-c, q, 1.0);
            }
        }
        (r, coeffs)
    }
}

/// Factors `k` with band `tolerant_rank(k, epsilon)`.
pub fn causal_factorize(k: &BlockLowerTriangular, epsilon: f64) -> Result<CausalFactorization> {
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidOptions(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let (nu, ny, horizon) = (k.block_rows(), k.block_cols(), k.horizon());
    let m = k.data();
    let profile = rank_profile(k, epsilon);
    let band = profile.last().copied().unwrap_or(0);

    // c_k = min{l | r_l = k}
    let pivot_rows: Vec<usize> = (1..=band)
        .map(|rank| profile.iter().position(|&r| r == rank).expect("profile steps by one"))
        .collect();
    let times: Vec<usize> = pivot_rows.iter().map(|&c| c / nu).collect();
    let mut e = Matrix::zeros(band, m.ncols());
    for (row, &c) in pivot_rows.iter().enumerate() {
        e.row_mut(row).copy_from(&m.row(c));
    }

    // E = L Q with Q orthonormal rows and L lower triangular
    let mut q = Matrix::zeros(band, m.ncols());
    let mut l_mat = Matrix::zeros(band, band);
    for kk in 0..band {
        let mut v: Vector = e.row(kk).transpose();
        for _ in 0..2 {
            for j in 0..kk {
                let c = q.row(j).transpose().dot(&v);
                l_mat[(kk, j)] += c;
                v.axpy(-c, &q.row(j).transpose(), 1.0);
            }
        }
        let norm = v.norm();
        if norm == 0.0 {
            return Err(Error::Internal(format!("encoder row {kk} is dependent on earlier rows")));
        }
        l_mat[(kk, kk)] = norm;
        q.row_mut(kk).copy_from(&(v / norm).transpose());
    }

    let mut d = Matrix::zeros(m.nrows(), band);
    for l in 0..m.nrows() {
        let rl = profile[l];
        if rl == 0 {
            continue;
        }
        let target: Vector = m.row(l).transpose();
        let lower = l_mat.view((0, 0), (rl, rl)).into_owned();
        let basis = q.rows(0, rl).into_owned();
        let e_prefix = e.rows(0, rl).into_owned();
        // d L = Q target  <=>  L' d' = Q target
        let solve = |rhs: &Vector| -> Result<Vector> {
            lower
                .transpose()
                .solve_upper_triangular(rhs)
                .ok_or_else(|| Error::Internal(format!("row {l}: singular encoder prefix")))
        };
        let mut coeffs = solve(&(&basis * &target))?;
        // one refinement step on the least-squares residual
        let residual = &target - e_prefix.transpose() * &coeffs;
        coeffs += solve(&(&basis * residual))?;
        d.view_mut((l, 0), (1, rl)).copy_from(&coeffs.transpose());
    }

    Ok(CausalFactorization { d, e, times, pivot_rows, nu, ny, horizon })
}

/// Checks the zero patterns: encoder row `k` uses no measurement after `t_k`,
/// decoder column `k` is unused before `t_k`. Exact zero test.
pub fn verify_causality(f: &CausalFactorization) -> bool {
    let r = f.band();
    if f.d.ncols() != r || f.e.nrows() != r {
        return false;
    }
    if f.times.windows(2).any(|w| w[0] > w[1]) || f.times.iter().any(|&t| t > f.horizon) {
        return false;
    }
    f.times.iter().enumerate().all(|(k, &tk)| {
        let encoder_ok = ((tk + 1) * f.ny..f.e.ncols()).all(|c| f.e[(k, c)] == 0.0);
        let decoder_ok = (0..tk * f.nu).all(|row| f.d[(row, k)] == 0.0);
        encoder_ok && decoder_ok
    })
}

/// Factorization export document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorizationFile {
    pub band: usize,
    pub times: Vec<usize>,
    #[serde(default)]
    pub pivot_rows: Vec<usize>,
    pub nu: usize,
    pub ny: usize,
    pub horizon: usize,
    #[serde(rename = "D")]
    pub d: Vec<Vec<f64>>,
    #[serde(rename = "E")]
    pub e: Vec<Vec<f64>>,
}

fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn matrix_of(rows: &[Vec<f64>], nrows: usize, ncols: usize, what: &str) -> Result<Matrix> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Parse(format!("{what} must be {nrows}x{ncols}")));
    }
    Ok(Matrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl From<&CausalFactorization> for FactorizationFile {
    fn from(f: &CausalFactorization) -> Self {
        Self {
            band: f.band(),
            times: f.times.clone(),
            pivot_rows: f.pivot_rows.clone(),
            nu: f.nu,
            ny: f.ny,
            horizon: f.horizon,
            d: rows_of(&f.d),
            e: rows_of(&f.e),
        }
    }
}

impl TryFrom<FactorizationFile> for CausalFactorization {
    type Error = Error;

    fn try_from(file: FactorizationFile) -> Result<Self> {
        if file.times.len() != file.band {
            return Err(Error::Parse(format!(
                "band {} but {} transmission times",
                file.band,
                file.times.len()
            )));
        }
        let d = matrix_of(&file.d, (file.horizon + 1) * file.nu, file.band, "D")?;
        let e = matrix_of(&file.e, file.band, (file.horizon + 1) * file.ny, "E")?;
        let mut f = CausalFactorization::from_parts(d, e, file.times, (file.nu, file.ny, file.horizon))?;
        f.pivot_rows = file.pivot_rows;
        Ok(f)
    }
}
