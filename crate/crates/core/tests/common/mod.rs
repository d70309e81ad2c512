//! Random instance generators and independent oracles shared by the
//! integration tests and the acceptance runner.

#![allow(dead_code)]

use commsynth::problem::{BoxSet, HPolytope};
use commsynth::{BlockLowerTriangular, Matrix, TimeVaryingLinearSystem};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Random block-lower-triangular matrix with exact rank deficiency: each row
/// is either zero, fresh random data on its causal support, or a random
/// combination of earlier rows (which keeps the causal pattern).
pub fn random_deficient_blt(rng: &mut ChaCha8Rng, nu: usize, ny: usize, horizon: usize) -> BlockLowerTriangular {
    let rows = (horizon + 1) * nu;
    let cols = (horizon + 1) * ny;
    let mut m = Matrix::zeros(rows, cols);
    for l in 0..rows {
        let support = (l / nu + 1) * ny;
        let roll: f64 = rng.gen();
        if roll < 0.15 {
            continue;
        } else if roll < 0.55 || l == 0 {
            for c in 0..support {
                if rng.gen_bool(0.8) {
                    m[(l, c)] = gaussian(rng);
                }
            }
        } else {
            let picks = rng.gen_range(1..=l.min(3));
            for _ in 0..picks {
                let src = rng.gen_range(0..l);
                let coef = gaussian(rng);
                for c in 0..cols {
                    m[(l, c)] += coef * m[(src, c)];
                }
            }
        }
    }
    BlockLowerTriangular::new(m, nu, ny, horizon).expect("generator keeps the causal pattern")
}

/// Random plant with moderate gains so responses stay well scaled over short horizons.
pub fn random_system(rng: &mut ChaCha8Rng, nx: usize, nu: usize, ny: usize, horizon: usize) -> TimeVaryingLinearSystem {
    let mut mat = |r: usize, c: usize, scale: f64| Matrix::from_fn(r, c, |_, _| scale * gaussian(rng));
    let a = (0..horizon).map(|_| mat(nx, nx, 0.6 / (nx as f64).sqrt())).collect();
    let b = (0..horizon).map(|_| mat(nx, nu, 0.8)).collect();
    let c = (0..=horizon).map(|_| mat(ny, nx, 0.8)).collect();
    TimeVaryingLinearSystem::new(horizon, (nx, nu, ny), a, b, c).unwrap()
}

/// Singular values from the eigenvalues of `M' M`, descending. Only
/// trustworthy down to about `sqrt(machine eps) * sigma_max`.
pub fn singular_values_via_gram(m: &Matrix) -> Vec<f64> {
    let gram = m.transpose() * m;
    let mut ev: Vec<f64> = gram.symmetric_eigen().eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

/// Rank by row reduction with partial pivoting and a relative pivot threshold.
pub fn rank_by_elimination(m: &Matrix, rel_tol: f64) -> usize {
    let mut a = m.clone();
    let scale = a.amax();
    if scale == 0.0 {
        return 0;
    }
    let (rows, cols) = a.shape();
    let mut rank = 0;
    for c in 0..cols {
        if rank == rows {
            break;
        }
        let (p, pv) = (rank..rows).map(|r| (r, a[(r, c)].abs())).fold((rank, -1.0), |b, x| if x.1 > b.1 { x } else { b });
        if pv <= rel_tol * scale {
            continue;
        }
        a.swap_rows(rank, p);
        for r in rank + 1..rows {
            let f = a[(r, c)] / a[(rank, c)];
            if f != 0.0 {
                for k in c..cols {
                    a[(r, k)] -= f * a[(rank, k)];
                }
            }
        }
        rank += 1;
    }
    rank
}

/// Random box with lower <= upper.
pub fn random_box(rng: &mut ChaCha8Rng, dim: usize) -> BoxSet {
    let center: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
    let radius: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.1..2.0)).collect();
    let lo: Vec<f64> = center.iter().zip(&radius).map(|(c, r)| c - r).collect();
    let hi: Vec<f64> = center.iter().zip(&radius).map(|(c, r)| c + r).collect();
    BoxSet::from_slices(&lo, &hi).unwrap()
}

/// Image bounds of a box under `m`, by enumerating every vertex.
pub fn image_bounds_by_vertices(m: &Matrix, b: &BoxSet) -> (Vec<f64>, Vec<f64>) {
    let d = b.dim();
    let mut lo = vec![f64::INFINITY; m.nrows()];
    let mut hi = vec![f64::NEG_INFINITY; m.nrows()];
    for mask in 0u32..(1 << d) {
        let p = commsynth::Vector::from_fn(d, |i, _| if mask >> i & 1 == 1 { b.upper()[i] } else { b.lower()[i] });
        let img = m * p;
        for r in 0..m.nrows() {
            lo[r] = lo[r].min(img[r]);
            hi[r] = hi[r].max(img[r]);
        }
    }
    (lo, hi)
}

/// Containment instance `M N ⊆ S` that is either safely inside or has one
/// face pushed at least `gap` inside the image.
pub struct ContainmentInstance {
    pub n: BoxSet,
    pub m: Matrix,
    pub s: HPolytope,
    pub contained: bool,
}

pub fn random_containment(rng: &mut ChaCha8Rng, gap: f64) -> ContainmentInstance {
    let d = rng.gen_range(1..=6);
    let out = rng.gen_range(1..=6);
    let n = random_box(rng, d);
    let m = Matrix::from_fn(out, d, |_, _| gaussian(rng));
    let (lo, hi) = image_bounds_by_vertices(&m, &n);
    let mut slo: Vec<f64> = lo.iter().map(|v| v - rng.gen_range(gap..1.0)).collect();
    let mut shi: Vec<f64> = hi.iter().map(|v| v + rng.gen_range(gap..1.0)).collect();
    let contained = rng.gen_bool(0.5);
    if !contained {
        let r = rng.gen_range(0..out);
        let push = rng.gen_range(gap..1.0);
        if rng.gen_bool(0.5) {
            shi[r] = hi[r] - push;
            slo[r] = slo[r].min(shi[r] - 0.1);
        } else {
            slo[r] = lo[r] + push;
            shi[r] = shi[r].max(slo[r] + 0.1);
        }
    }
    let s = BoxSet::from_slices(&slo, &shi).unwrap().to_hpolytope();
    ContainmentInstance { n, m, s, contained }
}
