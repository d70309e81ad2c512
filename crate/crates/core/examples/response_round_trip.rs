//! Closed-loop responses of a random low-rank controller on a random plant,
//! and recovery of the controller from them.

use commsynth::sls::{controller_from_response, response_from_controller, sls_residuals};
use commsynth::{lift, tolerant_rank, BlockLowerTriangular, Matrix, TimeVaryingLinearSystem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let horizon = 5;
    let (nx, nu, ny) = (3, 2, 2);
    let mut rand_mat = |r, c, s: f64| Matrix::from_fn(r, c, |_, _| s * rng.gen_range(-1.0..1.0));
    let a = (0..horizon).map(|_| rand_mat(nx, nx, 0.8)).collect();
    let b = (0..horizon).map(|_| rand_mat(nx, nu, 1.0)).collect();
    let c = (0..=horizon).map(|_| rand_mat(ny, nx, 1.0)).collect();
    let sys = TimeVaryingLinearSystem::new(horizon, (nx, nu, ny), a, b, c)?;
    let ops = lift(&sys);

    // rank-2 causal controller: two messages, sent at times 1 and 3
    let n = (horizon + 1) * nu;
    let m = (horizon + 1) * ny;
    let enc = Matrix::from_fn(2, m, |i, j| if j < (2 * i + 2) * ny { rng.gen_range(-1.0..1.0) } else { 0.0 });
    let dec = Matrix::from_fn(n, 2, |l, i| if l >= (2 * i + 1) * nu { rng.gen_range(-1.0..1.0) } else { 0.0 });
    let k = BlockLowerTriangular::project(&dec * &enc, nu, ny, horizon)?;

    let resp = response_from_controller(&k, &ops)?;
    let (left, right) = sls_residuals(&resp, &ops);
    println!("affine residuals   {left:.1e} {right:.1e}");
    println!("rank K             {}", tolerant_rank(k.data(), 1e-9));
    println!("rank Phi_uy        {}", tolerant_rank(resp.phi_uy.data(), 1e-9));
    let back = controller_from_response(&resp, &ops, 1e-8)?;
    println!("round-trip error   {:.1e}", (back.data() - k.data()).amax());
    Ok(())
}
