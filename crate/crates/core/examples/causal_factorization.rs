//! Factorizes a small causal controller into encoder and decoder and prints
//! the message schedule.

use commsynth::{causal_factorize, rank_profile, verify_causality, BlockLowerTriangular, Matrix};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    #[rustfmt::skip]
    let k = Matrix::from_row_slice(4, 4, &[
        5.0,  0.0, 0.0, 0.0,
        10.0, 0.0, 0.0, 0.0,
        0.0,  3.0, 4.0, 0.0,
        15.0, 6.0, 8.0, 0.0,
    ]);
    let k = BlockLowerTriangular::new(k, 1, 1, 3)?;

    println!("prefix ranks {:?}", rank_profile(&k, 1e-9));
    let f = causal_factorize(&k, 1e-9)?;
    println!("messages {} sent at {:?}", f.band(), f.times);
    println!("E (encoder){}", f.e);
    println!("D (decoder){}", f.d);
    println!("causal: {}", verify_causality(&f));
    println!("|DE - K| = {:.1e}", (f.product() - k.data()).amax());
    Ok(())
}
