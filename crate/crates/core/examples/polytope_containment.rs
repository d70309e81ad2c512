//! Checks whether the image of a box under a linear map fits inside a
//! target box, with an LP certificate and the closed-form test.

use commsynth::conic::BackendSettings;
use commsynth::containment::{containment_oracle, find_certificate, ProductPolytope};
use commsynth::{BoxSet, Matrix};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let noise = ProductPolytope::new(vec![BoxSet::symmetric(2, 1.0)?.to_hpolytope()]);
    let rotation = Matrix::from_row_slice(2, 2, &[0.6, -0.8, 0.8, 0.6]);
    let settings = BackendSettings::with_tol(1e-9);

    for radius in [1.3, 1.5] {
        let target = BoxSet::symmetric(2, radius)?.to_hpolytope();
        let s = ProductPolytope::new(vec![target.clone()]);
        let closed_form = containment_oracle(&noise, &target, &rotation)?;
        match find_certificate(&noise, &s, &rotation, &settings)? {
            Some(cert) => {
                let (min, matched, slack) = cert.residuals(&noise, &s, &rotation);
                println!("radius {radius}: contained (closed form {closed_form}), min multiplier {min:.1e}, match error {matched:.1e}, bound slack {slack:.2}");
                println!("Lambda{}", cert.lambda);
            }
            None => println!("radius {radius}: not contained (closed form {closed_form})"),
        }
    }
    Ok(())
}
