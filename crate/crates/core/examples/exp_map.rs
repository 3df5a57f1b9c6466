//! Exponentiates a rotation velocity field and compares it with the exact
//! rotation, then checks invertibility and folding.

use tlrn::fields::{compose, exp_map, jacobian_determinant};
use tlrn::{BoundaryMode, VelocityField};

fn main() -> tlrn::Result<()> {
    let n = 64;
    let omega = 0.1;
    let c = (n as f64 - 1.0) / 2.0;
    let v = VelocityField::from_fn(n, n, |x, y| (-omega * (y as f64 - c), omega * (x as f64 - c)))?;

    let (s, co) = omega.sin_cos();
    for k in [2, 4, 6, 8] {
        let phi = exp_map(&v, k, BoundaryMode::Clamp)?;
        let mut worst = 0.0f64;
        for y in 16..48 {
            for x in 16..48 {
                let (dx, dy) = (x as f64 - c, y as f64 - c);
                let (ux, uy) = phi.at(x, y);
                worst = worst.max((ux - (co * dx - s * dy - dx)).hypot(uy - (s * dx + co * dy - dy)));
            }
        }
        println!("K = {k}: max error against the exact rotation {worst:.2e} px");
    }

    let fwd = exp_map(&v, 6, BoundaryMode::Clamp)?;
    let back = exp_map(&v.scaled(-1.0), 6, BoundaryMode::Clamp)?;
    let round = compose(&fwd, &back, BoundaryMode::Clamp)?;
    let centre = round.at(32, 32);
    println!("exp(v)∘exp(-v) at the centre deviates by {:.2e} px", centre.0.hypot(centre.1));

    let jac = jacobian_determinant(&fwd)?;
    println!(
        "det J at the centre {:.6}, folded pixels {}",
        jac.at(32, 32),
        jac.negative_count()
    );
    Ok(())
}
