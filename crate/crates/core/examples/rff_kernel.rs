//! Random Fourier features approximate the RBF kernel; the error shrinks
//! roughly as 1/sqrt(m).

use hetsngp::linalg::{sample_gaussian, Rng};
use hetsngp::rff_gp::RffProjection;

fn mean_error(m: usize, rng: &mut Rng) -> hetsngp::Result<f64> {
    let lengthscale = 1.5;
    let proj = RffProjection::new(4, m, lengthscale, rng)?;
    let a = sample_gaussian(rng, 500, 4)?;
    let b = sample_gaussian(rng, 500, 4)?;
    let (fa, fb) = (proj.featurize(&a)?, proj.featurize(&b)?);
    let mut total = 0.0;
    for i in 0..500 {
        let approx: f64 = fa.row(i).iter().zip(fb.row(i)).map(|(x, y)| x * y).sum();
        let d2: f64 = a.row(i).iter().zip(b.row(i)).map(|(x, y)| (x - y).powi(2)).sum();
        total += (approx - (-d2 / (2.0 * lengthscale * lengthscale)).exp()).abs();
    }
    Ok(total / 500.0)
}

fn main() -> hetsngp::Result<()> {
    let mut rng = Rng::new(7);
    println!("{:>6}  mean |error|", "m");
    for m in [16, 64, 256, 1024, 4096] {
        println!("{m:>6}  {:.4}", mean_error(m, &mut rng)?);
    }
    Ok(())
}
