//! The Laplace posterior over the output weights, built by hand: accumulate
//! the per-class precision over some data, invert it, and watch the
//! predictive variance grow away from that data.

use hetsngp::linalg::{sample_gaussian, Matrix, Rng};
use hetsngp::model::tempered_softmax;
use hetsngp::rff_gp::{CovarianceMode, GpPosterior, RffProjection};

fn main() -> hetsngp::Result<()> {
    let mut rng = Rng::new(0);
    let proj = RffProjection::new(2, 128, 1.0, &mut rng)?;
    let mut post = GpPosterior::new(128, 2, CovarianceMode::ExactSum);

    // Training inputs scattered around the origin.
    let mut h = sample_gaussian(&mut rng, 300, 2)?;
    h.scale(0.7);
    let phi = proj.featurize(&h)?;
    let probs = tempered_softmax(&post.logits_mean(&phi)?, 1.0);
    post.accumulate_precision(&phi, &probs)?;
    post.finalize()?;

    println!("distance  predictive variance");
    for d in [0.0, 0.5, 1.0, 2.0, 3.0, 5.0, 8.0] {
        let probe = Matrix::from_rows(&[[d, 0.0]])?;
        let v = post.predictive_variance(&proj.featurize(&probe)?)?[0];
        println!("{d:>8.1}  {v:.4}");
    }

    let beta = post.sample_beta(&mut rng)?;
    println!("one posterior draw of beta: {} x {}", beta.rows(), beta.cols());
    Ok(())
}
