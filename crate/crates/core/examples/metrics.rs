//! Calibration and OOD metrics on a handful of hand-written predictions.

use hetsngp::metrics::{accuracy, auroc, ece, fpr_at_95, nll, EvalReport, ECE_BINS, NLL_FLOOR};
use hetsngp::Matrix;

fn main() -> hetsngp::Result<()> {
    let probs = Matrix::from_rows(&[
        [0.95, 0.05],
        [0.80, 0.20],
        [0.30, 0.70],
        [0.55, 0.45],
        [0.10, 0.90],
    ])?;
    let labels = [0, 0, 1, 1, 1];
    println!("accuracy {:.3}", accuracy(&probs, &labels)?);
    println!("nll      {:.3}", nll(&probs, &labels, NLL_FLOOR)?);
    println!("ece      {:.3}", ece(&probs, &labels, ECE_BINS)?);
    println!("{:?}", EvalReport::compute(&probs, &labels)?);

    // Uncertainty scores: larger means "more likely OOD".
    let scores = [0.05, 0.10, 0.20, 0.15, 0.60, 0.45, 0.70];
    let is_ood = [false, false, false, false, true, true, true];
    println!("auroc    {:.3}", auroc(&scores, &is_ood)?);
    // FPR@95 takes confidences, so flip the sign.
    let conf: Vec<f64> = scores.iter().map(|s| 1.0 - s).collect();
    println!("fpr@95   {:.3}", fpr_at_95(&conf, &is_ood)?);
    Ok(())
}
