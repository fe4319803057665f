//! A deep ensemble of HetSNGP models on noisy circles. Averaging
//! probabilities can only lower NLL relative to the average member.

use hetsngp::cli::bench::{bench_model, label_noise_data, LabelNoiseBench};
use hetsngp::metrics::{nll, NLL_FLOOR};
use hetsngp::model::{build_variant, ensemble_predict, ModelDims, VariantKind};
use hetsngp::Rng;

fn main() -> hetsngp::Result<()> {
    let (train, test) = label_noise_data(&LabelNoiseBench::default(), 0)?;
    let dims = ModelDims { input_dim: 2, num_classes: 3 };
    let mut members = Vec::new();
    for seed in 0..4 {
        let mut cfg = bench_model(3);
        cfg.train.epochs = 150;
        cfg.train.seed = seed;
        let mut m = build_variant(VariantKind::Hetsngp, dims, &cfg)?;
        m.fit(&train)?;
        members.push(m);
    }
    let mut member_nll = Vec::new();
    for m in &members {
        let p = m.predict_proba(&test.x, 100, &mut m.prediction_rng())?;
        member_nll.push(nll(&p, &test.y, NLL_FLOOR)?);
    }
    let p = ensemble_predict(&members, &test.x, 100, &mut Rng::new(0))?;
    let mean = member_nll.iter().sum::<f64>() / member_nll.len() as f64;
    println!("member NLLs: {member_nll:.4?}");
    println!("mean member NLL {mean:.4}, ensemble NLL {:.4}", nll(&p, &test.y, NLL_FLOOR)?);
    Ok(())
}
