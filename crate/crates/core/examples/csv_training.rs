//! Round trip through CSV: export a synthetic dataset, load it back with a
//! named label column, split, standardize, train and evaluate.

use hetsngp::data::{export_csv, gaussian_mixture_with_ood, load_csv, split, standardize_fit_transform, MixtureSpec};
use hetsngp::metrics::EvalReport;
use hetsngp::model::{build_variant, ModelConfig, ModelDims, VariantKind};

fn main() -> hetsngp::Result<()> {
    let path = std::env::temp_dir().join("hetsngp_mixture.csv");
    export_csv(&gaussian_mixture_with_ood(&MixtureSpec::default())?, &path)?;
    let data = load_csv(&path, "label", b',')?;
    println!(
        "loaded {} rows, features {:?}, labels {:?}",
        data.len(),
        data.feature_names,
        data.label_names
    );

    let (train, test) = split(&data, (0.75, 0.25), 1)?;
    let (train, test, _) = standardize_fit_transform(&train, &test)?;
    let test = test.in_distribution();
    let mut cfg = ModelConfig::default();
    cfg.features.hidden_dim = 32;
    cfg.features.output_dim = 32;
    cfg.features.num_residual_blocks = 2;
    cfg.rff.num_features = 128;
    cfg.rff.median_lengthscale = true;
    cfg.train.epochs = 30;
    cfg.train.batch_size = 32;
    let dims = ModelDims { input_dim: data.dim(), num_classes: data.num_classes };
    let mut model = build_variant(VariantKind::Sngp, dims, &cfg)?;
    model.fit(&train)?;
    let p = model.predict_proba(&test.x, 200, &mut model.prediction_rng())?;
    println!("{:?}", EvalReport::compute(&p, &test.y)?);
    std::fs::remove_file(path)?;
    Ok(())
}
