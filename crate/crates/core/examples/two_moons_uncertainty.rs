//! Deterministic vs HetSNGP on two moons: both fit the data, only one
//! becomes uncertain away from it.
//!
//!     cargo run --release --example two_moons_uncertainty [grid.csv]

use hetsngp::cli::bench::ring_probes;
use hetsngp::data::two_moons;
use hetsngp::model::{build_variant, ModelConfig, ModelDims, VariantKind};

fn main() -> hetsngp::Result<()> {
    let data = two_moons(600, 0.1, 0)?;
    let mut cfg = ModelConfig::default();
    cfg.features.hidden_dim = 64;
    cfg.features.output_dim = 64;
    cfg.features.num_residual_blocks = 2;
    cfg.rff.num_features = 256;
    cfg.rff.median_lengthscale = true;
    cfg.train.epochs = 60;
    cfg.train.batch_size = 32;
    cfg.predict.mc_samples = 200;
    let dims = ModelDims { input_dim: 2, num_classes: 2 };

    let far = ring_probes((0.5, 0.25), 6.0, 200, 1);
    let near = data.x.select_rows(&(0..200).collect::<Vec<_>>());
    println!("{:<16} {:>9} {:>13} {:>12}", "variant", "train acc", "max-prob near", "max-prob far");
    for kind in [VariantKind::Deterministic, VariantKind::Hetsngp] {
        let mut model = build_variant(kind, dims, &cfg)?;
        let report = model.fit(&data)?;
        let mut rng = model.prediction_rng();
        let mean_conf = |p: hetsngp::Matrix| {
            (0..p.rows()).map(|i| p.row(i).iter().cloned().fold(0.0, f64::max)).sum::<f64>() / p.rows() as f64
        };
        let near_p = mean_conf(model.predict_proba(&near, 200, &mut rng)?);
        let far_p = mean_conf(model.predict_proba(&far, 200, &mut rng)?);
        println!("{:<16} {:>9.3} {:>13.3} {:>12.3}", kind.name(), report.final_train_accuracy, near_p, far_p);

        if let (Some(path), VariantKind::Hetsngp) = (std::env::args().nth(1), kind) {
            let grid = hetsngp::cli::grid_points([-4.0, 5.0, -4.0, 4.5], 60);
            let p = model.predict_proba(&grid, 100, &mut rng)?;
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["x", "y", "max_prob"])?;
            for r in 0..grid.rows() {
                let m = p.row(r).iter().cloned().fold(0.0, f64::max);
                w.write_record([grid[(r, 0)].to_string(), grid[(r, 1)].to_string(), m.to_string()])?;
            }
            w.flush()?;
            println!("wrote {path}");
        }
    }
    Ok(())
}
