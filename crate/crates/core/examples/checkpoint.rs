//! Train from a run configuration, save a checkpoint, load it back and
//! check that predictions are unchanged.

use hetsngp::cli::checkpoint::Checkpoint;
use hetsngp::cli::config::RunConfig;
use hetsngp::cli::{checkpoint_proba, train_checkpoint};

fn main() -> hetsngp::Result<()> {
    let cfg = RunConfig::from_json(
        r#"{
            "dataset": {"kind": "two_moons", "n": 400},
            "variant": "hetsngp",
            "features": {"hidden_dim": 32, "output_dim": 32, "num_residual_blocks": 2},
            "rff": {"num_features": 128, "median_lengthscale": true},
            "train": {"epochs": 30, "batch_size": 32},
            "predict": {"mc_samples": 100}
        }"#,
    )?;
    let (ck, report, _) = train_checkpoint(&cfg)?;
    println!("train accuracy {:.3}", report.final_train_accuracy);

    let path = std::env::temp_dir().join("hetsngp_example.ckpt");
    let bytes = ck.save(&path)?;
    let back = Checkpoint::load(&path)?;
    assert_eq!(back.to_bytes()?, bytes);
    // Raw features: the checkpoint carries its own standardizer.
    let x = cfg.dataset.load()?.x;
    let a = checkpoint_proba(&ck, &x)?;
    let b = checkpoint_proba(&back, &x)?;
    println!("{} bytes, predictions identical: {}", bytes.len(), a == b);
    std::fs::remove_file(path)?;
    Ok(())
}
