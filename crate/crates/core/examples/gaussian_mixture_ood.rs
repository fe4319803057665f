//! Three Gaussian blobs and a far-away fourth cluster that never appears in
//! training. Distance-aware models flag it; the others stay confident.
//!
//!     cargo run --release --example gaussian_mixture_ood [seed]

use hetsngp::cli::bench::{mixture_panels, OodBench};
use hetsngp::model::VariantKind;

fn main() -> hetsngp::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let panels = mixture_panels(&OodBench::default(), &VariantKind::ALL, seed)?;
    println!("{:<16} {:>7} {:>7} {:>7} {:>14}", "variant", "id acc", "auroc", "fpr95", "ood max-prob");
    for p in panels {
        println!(
            "{:<16} {:>7.3} {:>7.3} {:>7.3} {:>14.3}",
            p.variant.name(),
            p.id_accuracy,
            p.report.auroc,
            p.report.fpr_at_95,
            p.report.mean_ood_confidence
        );
    }
    Ok(())
}
