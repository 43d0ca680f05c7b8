// Zero-shot data synthesis: train a small classifier, then reconstruct
// class-conditional inputs from nothing but its weights by descending on
// pixels until batch statistics match the stored running statistics and
// the classifier is confident in the requested label.
//
// Writes PNGs plus a manifest under target/zsdg_dump_example/.
//
//   cargo run --example invert_model_zsdg

use fedzda::data::{synthetic_pair, SyntheticSpec};
use fedzda::harness::zsdg_dump;
use fedzda::metrics::{eval_synthetic, train_oracle};
use fedzda::models::ArchitectureSpec;
use fedzda::zsdg::{generate, ZsdgConfig};

fn main() -> fedzda::Result<()> {
    let spec = SyntheticSpec {
        classes: 3,
        train_per_class: 60,
        test_per_class: 10,
        height: 8,
        width: 8,
        ..Default::default()
    };
    let (train, _) = synthetic_pair(&spec, 3)?;
    let arch = ArchitectureSpec::toy_cnn(1, 8, 8, 3);
    let model = train_oracle(&train, &arch, 3, 3)?;

    let zcfg = ZsdgConfig { iterations: 80, per_class: 6, ..Default::default() };
    let batch = generate(&model, &zcfg, 42)?;

    println!("inversion loss by iteration (every 10th):");
    for (i, l) in batch.loss_history.iter().enumerate().step_by(10) {
        println!("  iter {i:>3}  {l:.4}");
    }
    println!(
        "statistics term {:.4} -> {:.4}, label term {:.4} -> {:.4}",
        batch.initial_loss.bn, batch.final_loss.bn, batch.initial_loss.ce, batch.final_loss.ce,
    );

    // The generating model should recognize its own synthetic samples.
    let report = eval_synthetic(&model, &model, &batch)?;
    println!("generator labels its own batch at {:.1}%", report.mean_generator_pct);

    let out = std::path::Path::new("target/zsdg_dump_example");
    let manifest = zsdg_dump(&model, &zcfg, 42, out)?;
    println!("{} PNGs + manifest.json in {}", manifest.files.len(), out.display());
    Ok(())
}
