// Grade synthetic data with an oracle the generator never saw: train a
// reference classifier on real data, synthesize a batch from a separate
// generator model, and compare how oracle and generator label it. Oracle
// accuracy well above chance means the samples carry class-discriminative
// structure rather than just fooling their own source.
//
//   cargo run --example oracle_grading

use fedzda::data::{synthetic_pair, SyntheticSpec};
use fedzda::metrics::{eval_synthetic, train_oracle};
use fedzda::models::ArchitectureSpec;
use fedzda::zsdg::{generate, ZsdgConfig};

fn main() -> fedzda::Result<()> {
    let spec = SyntheticSpec {
        classes: 4,
        train_per_class: 50,
        test_per_class: 10,
        height: 8,
        width: 8,
        ..Default::default()
    };
    let (train, _) = synthetic_pair(&spec, 17)?;
    let arch = ArchitectureSpec::toy_cnn(1, 8, 8, 4);

    // Different seeds give independently initialized models; the oracle
    // trains longer to be the stronger judge.
    let generator = train_oracle(&train, &arch, 1, 170)?;
    let oracle = train_oracle(&train, &arch, 4, 17)?;

    let zcfg = ZsdgConfig { iterations: 60, per_class: 8, ..Default::default() };
    let batch = generate(&generator, &zcfg, 99)?;
    let report = eval_synthetic(&oracle, &generator, &batch)?;

    println!("class  oracle_acc  generator_acc");
    for c in 0..spec.classes {
        println!(
            "{:>5}  {:>9.1}%  {:>12.1}%",
            c, report.per_class_oracle_pct[c], report.per_class_generator_pct[c],
        );
    }
    println!(
        "\nmean oracle {:.1}% vs chance {:.1}% ({:.1}x chance)",
        report.mean_oracle_pct,
        100.0 / spec.classes as f64,
        report.chance_multiple(spec.classes),
    );
    println!("mean generator self-accuracy {:.1}%", report.mean_generator_pct);
    Ok(())
}
