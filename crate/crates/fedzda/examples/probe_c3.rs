// Scratch diagnostic: ZSDG descent and self-classification on a trained toy model.
// Usage: cargo run --example probe_c3 -- [tpc] [sep] [epochs] [iters] [per_class]
use fedzda::data::{self, SyntheticSpec};
use fedzda::metrics::{self, accuracy};
use fedzda::models::ArchitectureSpec;
use fedzda::zsdg::{self, ZsdgConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let tpc: usize = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(80);
    let sep: f64 = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(0.35);
    let epochs: usize = args.get(3).map(|s| s.parse()).transpose()?.unwrap_or(8);
    let iters: usize = args.get(4).map(|s| s.parse()).transpose()?.unwrap_or(500);
    let per_class: usize = args.get(5).map(|s| s.parse()).transpose()?.unwrap_or(10);

    let mut ok = 0;
    for seed in 1..=5u64 {
        let spec = SyntheticSpec {
            classes: 4,
            train_per_class: tpc,
            test_per_class: 20,
            height: 16,
            width: 16,
            class_sep: sep,
            noise_std: 0.3,
            ..Default::default()
        };
        let (train, _test) = data::synthetic_pair(&spec, seed)?;
        let arch = ArchitectureSpec::toy_cnn(1, 16, 16, 4);
        let model = metrics::train_oracle(&train, &arch, epochs, seed)?;
        let all: Vec<usize> = (0..train.len()).collect();
        let train_acc = accuracy(&model, &train.gather(&all))?;

        let cfg = ZsdgConfig { iterations: iters, per_class, ..Default::default() };
        let batch = zsdg::generate(&model, &cfg, seed)?;
        let ratio = batch.final_loss.total / batch.initial_loss.total;
        let report = metrics::eval_synthetic(&model, &model, &batch)?;
        let selfc = report.mean_generator_pct;
        let pass = train_acc >= 95.0 && ratio < 0.5 && selfc >= 90.0;
        ok += pass as usize;
        println!(
            "seed {seed}: train {train_acc:5.1}%  loss {:.4} -> {:.6} (ratio {ratio:.4})  self {selfc:5.1}%  pass={pass}",
            batch.initial_loss.total, batch.final_loss.total
        );
    }
    println!("pass in {ok}/5 seeds");
    Ok(())
}
