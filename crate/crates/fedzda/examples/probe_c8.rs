// Scratch diagnostic: model-quality ordering across five seeds.
// Usage: cargo run --example probe_c8 -- [tpc] [sep] [rounds] [cepochs]
use std::sync::Arc;

use fedzda::data::{self, SyntheticSpec};
use fedzda::federation::FedConfig;
use fedzda::metrics::{self, QualityStudyConfig};
use fedzda::models::ArchitectureSpec;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let tpc: usize = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(60);
    let sep: f64 = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(0.3);
    let rounds: usize = args.get(3).map(|s| s.parse()).transpose()?.unwrap_or(8);
    let cepochs: usize = args.get(4).map(|s| s.parse()).transpose()?.unwrap_or(6);

    let mut ok = 0;
    for seed in 1..=5u64 {
        let spec = SyntheticSpec {
            classes: 6,
            train_per_class: tpc,
            test_per_class: 40,
            height: 16,
            width: 16,
            class_sep: sep,
            noise_std: 0.3,
            ..Default::default()
        };
        let (train, test) = data::synthetic_pair(&spec, seed)?;
        let cfg = QualityStudyConfig {
            arch: ArchitectureSpec::toy_cnn(1, 16, 16, 6),
            fed: FedConfig {
                rounds,
                clients: 8,
                participation: 0.5,
                local_epochs: 2,
                batch_size: 10,
                learning_rate: 0.03,
                seed,
                ..Default::default()
            },
            centralized_epochs: cepochs,
            noniid_shards_per_client: 2,
            zsdg: Default::default(),
        };
        let report = metrics::model_quality_study(Arc::new(train), &test, &cfg)?;
        let a = report.rows[0].external_acc_pct;
        let b = report.rows[1].external_acc_pct;
        let c = report.rows[2].external_acc_pct;
        let hold = a >= b && b >= c;
        ok += hold as usize;
        println!("seed {seed}: central {a:5.1}  fed-iid {b:5.1}  fed-noniid {c:5.1}  ordered={hold}");
    }
    println!("ordered in {ok}/5 seeds");
    Ok(())
}
