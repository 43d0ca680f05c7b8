// Scratch diagnostic: window-mean fairness table across methods and seeds
// with an adjustable BN momentum.
// Usage: cargo run --example probe_seed5 -- <momentum> <iters> <pc> <se> [tpc] [sep]
use std::sync::Arc;
use std::time::Instant;

use fedzda::data::{self, SyntheticSpec};
use fedzda::federation::{self, EvalPlan, FedConfig, Method};
use fedzda::models::ArchitectureSpec;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let momentum: f64 = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(0.1);
    let iters: usize = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(350);
    let pc: usize = args.get(3).map(|s| s.parse()).transpose()?.unwrap_or(6);
    let se: usize = args.get(4).map(|s| s.parse()).transpose()?.unwrap_or(1);
    let tpc: usize = args.get(5).map(|s| s.parse()).transpose()?.unwrap_or(300);
    let sep: f64 = args.get(6).map(|s| s.parse()).transpose()?.unwrap_or(0.26);

    let mut arch = ArchitectureSpec::toy_cnn(1, 28, 28, 10);
    arch.bn_momentum = momentum;

    for method in [Method::FedAvg, Method::FedZdac, Method::FedZdas] {
        let t0 = Instant::now();
        println!("=== {method} momentum={momentum} iters={iters} pc={pc} se={se} tpc={tpc} sep={sep}");
        for seed in 1..=5u64 {
            let spec = SyntheticSpec {
                classes: 10,
                train_per_class: tpc,
                test_per_class: 50,
                class_sep: sep,
                noise_std: 0.3,
                ..Default::default()
            };
            let (train, test) = data::synthetic_pair(&spec, seed)?;
            let parts = data::partition(Arc::new(train), &data::PartitionPlan::Unimodal {
                clients: 20,
                shards_per_client: 2,
            }, seed)?;
            let mut clients = Vec::new();
            for c in &parts.clients {
                clients.push(data::local_split(c, 0.25)?);
            }
            let mut fed = FedConfig {
                method,
                rounds: 30,
                clients: 20,
                participation: 0.25,
                local_epochs: 5,
                batch_size: 10,
                learning_rate: 0.02,
                aug_start_round: 24,
                server_epochs: se,
                seed,
                ..Default::default()
            };
            fed.zsdg.iterations = iters;
            fed.zsdg.per_class = pc;
            let eval = EvalPlan::with_external(&test, 1);
            let out = federation::run(&fed, &arch, &clients, &eval)?;
            let (mut la, mut lv, mut cv, mut n) = (0.0, 0.0, 0.0, 0.0);
            for r in out.history.iter().filter(|r| r.round >= 26) {
                la += r.local_acc_mean_pct.unwrap_or(f64::NAN);
                lv += r.local_acc_variance_pct2.unwrap_or(f64::NAN);
                cv += r.class_variance_pct2.unwrap_or(f64::NAN);
                n += 1.0;
            }
            println!("seed {seed}: la {:.1}  lv {:.1}  cv {:.1}", la / n, lv / n, cv / n);
        }
        println!("[{:.0}s]", t0.elapsed().as_secs_f64());
    }
    Ok(())
}
