// Compare the three partition schemes on one dataset. Prints each
// client's label histogram so the heterogeneity is visible at a glance:
// iid clients mirror the global distribution, unimodal clients hold a
// couple of label-sorted shards, multimodal mixes sorted and iid pools.
//
//   cargo run --example partition_heterogeneity

use std::sync::Arc;

use fedzda::data::{partition, synthetic_pair, PartitionPlan, SyntheticSpec};

fn main() -> fedzda::Result<()> {
    let spec = SyntheticSpec {
        classes: 5,
        train_per_class: 24,
        test_per_class: 5,
        height: 6,
        width: 6,
        ..Default::default()
    };
    let (train, _) = synthetic_pair(&spec, 13)?;
    let source = Arc::new(train);

    let plans = [
        ("iid", PartitionPlan::Iid { clients: 6 }),
        ("unimodal", PartitionPlan::Unimodal { clients: 6, shards_per_client: 2 }),
        ("multimodal", PartitionPlan::Multimodal { clients: 6, weights: vec![0.5, 0.5] }),
    ];

    for (name, plan) in plans {
        let outcome = partition(Arc::clone(&source), &plan, 13)?;
        println!("{name}:");
        for c in &outcome.clients {
            println!(
                "  client {:>2}  n={:<3}  classes={}  histogram {:?}",
                c.id,
                c.len(),
                c.distinct_classes(),
                c.class_histogram(),
            );
        }
        for w in &outcome.warnings {
            println!("  warning: {w}");
        }
        let total: usize = outcome.clients.iter().map(|c| c.len()).sum();
        match plan {
            // Multimodal equalizes client sizes across subpopulations and
            // leaves the remainder unused.
            PartitionPlan::Multimodal { .. } => {
                println!("  covered {total}/{} samples", source.len())
            }
            _ => assert_eq!(total, source.len(), "covers every sample exactly once"),
        }
        println!();
    }
    Ok(())
}
