use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use fedzda::config::{preset, preset_names, ExperimentConfig};
use fedzda::federation::Method;
use fedzda::models::{build, Model};
use fedzda::{harness, Error, Result};

#[derive(Parser)]
#[command(
    name = "fedzda",
    about = "Federated learning simulator with zero-shot data augmentation",
    after_help = "Relative dataset directories resolve against FEDZDA_DATA_DIR when set.\n\
                  Presets: use --preset with one of the names from `fedzda run --help`."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config (mutually exclusive with --preset).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Built-in config by name; see the list in the error message when
    /// the name is unknown.
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
    /// Replace the config's seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Rayon thread count; 1 forces serial execution, >1 enables
    /// parallel client updates.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured federation for every seed and write artifacts.
    Run {
        #[command(flatten)]
        common: Common,
        /// Override the aggregation method (fed_avg, fed_prox, fed_zdac,
        /// fed_zdas).
        #[arg(long)]
        method: Option<String>,
    },
    /// Sweep the round at which client-side augmentation switches on.
    SweepAugStart {
        #[command(flatten)]
        common: Common,
        /// Comma-separated start rounds, e.g. 1,5,10.
        #[arg(long, value_delimiter = ',', required = true)]
        starts: Vec<usize>,
    },
    /// Synthesize a batch from a model and dump PNGs plus a manifest.
    ZsdgDump {
        #[command(flatten)]
        common: Common,
        /// Saved model to invert; defaults to a fresh initialization,
        /// which only exercises the pipeline.
        #[arg(long, value_name = "PATH")]
        model: Option<PathBuf>,
        /// Override samples per class.
        #[arg(long)]
        per_class: Option<usize>,
        /// Override optimization iterations.
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Estimate empirical privacy leakage along the data chain.
    Audit {
        #[command(flatten)]
        common: Common,
    },
    /// Grade synthetic data with an independently trained oracle.
    EvalOracle {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match (&common.preset, &common.config) {
        (Some(_), Some(_)) => {
            return Err(Error::Usage("pass either --preset or --config, not both".into()))
        }
        (Some(name), None) => preset(name)?,
        (None, Some(path)) => ExperimentConfig::load(path)?,
        (None, None) => {
            return Err(Error::Usage(format!(
                "need --preset or --config; presets: {}",
                preset_names().join(", ")
            )))
        }
    };
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(threads) = common.threads {
        if threads == 0 {
            return Err(Error::Usage("--threads must be at least 1".into()));
        }
        cfg.fed.parallel = threads > 1;
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::Usage(format!("cannot configure thread pool: {e}")))?;
    }
    Ok(cfg)
}

fn cmd_run(common: &Common, method: Option<&str>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(m) = method {
        cfg.fed.method = Method::from_str(m)?;
    }
    let summary = harness::run(&cfg)?;
    for s in &summary.per_seed {
        println!(
            "seed {}: {} rounds, external acc {}, local variance {}, hash {:016x}",
            s.seed,
            s.rounds,
            fmt(s.final_external_acc_pct, "%"),
            fmt(s.final_local_acc_variance_pct2, ""),
            s.final_param_hash,
        );
    }
    if let Some(mean) = summary.mean_external_acc_pct {
        println!(
            "mean external acc {mean:.3}% over {} seeds (variance {})",
            summary.per_seed.len(),
            fmt(summary.variance_external_acc_pct2, ""),
        );
    }
    println!("artifacts in {}", cfg.out_dir.display());
    Ok(())
}

fn fmt(v: Option<f64>, unit: &str) -> String {
    v.map(|x| format!("{x:.3}{unit}")).unwrap_or_else(|| "n/a".into())
}

fn cmd_sweep(common: &Common, starts: &[usize]) -> Result<()> {
    let cfg = load_config(common)?;
    let report = harness::sweep_aug_start(&cfg, starts)?;
    println!("start,seed,external_acc,local_variance");
    for r in &report.rows {
        println!(
            "{},{},{},{}",
            r.aug_start_round,
            r.seed,
            fmt(r.final_external_acc_pct, "%"),
            fmt(r.final_local_acc_variance_pct2, ""),
        );
    }
    println!("artifacts in {}", cfg.out_dir.display());
    Ok(())
}

fn cmd_dump(
    common: &Common,
    model_path: Option<&PathBuf>,
    per_class: Option<usize>,
    iterations: Option<usize>,
) -> Result<()> {
    let cfg = load_config(common)?.resolve()?;
    let seed = cfg.seeds[0];
    let model = match model_path {
        Some(path) => Model::load_file(path)?,
        None => build(&cfg.data.arch(), seed)?,
    };
    let mut zcfg = cfg.fed.zsdg.clone();
    if let Some(p) = per_class {
        zcfg.per_class = p;
    }
    if let Some(i) = iterations {
        zcfg.iterations = i;
    }
    let out = cfg.out_dir.join("zsdg_dump");
    let manifest = harness::zsdg_dump(&model, &zcfg, seed, &out)?;
    println!(
        "{} samples ({} classes x {}), loss {:.4} -> {:.4}",
        manifest.files.len(),
        manifest.classes,
        manifest.per_class,
        manifest.initial_loss,
        manifest.final_loss,
    );
    println!("artifacts in {}", out.display());
    Ok(())
}

fn cmd_audit(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let report = harness::audit(&cfg, &cfg.out_dir)?;
    println!(
        "runs per arm: {}, augmentation quota: {}",
        report.runs, report.quota
    );
    println!(
        "delta_data {:.4} (unaugmented {:.4}), delta_model {:.4} +/- {:.4}, delta_agg {:.4} +/- {:.4}",
        report.delta_data.tv,
        report.delta_data_unaugmented.tv,
        report.delta_model.tv,
        report.delta_model.stderr,
        report.delta_agg.tv,
        report.delta_agg.stderr,
    );
    println!(
        "data processing link: {} | aggregation link: {}",
        if report.data_link_holds { "holds" } else { "violated" },
        if report.agg_link_holds { "holds" } else { "violated" },
    );
    println!("artifacts in {}", cfg.out_dir.display());
    Ok(())
}

fn cmd_eval_oracle(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let artifact = harness::eval_oracle(&cfg, &cfg.out_dir)?;
    println!(
        "oracle external acc {:.3}% (chance {:.3}%)",
        artifact.oracle_external_acc_pct, artifact.chance_pct,
    );
    println!(
        "synthetic batch: oracle acc {:.3}%, self acc {:.3}%",
        artifact.report.mean_oracle_pct, artifact.report.mean_generator_pct,
    );
    println!("artifacts in {}", cfg.out_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { common, method } => cmd_run(common, method.as_deref()),
        Command::SweepAugStart { common, starts } => cmd_sweep(common, starts),
        Command::ZsdgDump { common, model, per_class, iterations } => {
            cmd_dump(common, model.as_ref(), *per_class, *iterations)
        }
        Command::Audit { common } => cmd_audit(common),
        Command::EvalOracle { common } => cmd_eval_oracle(common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
