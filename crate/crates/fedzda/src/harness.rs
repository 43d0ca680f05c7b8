//! Experiment orchestration: run configurations end to end and persist
//! artifacts.
//!
//! Layout under the output directory, one subdirectory per seed:
//!
//! ```text
//! out/
//!   config.resolved.toml      fully resolved input, reproducible as-is
//!   summary.json              per-seed finals + cross-seed aggregates
//!   seed_<s>/
//!     rounds.csv              one row per round; byte-identical across
//!                             repeated runs of the same config + seed
//!     timings.csv             wall-clock sidecar, excluded from the
//!                             determinism contract
//!     checkpoints/            resumable round checkpoints
//!     final_model.fzda        stable-name copy of the last round's model
//!     warnings.txt            only when the run produced warnings
//!     .partial                marker; present while running or after a
//!                             failure, removed on success
//! ```
//!
//! Every artifact except `timings.csv` is a pure function of the resolved
//! config and seed.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{local_split, partition, Dataset};
use crate::dpaudit::{audit_chain, AuditConfig, AuditReport, ProjectionSpec};
use crate::error::{Error, Result};
use crate::federation::{
    run_resumable, CheckpointPolicy, EvalPlan, Method, RoundReport, RunOutcome,
};
use crate::metrics::{eval_synthetic, train_oracle, OracleReport};
use crate::models::Model;
use crate::rng;
use crate::zsdg::{generate, SyntheticBatch, ZsdgConfig};

const PARTIAL_MARKER: &str = ".partial";

pub const ROUNDS_CSV_HEADER: &str = "round,method,seed,participants,failed,mean_train_loss,local_acc_mean_pct,local_acc_variance_pct2,external_acc_pct,class_variance_pct2,zsdg_loss_mean,param_hash";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn fmt_ids(ids: &[usize]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("|")
}

/// One round as a CSV line under `ROUNDS_CSV_HEADER`. Floats print in
/// shortest round-trip form, so identical numbers give identical bytes.
pub fn round_csv_line(r: &RoundReport, method: Method, seed: u64) -> String {
    [
        r.round.to_string(),
        method.to_string(),
        seed.to_string(),
        fmt_ids(&r.participants),
        fmt_ids(&r.failed),
        r.mean_train_loss.to_string(),
        fmt_opt(r.local_acc_mean_pct),
        fmt_opt(r.local_acc_variance_pct2),
        fmt_opt(r.external_acc_pct),
        fmt_opt(r.class_variance_pct2),
        fmt_opt(r.zsdg_loss_mean),
        r.param_hash.to_string(),
    ]
    .join(",")
}

pub fn rounds_csv(history: &[RoundReport], method: Method, seed: u64) -> String {
    let mut out = String::from(ROUNDS_CSV_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&round_csv_line(r, method, seed));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub rounds: usize,
    pub final_external_acc_pct: Option<f64>,
    pub final_local_acc_mean_pct: Option<f64>,
    pub final_local_acc_variance_pct2: Option<f64>,
    pub final_class_variance_pct2: Option<f64>,
    pub final_param_hash: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedSummary>,
    /// Mean and population variance of the final external accuracy
    /// across seeds; absent when no external evaluation ran.
    pub mean_external_acc_pct: Option<f64>,
    pub variance_external_acc_pct2: Option<f64>,
    /// Mean across seeds of the final client-level accuracy variance.
    pub mean_local_acc_variance_pct2: Option<f64>,
}

fn seed_summary(history: &[RoundReport], seed: u64) -> SeedSummary {
    let last = history.last();
    SeedSummary {
        seed,
        rounds: history.len(),
        final_external_acc_pct: last.and_then(|r| r.external_acc_pct),
        final_local_acc_mean_pct: last.and_then(|r| r.local_acc_mean_pct),
        final_local_acc_variance_pct2: last.and_then(|r| r.local_acc_variance_pct2),
        final_class_variance_pct2: last.and_then(|r| r.class_variance_pct2),
        final_param_hash: last.map(|r| r.param_hash).unwrap_or(0),
    }
}

fn summarize(method: Method, per_seed: Vec<SeedSummary>) -> RunSummary {
    let ext: Vec<f64> = per_seed.iter().filter_map(|s| s.final_external_acc_pct).collect();
    let lv: Vec<f64> = per_seed.iter().filter_map(|s| s.final_local_acc_variance_pct2).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    RunSummary {
        method: method.to_string(),
        seeds: per_seed.iter().map(|s| s.seed).collect(),
        mean_external_acc_pct: (!ext.is_empty()).then(|| mean(&ext)),
        variance_external_acc_pct2: (!ext.is_empty())
            .then(|| crate::metrics::population_variance(&ext)),
        mean_local_acc_variance_pct2: (!lv.is_empty()).then(|| mean(&lv)),
        per_seed,
    }
}

fn write(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content).map_err(|e| Error::io(path, e))
}

fn mkdirs(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Partition the source for one seed and split off local test sets.
fn clients_for_seed(
    cfg: &ExperimentConfig,
    source: &std::sync::Arc<Dataset>,
    seed: u64,
) -> Result<(Vec<crate::data::ClientDataset>, Vec<String>)> {
    let outcome = partition(std::sync::Arc::clone(source), &cfg.partition, seed)?;
    let mut clients = outcome.clients;
    if cfg.test_fraction > 0.0 {
        for c in clients.iter_mut() {
            *c = local_split(c, cfg.test_fraction)?;
        }
    }
    Ok((clients, outcome.warnings))
}

fn run_one_seed(cfg: &ExperimentConfig, seed: u64, seed_dir: &Path) -> Result<SeedSummary> {
    mkdirs(seed_dir)?;
    let marker = seed_dir.join(PARTIAL_MARKER);
    write(&marker, "incomplete\n")?;

    let started = Instant::now();
    let (source, external) = cfg.data.load(seed)?;
    let load_ms = started.elapsed().as_millis();

    let t = Instant::now();
    let (clients, warnings) = clients_for_seed(cfg, &source, seed)?;
    let partition_ms = t.elapsed().as_millis();

    let mut fed = cfg.fed.clone();
    fed.seed = seed;
    let plan = if cfg.eval_every > 0 {
        EvalPlan::with_external(&external, cfg.eval_every)
    } else {
        EvalPlan::none()
    };
    let policy = CheckpointPolicy { dir: seed_dir.join("checkpoints"), every: 0 };

    let t = Instant::now();
    let outcome: RunOutcome = run_resumable(&fed, &cfg.data.arch(), &clients, &plan, Some(&policy))?;
    let train_ms = t.elapsed().as_millis();

    write(&seed_dir.join("rounds.csv"), &rounds_csv(&outcome.history, fed.method, seed))?;
    write(
        &seed_dir.join("timings.csv"),
        &format!("seed,phase,millis\n{seed},load,{load_ms}\n{seed},partition,{partition_ms}\n{seed},train,{train_ms}\n"),
    )?;
    outcome.final_model.save_file(&seed_dir.join("final_model.fzda"))?;

    let mut all_warnings = warnings;
    all_warnings.extend(outcome.warnings.iter().cloned());
    if !all_warnings.is_empty() {
        write(&seed_dir.join("warnings.txt"), &(all_warnings.join("\n") + "\n"))?;
    }

    fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    Ok(seed_summary(&outcome.history, seed))
}

/// Run the configured experiment for every seed and persist artifacts.
/// Re-running over an existing output directory resumes from checkpoints
/// and reproduces identical artifacts.
pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let cfg = cfg.clone().resolve()?;
    mkdirs(&cfg.out_dir)?;
    write(&cfg.out_dir.join("config.resolved.toml"), &cfg.to_toml_string()?)?;

    let mut per_seed = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let seed_dir = cfg.out_dir.join(format!("seed_{seed}"));
        per_seed.push(run_one_seed(&cfg, seed, &seed_dir)?);
    }
    let summary = summarize(cfg.fed.method, per_seed);
    let text = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Parse { path: "summary.json".into(), msg: e.to_string() })?;
    write(&cfg.out_dir.join("summary.json"), &(text + "\n"))?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub aug_start_round: usize,
    pub seed: u64,
    pub final_external_acc_pct: Option<f64>,
    pub final_local_acc_variance_pct2: Option<f64>,
    pub final_class_variance_pct2: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

pub const SWEEP_CSV_HEADER: &str =
    "aug_start_round,seed,final_external_acc_pct,final_local_acc_variance_pct2,final_class_variance_pct2";

/// Rerun the client-side augmentation protocol once per (start round,
/// seed) pair and tabulate how the starting round shifts final accuracy
/// and fairness. Artifacts: `sweep_aug_start.csv` in the output directory.
pub fn sweep_aug_start(cfg: &ExperimentConfig, starts: &[usize]) -> Result<SweepReport> {
    let cfg = cfg.clone().resolve()?;
    if cfg.fed.method != Method::FedZdac {
        return Err(Error::Usage(format!(
            "sweep_aug_start compares client-side augmentation start rounds; method is {}",
            cfg.fed.method
        )));
    }
    if starts.is_empty() {
        return Err(Error::Usage("sweep_aug_start: no start rounds given".into()));
    }

    let mut rows = Vec::new();
    for &start in starts {
        for &seed in &cfg.seeds {
            let (source, external) = cfg.data.load(seed)?;
            let (clients, _) = clients_for_seed(&cfg, &source, seed)?;
            let mut fed = cfg.fed.clone();
            fed.seed = seed;
            fed.aug_start_round = start;
            fed.validate()?;
            // Evaluate the final round only; cadence rows are not needed.
            let plan = EvalPlan::with_external(&external, fed.rounds.max(1));
            let outcome = crate::federation::run(&fed, &cfg.data.arch(), &clients, &plan)?;
            let s = seed_summary(&outcome.history, seed);
            rows.push(SweepRow {
                aug_start_round: start,
                seed,
                final_external_acc_pct: s.final_external_acc_pct,
                final_local_acc_variance_pct2: s.final_local_acc_variance_pct2,
                final_class_variance_pct2: s.final_class_variance_pct2,
            });
        }
    }

    mkdirs(&cfg.out_dir)?;
    let mut csv = String::from(SWEEP_CSV_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.aug_start_round,
            r.seed,
            fmt_opt(r.final_external_acc_pct),
            fmt_opt(r.final_local_acc_variance_pct2),
            fmt_opt(r.final_class_variance_pct2),
        ));
    }
    write(&cfg.out_dir.join("sweep_aug_start.csv"), &csv)?;
    Ok(SweepReport { rows })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DumpEntry {
    pub file: String,
    pub label: usize,
    pub source_model: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DumpManifest {
    pub seed: u64,
    pub classes: usize,
    pub per_class: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub loss_history: Vec<f64>,
    pub files: Vec<DumpEntry>,
}

fn to_png(path: &Path, pixels: &[f64], channels: usize, h: usize, w: usize) -> Result<()> {
    let byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let err = |e: image::ImageError| Error::Usage(format!("cannot write {}: {e}", path.display()));
    match channels {
        1 => {
            let buf: Vec<u8> = pixels.iter().map(|&v| byte(v)).collect();
            image::GrayImage::from_raw(w as u32, h as u32, buf)
                .expect("buffer sized from shape")
                .save(path)
                .map_err(err)
        }
        3 => {
            // Planar (c, h, w) to interleaved rgb rows.
            let plane = h * w;
            let mut buf = Vec::with_capacity(plane * 3);
            for i in 0..plane {
                buf.push(byte(pixels[i]));
                buf.push(byte(pixels[plane + i]));
                buf.push(byte(pixels[2 * plane + i]));
            }
            image::RgbImage::from_raw(w as u32, h as u32, buf)
                .expect("buffer sized from shape")
                .save(path)
                .map_err(err)
        }
        other => Err(Error::Usage(format!("cannot render {other}-channel images as PNG"))),
    }
}

/// Synthesize a batch from a model and dump it as PNG files plus a
/// manifest for inspection.
pub fn zsdg_dump(model: &Model, zcfg: &ZsdgConfig, seed: u64, out_dir: &Path) -> Result<DumpManifest> {
    mkdirs(out_dir)?;
    let batch: SyntheticBatch = generate(model, zcfg, seed)?;
    let [c, h, w] = [model.spec().in_channels, model.spec().height, model.spec().width];

    let mut files = Vec::with_capacity(batch.len());
    let row = c * h * w;
    for i in 0..batch.len() {
        let name = format!("class{}_sample{:03}.png", batch.labels[i], i);
        let pixels = &batch.images.data()[i * row..(i + 1) * row];
        to_png(&out_dir.join(&name), pixels, c, h, w)?;
        files.push(DumpEntry { file: name, label: batch.labels[i], source_model: batch.source_model[i] });
    }

    let manifest = DumpManifest {
        seed,
        classes: batch.classes,
        per_class: batch.per_class,
        initial_loss: batch.initial_loss.total,
        final_loss: batch.final_loss.total,
        loss_history: batch.loss_history.clone(),
        files,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Parse { path: "manifest.json".into(), msg: e.to_string() })?;
    write(&out_dir.join("manifest.json"), &(text + "\n"))?;
    Ok(manifest)
}

/// Run the privacy audit over the configured federation: the two most
/// dissimilar clients of the first seed's partition form the differing
/// pair, everyone else dilutes the aggregate. Writes `audit.json`.
pub fn audit(cfg: &ExperimentConfig, out_dir: &Path) -> Result<AuditReport> {
    let cfg = cfg.clone().resolve()?;
    let seed = cfg.seeds[0];
    let (source, _) = cfg.data.load(seed)?;
    let (clients, _) = clients_for_seed(&cfg, &source, seed)?;
    if clients.len() < 2 {
        return Err(Error::Usage("audit needs at least two clients".into()));
    }

    // Deterministic pair choice: client 0 versus the client whose label
    // marginal is farthest from client 0's (ties to the lowest id).
    let marginal = |c: &crate::data::ClientDataset| -> Vec<f64> {
        let h = c.class_histogram();
        let total: usize = h.iter().sum();
        h.iter().map(|&k| k as f64 / total as f64).collect()
    };
    let m0 = marginal(&clients[0]);
    let mut best = 1;
    let mut best_tv = -1.0;
    for (i, c) in clients.iter().enumerate().skip(1) {
        let tv = 0.5
            * marginal(c).iter().zip(&m0).map(|(a, b)| (a - b).abs()).sum::<f64>();
        if tv > best_tv {
            best_tv = tv;
            best = i;
        }
    }

    let a = clients[0].train_data();
    let b = clients[best].train_data();
    let quota = if cfg.fed.uses_augmentation() { cfg.fed.zsdg.per_class } else { 0 };
    let audit_cfg = AuditConfig {
        arch: cfg.data.arch(),
        runs: cfg.audit_runs,
        local_epochs: cfg.fed.local_epochs,
        batch_size: cfg.fed.batch_size,
        learning_rate: cfg.fed.learning_rate,
        quota,
        zsdg: cfg.fed.zsdg.clone(),
        other_clients: cfg.fed.clients - 1,
        projection: ProjectionSpec::default(),
        seed,
        parallel: cfg.fed.parallel,
    };
    let report = audit_chain(&a, &b, &audit_cfg)?;

    mkdirs(out_dir)?;
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Parse { path: "audit.json".into(), msg: e.to_string() })?;
    write(&out_dir.join("audit.json"), &(text + "\n"))?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleArtifact {
    pub oracle_epochs: usize,
    pub oracle_external_acc_pct: f64,
    pub chance_pct: f64,
    pub report: OracleReport,
}

/// Grade the configured experiment's synthetic data with an independent
/// oracle: train the federation (first seed), synthesize from its final
/// model, train a centralized oracle on real data, and score the batch
/// under both. Writes `oracle_report.json`.
pub fn eval_oracle(cfg: &ExperimentConfig, out_dir: &Path) -> Result<OracleArtifact> {
    let cfg = cfg.clone().resolve()?;
    if cfg.fed.zsdg.per_class == 0 {
        return Err(Error::config("fed.zsdg.per_class", "grading needs at least one sample per class"));
    }
    let seed = cfg.seeds[0];
    let (source, external) = cfg.data.load(seed)?;
    let (clients, _) = clients_for_seed(&cfg, &source, seed)?;

    let mut fed = cfg.fed.clone();
    fed.seed = seed;
    let outcome = crate::federation::run(&fed, &cfg.data.arch(), &clients, &EvalPlan::none())?;
    let generator = outcome.final_model;

    let oracle = train_oracle(&source, &cfg.data.arch(), cfg.oracle_epochs, seed)?;
    let oracle_stats = crate::metrics::global_test(&oracle, &external)?;

    let batch = generate(&generator, &cfg.fed.zsdg, rng::mix(seed, 0x0dd))?;
    let report = eval_synthetic(&oracle, &generator, &batch)?;

    let artifact = OracleArtifact {
        oracle_epochs: cfg.oracle_epochs,
        oracle_external_acc_pct: oracle_stats.accuracy_pct,
        chance_pct: 100.0 / cfg.data.arch().classes as f64,
        report,
    };
    mkdirs(out_dir)?;
    let text = serde_json::to_string_pretty(&artifact)
        .map_err(|e| Error::Parse { path: "oracle_report.json".into(), msg: e.to_string() })?;
    write(&out_dir.join("oracle_report.json"), &(text + "\n"))?;
    Ok(artifact)
}
