//! The federated training loop: per-round client sampling, local SGD,
//! weighted aggregation, and the two zero-shot augmentation protocols.
//!
//! Four methods share one loop. Plain averaging and proximal-regularized
//! averaging train on real client data only. The client-side augmentation
//! protocol has each sampled client synthesize a balanced batch from the
//! received global model and train on real plus synthetic data. The
//! server-side protocol keeps clients untouched; after aggregation the
//! server synthesizes from every client update and fine-tunes the interim
//! model on the pooled synthetic batch. Both protocols activate at a
//! configurable round, so early rounds can run plain averaging while the
//! global model is still too weak to synthesize from.
//!
//! Every random draw comes from a stream keyed by (seed, purpose, round,
//! client), never from a shared mutable generator. That makes rounds
//! independent of execution order: parallel and serial client updates
//! produce bit-identical models, and a run resumed from a checkpoint
//! continues exactly as if it had never stopped.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClientDataset, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{global_test, local_test};
use crate::models::{build, ArchitectureSpec, Model};
use crate::rng::{self, domain};
use crate::train::train_sgd;
use crate::zsdg::{generate, generate_balanced, ZsdgConfig};

/// Aggregation method for one experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    FedAvg,
    /// Local objectives carry a proximal pull toward the round's global
    /// model, weighted by `prox_mu`.
    FedProx,
    /// Client-side zero-shot augmentation.
    FedZdac,
    /// Server-side zero-shot augmentation.
    FedZdas,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Method::FedAvg => "fed_avg",
            Method::FedProx => "fed_prox",
            Method::FedZdac => "fed_zdac",
            Method::FedZdas => "fed_zdas",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "fed_avg" | "fedavg" => Ok(Method::FedAvg),
            "fed_prox" | "fedprox" => Ok(Method::FedProx),
            "fed_zdac" | "fedzdac" => Ok(Method::FedZdac),
            "fed_zdas" | "fedzdas" => Ok(Method::FedZdas),
            other => Err(Error::config("method", format!("unknown method `{other}`"))),
        }
    }
}

/// How client updates are weighted during aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Proportional to each client's real training-sample count.
    #[default]
    BySamples,
    Uniform,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FedConfig {
    pub method: Method,
    /// Total federated rounds T.
    pub rounds: usize,
    /// Registered clients Z; must match the partition handed to `run`.
    pub clients: usize,
    /// Fraction sampled per round; the sampled count is
    /// max(1, round(participation * clients)).
    pub participation: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Proximal coefficient, read only when `method` is `FedProx`.
    pub prox_mu: f64,
    pub weighting: Weighting,
    pub seed: u64,
    /// First round (1-based) at which augmentation is active. `rounds + 1`
    /// disables augmentation entirely.
    pub aug_start_round: usize,
    /// Synthesis settings for the augmentation protocols. A `per_class`
    /// quota of 0 also disables augmentation.
    pub zsdg: ZsdgConfig,
    /// Server fine-tuning epochs on pooled synthetic data (server-side
    /// protocol only).
    pub server_epochs: usize,
    /// Run sampled clients' updates on a thread pool. Results are
    /// identical either way.
    pub parallel: bool,
}

impl Default for FedConfig {
    /// Desk-scale defaults: a small federation that trains in seconds.
    /// Augmentation, when the method uses it, starts immediately; write
    /// `aug_start_round = 0` in a config file for "never" (it resolves
    /// to `rounds + 1`).
    fn default() -> Self {
        FedConfig {
            method: Method::FedAvg,
            rounds: 30,
            clients: 20,
            participation: 0.25,
            local_epochs: 2,
            batch_size: 10,
            learning_rate: 0.05,
            prox_mu: 0.0,
            weighting: Weighting::BySamples,
            seed: 1,
            aug_start_round: 1,
            zsdg: ZsdgConfig { iterations: 60, per_class: 8, ..Default::default() },
            server_epochs: 1,
            parallel: false,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::config("fed.clients", "must be at least 1"));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::config(
                "fed.participation",
                format!("must be in (0, 1], got {}", self.participation),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("fed.batch_size", "must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config("fed.learning_rate", "must be finite and non-negative"));
        }
        if !(self.prox_mu.is_finite() && self.prox_mu >= 0.0) {
            return Err(Error::config("fed.prox_mu", "must be finite and non-negative"));
        }
        if self.aug_start_round == 0 || self.aug_start_round > self.rounds + 1 {
            return Err(Error::config(
                "fed.aug_start_round",
                format!("must be in [1, rounds + 1] = [1, {}], got {}", self.rounds + 1, self.aug_start_round),
            ));
        }
        if self.uses_augmentation() && self.zsdg.per_class > 0 {
            self.zsdg.validate()?;
        }
        Ok(())
    }

    pub fn uses_augmentation(&self) -> bool {
        matches!(self.method, Method::FedZdac | Method::FedZdas)
    }

    /// Number of clients sampled each round.
    pub fn sampled_per_round(&self) -> usize {
        ((self.participation * self.clients as f64).round() as usize).max(1)
    }

    fn aug_active(&self, round: usize) -> bool {
        self.uses_augmentation() && round >= self.aug_start_round && self.zsdg.per_class > 0
    }
}

/// Everything recorded about one round. Evaluation fields are filled only
/// on rounds the eval plan covers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundReport {
    /// 1-based round index.
    pub round: usize,
    /// Sampled client ids, ascending.
    pub participants: Vec<usize>,
    /// Sampled clients whose update diverged and was dropped.
    pub failed: Vec<usize>,
    /// Mean over surviving clients of the last local batch loss.
    pub mean_train_loss: f64,
    pub local_acc_mean_pct: Option<f64>,
    pub local_acc_variance_pct2: Option<f64>,
    pub external_acc_pct: Option<f64>,
    pub class_variance_pct2: Option<f64>,
    /// Mean final synthesis loss this round, when any synthesis ran.
    pub zsdg_loss_mean: Option<f64>,
    /// Hash of the aggregated model state after this round.
    pub param_hash: u64,
}

/// When to compute which evaluation during a run.
#[derive(Debug, Clone, Copy)]
pub struct EvalPlan<'a> {
    /// Balanced held-out set for external accuracy and class fairness.
    pub external: Option<&'a Dataset>,
    /// Evaluate on rounds divisible by this, plus the final round.
    /// 0 disables evaluation.
    pub every: usize,
}

impl EvalPlan<'static> {
    pub fn none() -> Self {
        EvalPlan { external: None, every: 0 }
    }
}

impl<'a> EvalPlan<'a> {
    pub fn with_external(external: &'a Dataset, every: usize) -> EvalPlan<'a> {
        EvalPlan { external: Some(external), every }
    }

    fn due(&self, round: usize, total: usize) -> bool {
        self.every > 0 && (round % self.every == 0 || round == total)
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub final_model: Model,
    pub history: Vec<RoundReport>,
    /// Non-fatal irregularities (failed clients, skipped evals).
    pub warnings: Vec<String>,
}

/// Periodic checkpointing into a directory; `resume_run` picks up the
/// newest checkpoint found there.
#[derive(Debug, Clone)]
pub struct CheckpointPolicy {
    pub dir: PathBuf,
    /// Write after rounds divisible by this; the final round is always
    /// written. 0 disables periodic writes (final round still saved).
    pub every: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    round: usize,
    state_hash: u64,
    history: Vec<RoundReport>,
}

/// One client's finished local update.
struct LocalOutcome {
    model: Model,
    last_loss: f64,
    /// Real training samples, used for weighting.
    samples: usize,
    gen_loss: Option<f64>,
}

/// Sampled client positions for a round, ascending. Stateless in the
/// round index, so any round's sample can be recomputed in isolation.
pub fn sample_clients(seed: u64, round: usize, clients: usize, take: usize) -> Vec<usize> {
    let mut rng = rng::stream(seed, domain::CLIENT_SAMPLE, &[round as u64]);
    rng::sample_indices(&mut rng, clients, take)
}

/// Weighted average of client states into `global`. Weights must be
/// non-negative and sum to 1 within 1e-9.
pub fn aggregate(global: &mut Model, locals: &[(&Model, f64)]) -> Result<()> {
    if locals.is_empty() {
        return Err(Error::Usage("aggregate: no client updates".into()));
    }
    let total: f64 = locals.iter().map(|&(_, w)| w).sum();
    if locals.iter().any(|&(_, w)| !(w >= 0.0) || !w.is_finite()) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Usage(format!(
            "aggregate: weights must be non-negative and sum to 1 (got sum {total})"
        )));
    }

    let dim = global.param_vector().len();
    let sdim = global.bn_stats_vector().len();
    let mut params = vec![0.0; dim];
    let mut stats = vec![0.0; sdim];
    for &(m, w) in locals {
        let p = m.param_vector();
        let s = m.bn_stats_vector();
        if p.len() != dim || s.len() != sdim {
            return Err(Error::shape("aggregate", "client model does not match the global architecture"));
        }
        for (acc, v) in params.iter_mut().zip(&p) {
            *acc += w * v;
        }
        for (acc, v) in stats.iter_mut().zip(&s) {
            *acc += w * v;
        }
    }
    global.set_param_vector(&params)?;
    global.set_bn_stats_vector(&stats)?;
    Ok(())
}

/// Seed for a client's synthesis in a given round. The domain tags keep
/// client-side and server-side synthesis on disjoint streams.
fn client_gen_seed(seed: u64, round: usize, client: usize) -> u64 {
    rng::mix(rng::mix(rng::mix(seed, domain::ZSDG), round as u64), client as u64)
}

fn server_gen_seed(seed: u64, round: usize) -> u64 {
    rng::mix(rng::mix(seed, domain::SERVER_GEN), round as u64)
}

/// Run one client's local update against the received global model.
/// Divergence (non-finite values anywhere in the update) is reported as
/// a `NonFinite` error, which the round loop converts into a dropped
/// client rather than a failed run.
fn local_update(
    cfg: &FedConfig,
    global: &Model,
    anchor: Option<&[f64]>,
    client: &ClientDataset,
    round: usize,
) -> Result<LocalOutcome> {
    let mut data = client.train_data();
    let samples = data.len();

    let mut gen_loss = None;
    if cfg.method == Method::FedZdac && cfg.aug_active(round) {
        let batch = generate(global, &cfg.zsdg, client_gen_seed(cfg.seed, round, client.id))?;
        gen_loss = Some(batch.final_loss.total);
        data.append(&batch.as_train_data())?;
    }

    let mut local = global.clone();
    let prox = anchor.map(|a| (a, cfg.prox_mu));
    let mut rng = rng::stream(cfg.seed, domain::LOCAL_TRAIN, &[round as u64, client.id as u64]);
    let last_loss = train_sgd(
        &mut local,
        &data,
        cfg.local_epochs,
        cfg.batch_size,
        cfg.learning_rate,
        prox,
        &mut rng,
    )?;
    Ok(LocalOutcome { model: local, last_loss, samples, gen_loss })
}

/// Advance the global model by one round. Returns the report; the model
/// is updated in place.
fn run_round(
    cfg: &FedConfig,
    global: &mut Model,
    clients: &[ClientDataset],
    round: usize,
    eval: &EvalPlan<'_>,
    warnings: &mut Vec<String>,
) -> Result<RoundReport> {
    let take = cfg.sampled_per_round();
    let positions = sample_clients(cfg.seed, round, clients.len(), take);
    let participants: Vec<usize> = positions.iter().map(|&p| clients[p].id).collect();

    let anchor = (cfg.method == Method::FedProx).then(|| global.param_vector());
    let anchor_ref = anchor.as_deref();

    let results: Vec<Result<LocalOutcome>> = if cfg.parallel && positions.len() > 1 {
        positions
            .par_iter()
            .map(|&p| local_update(cfg, global, anchor_ref, &clients[p], round))
            .collect()
    } else {
        positions
            .iter()
            .map(|&p| local_update(cfg, global, anchor_ref, &clients[p], round))
            .collect()
    };

    let mut survivors: Vec<LocalOutcome> = Vec::with_capacity(results.len());
    let mut failed = Vec::new();
    for (pos, res) in positions.iter().zip(results) {
        match res {
            Ok(o) => survivors.push(o),
            Err(Error::NonFinite { context }) => {
                let id = clients[*pos].id;
                warnings.push(format!("round {round}: client {id} diverged ({context}), update dropped"));
                failed.push(id);
            }
            Err(e) => return Err(e),
        }
    }
    if survivors.is_empty() {
        return Err(Error::Usage(format!("round {round}: every sampled client diverged")));
    }

    // Weights renormalize over the survivors.
    let weights: Vec<f64> = match cfg.weighting {
        Weighting::Uniform => vec![1.0 / survivors.len() as f64; survivors.len()],
        Weighting::BySamples => {
            let total: usize = survivors.iter().map(|o| o.samples).sum();
            survivors.iter().map(|o| o.samples as f64 / total as f64).collect()
        }
    };
    let pairs: Vec<(&Model, f64)> = survivors.iter().map(|o| &o.model).zip(weights).collect();
    aggregate(global, &pairs)?;

    let mut gen_losses: Vec<f64> = survivors.iter().filter_map(|o| o.gen_loss).collect();

    if cfg.method == Method::FedZdas && cfg.aug_active(round) {
        let models: Vec<&Model> = survivors.iter().map(|o| &o.model).collect();
        let batch = generate_balanced(&models, cfg.zsdg.per_class, &cfg.zsdg, server_gen_seed(cfg.seed, round))?;
        gen_losses.push(batch.final_loss.total);
        if cfg.server_epochs > 0 {
            let data = batch.as_train_data();
            let mut rng = rng::stream(cfg.seed, domain::SERVER_TRAIN, &[round as u64]);
            train_sgd(global, &data, cfg.server_epochs, cfg.batch_size, cfg.learning_rate, None, &mut rng)?;
        }
    }

    let mean_train_loss = survivors.iter().map(|o| o.last_loss).sum::<f64>() / survivors.len() as f64;
    let zsdg_loss_mean =
        (!gen_losses.is_empty()).then(|| gen_losses.iter().sum::<f64>() / gen_losses.len() as f64);

    let mut report = RoundReport {
        round,
        participants,
        failed,
        mean_train_loss,
        local_acc_mean_pct: None,
        local_acc_variance_pct2: None,
        external_acc_pct: None,
        class_variance_pct2: None,
        zsdg_loss_mean,
        param_hash: global.state_hash(),
    };

    if eval.due(round, cfg.rounds) {
        if clients.iter().any(|c| !c.test_indices.is_empty()) {
            let stats = local_test(global, clients)?;
            report.local_acc_mean_pct = Some(stats.mean_pct);
            report.local_acc_variance_pct2 = Some(stats.variance_pct2);
        }
        if let Some(external) = eval.external {
            let stats = global_test(global, external)?;
            report.external_acc_pct = Some(stats.accuracy_pct);
            report.class_variance_pct2 = Some(stats.class_variance_pct2);
        }
    }
    Ok(report)
}

fn checkpoint_paths(dir: &Path, round: usize) -> (PathBuf, PathBuf) {
    (dir.join(format!("ckpt_r{round:04}.fzda")), dir.join(format!("ckpt_r{round:04}.json")))
}

fn save_checkpoint(dir: &Path, round: usize, model: &Model, history: &[RoundReport]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (model_path, meta_path) = checkpoint_paths(dir, round);
    model.save_file(&model_path)?;
    let meta = CheckpointMeta { round, state_hash: model.state_hash(), history: history.to_vec() };
    let text = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Checkpoint(format!("cannot encode checkpoint metadata: {e}")))?;
    fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
    Ok(())
}

/// Newest complete checkpoint round in a directory, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<usize>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best = None;
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(num) = name.strip_prefix("ckpt_r").and_then(|s| s.strip_suffix(".json")) {
            if let Ok(round) = num.parse::<usize>() {
                // Both halves must exist for the checkpoint to count.
                if checkpoint_paths(dir, round).0.exists() {
                    best = best.max(Some(round));
                }
            }
        }
    }
    Ok(best)
}

fn load_checkpoint(dir: &Path, round: usize) -> Result<(Model, Vec<RoundReport>)> {
    let (model_path, meta_path) = checkpoint_paths(dir, round);
    let model = Model::load_file(&model_path)?;
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("cannot decode {}: {e}", meta_path.display())))?;
    if meta.round != round {
        return Err(Error::Checkpoint(format!(
            "checkpoint {} claims round {} (expected {round})",
            meta_path.display(),
            meta.round
        )));
    }
    if meta.state_hash != model.state_hash() {
        return Err(Error::Checkpoint(format!(
            "checkpoint {} does not match its model file (state hash mismatch)",
            meta_path.display()
        )));
    }
    Ok((model, meta.history))
}

fn check_inputs(cfg: &FedConfig, clients: &[ClientDataset]) -> Result<()> {
    cfg.validate()?;
    if clients.len() != cfg.clients {
        return Err(Error::config(
            "fed.clients",
            format!("config says {} clients but partition has {}", cfg.clients, clients.len()),
        ));
    }
    for c in clients {
        if c.train_indices.is_empty() {
            return Err(Error::Usage(format!("client {} has no training data", c.id)));
        }
    }
    Ok(())
}

/// Run a full federated experiment from a fresh model.
pub fn run(
    cfg: &FedConfig,
    arch: &ArchitectureSpec,
    clients: &[ClientDataset],
    eval: &EvalPlan<'_>,
) -> Result<RunOutcome> {
    run_resumable(cfg, arch, clients, eval, None)
}

/// Like `run`, but with optional checkpointing. When the directory holds
/// an earlier checkpoint of the same run, training continues from it;
/// the result is bit-identical to an uninterrupted run because all
/// randomness is keyed by (seed, round) rather than generator state.
pub fn run_resumable(
    cfg: &FedConfig,
    arch: &ArchitectureSpec,
    clients: &[ClientDataset],
    eval: &EvalPlan<'_>,
    ckpt: Option<&CheckpointPolicy>,
) -> Result<RunOutcome> {
    check_inputs(cfg, clients)?;

    let mut warnings = Vec::new();
    let (mut model, mut history, start) = match ckpt {
        Some(policy) => match latest_checkpoint(&policy.dir)? {
            Some(round) if round <= cfg.rounds => {
                let (model, history) = load_checkpoint(&policy.dir, round)?;
                if history.len() != round {
                    return Err(Error::Checkpoint(format!(
                        "checkpoint for round {round} carries {} round reports",
                        history.len()
                    )));
                }
                (model, history, round + 1)
            }
            Some(round) => {
                return Err(Error::Checkpoint(format!(
                    "checkpoint round {round} exceeds configured rounds {}",
                    cfg.rounds
                )));
            }
            None => (build(arch, cfg.seed)?, Vec::new(), 1),
        },
        None => (build(arch, cfg.seed)?, Vec::new(), 1),
    };

    for round in start..=cfg.rounds {
        let report = run_round(cfg, &mut model, clients, round, eval, &mut warnings)?;
        history.push(report);
        if let Some(policy) = ckpt {
            let due = policy.every > 0 && round % policy.every == 0;
            if due || round == cfg.rounds {
                save_checkpoint(&policy.dir, round, &model, &history)?;
            }
        }
    }
    Ok(RunOutcome { final_model: model, history, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{partition_iid, partition_unimodal, local_split, synthetic_pair, Dataset, SyntheticSpec};
    use crate::tensor::Tensor;
    use std::sync::Arc;

    fn toy_arch() -> ArchitectureSpec {
        ArchitectureSpec::toy_cnn(1, 8, 8, 3)
    }

    fn toy_source() -> Arc<Dataset> {
        let spec = SyntheticSpec {
            classes: 3,
            train_per_class: 24,
            test_per_class: 6,
            height: 8,
            width: 8,
            class_sep: 0.85,
            noise_std: 0.1,
            ..Default::default()
        };
        let (train, _) = synthetic_pair(&spec, 5).unwrap();
        Arc::new(train)
    }

    fn base_cfg(method: Method, rounds: usize) -> FedConfig {
        FedConfig {
            method,
            rounds,
            clients: 4,
            participation: 0.5,
            local_epochs: 1,
            batch_size: 8,
            learning_rate: 0.05,
            prox_mu: 0.0,
            weighting: Weighting::BySamples,
            seed: 42,
            aug_start_round: rounds + 1,
            zsdg: ZsdgConfig { iterations: 4, per_class: 2, ..Default::default() },
            server_epochs: 1,
            parallel: false,
        }
    }

    fn toy_clients(source: &Arc<Dataset>, n: usize) -> Vec<ClientDataset> {
        partition_iid(Arc::clone(source), n, 7).unwrap().clients
    }

    #[test]
    fn sampled_count_formula() {
        let mut cfg = base_cfg(Method::FedAvg, 1);
        cfg.clients = 100;
        cfg.participation = 0.1;
        assert_eq!(cfg.sampled_per_round(), 10);
        cfg.participation = 0.001;
        assert_eq!(cfg.sampled_per_round(), 1, "floor is one client");
        cfg.participation = 1.0;
        assert_eq!(cfg.sampled_per_round(), 100);
        cfg.clients = 20;
        cfg.participation = 0.25;
        assert_eq!(cfg.sampled_per_round(), 5);
    }

    #[test]
    fn sampling_covers_all_clients_fairly() {
        // With 2 of 8 sampled per round, 400 rounds give each client an
        // expected 100 appearances; demand a loose [50, 170] band.
        let mut counts = [0usize; 8];
        for round in 1..=400 {
            for p in sample_clients(99, round, 8, 2) {
                counts[p] += 1;
            }
        }
        for (i, &c) in counts.iter().enumerate() {
            assert!((50..=170).contains(&c), "client {i} sampled {c} times");
        }
    }

    #[test]
    fn sampling_is_stateless_in_round() {
        let a = sample_clients(7, 13, 10, 3);
        let b = sample_clients(7, 13, 10, 3);
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0] < w[1]), "sorted, distinct");
    }

    #[test]
    fn aggregate_matches_hand_average() {
        let arch = toy_arch();
        let mut global = build(&arch, 1).unwrap();
        let mut a = build(&arch, 2).unwrap();
        let mut b = build(&arch, 3).unwrap();
        // Overwrite with known constants for an exact oracle.
        let dim = global.param_vector().len();
        a.set_param_vector(&vec![2.0; dim]).unwrap();
        b.set_param_vector(&vec![-1.0; dim]).unwrap();
        aggregate(&mut global, &[(&a, 0.25), (&b, 0.75)]).unwrap();
        let expect = 0.25 * 2.0 + 0.75 * (-1.0);
        for v in global.param_vector() {
            assert!((v - expect).abs() < 1e-15);
        }
        // Running stats average too.
        let sa = a.bn_stats_vector();
        let sb = b.bn_stats_vector();
        for ((g, x), y) in global.bn_stats_vector().iter().zip(&sa).zip(&sb) {
            assert!((g - (0.25 * x + 0.75 * y)).abs() < 1e-15);
        }
    }

    #[test]
    fn aggregate_rejects_bad_weights() {
        let arch = toy_arch();
        let mut global = build(&arch, 1).unwrap();
        let a = build(&arch, 2).unwrap();
        let err = aggregate(&mut global, &[(&a, 0.7)]).unwrap_err();
        assert!(err.to_string().contains("sum to 1"), "{err}");
        let err = aggregate(&mut global, &[]).unwrap_err();
        assert!(err.to_string().contains("no client updates"), "{err}");
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let source = toy_source();
        let clients = toy_clients(&source, 4);
        let mut cfg = base_cfg(Method::FedAvg, 3);
        cfg.learning_rate = 0.0;
        let arch = toy_arch();
        let init = build(&arch, cfg.seed).unwrap();
        let out = run(&cfg, &arch, &clients, &EvalPlan::none()).unwrap();
        assert_eq!(out.final_model.param_vector(), init.param_vector());
        // Running statistics still move: forward passes update them.
        assert_ne!(out.final_model.bn_stats_vector(), init.bn_stats_vector());
    }

    #[test]
    fn history_and_hash_are_reproducible() {
        let source = toy_source();
        let clients = toy_clients(&source, 4);
        let cfg = base_cfg(Method::FedAvg, 3);
        let arch = toy_arch();
        let a = run(&cfg, &arch, &clients, &EvalPlan::none()).unwrap();
        let b = run(&cfg, &arch, &clients, &EvalPlan::none()).unwrap();
        let ha: Vec<u64> = a.history.iter().map(|r| r.param_hash).collect();
        let hb: Vec<u64> = b.history.iter().map(|r| r.param_hash).collect();
        assert_eq!(ha, hb);
        assert_eq!(a.final_model.state_hash(), b.final_model.state_hash());
    }

    #[test]
    fn parallel_equals_serial() {
        let source = toy_source();
        let clients = toy_clients(&source, 4);
        let mut cfg = base_cfg(Method::FedProx, 2);
        cfg.prox_mu = 0.1;
        cfg.participation = 1.0;
        let arch = toy_arch();
        let serial = run(&cfg, &arch, &clients, &EvalPlan::none()).unwrap();
        cfg.parallel = true;
        let parallel = run(&cfg, &arch, &clients, &EvalPlan::none()).unwrap();
        assert_eq!(serial.final_model.state_hash(), parallel.final_model.state_hash());
        for (a, b) in serial.history.iter().zip(&parallel.history) {
            assert_eq!(a.param_hash, b.param_hash);
            assert_eq!(a.participants, b.participants);
        }
    }

    #[test]
    fn disabled_augmentation_is_bitwise_fedavg() {
        let source = toy_source();
        let clients = toy_clients(&source, 4);
        let arch = toy_arch();
        let avg = run(&base_cfg(Method::FedAvg, 3), &arch, &clients, &EvalPlan::none()).unwrap();

        // Client-side protocol, start round past the horizon.
        let zdac = run(&base_cfg(Method::FedZdac, 3), &arch, &clients, &EvalPlan::none()).unwrap();
        assert_eq!(zdac.final_model.state_hash(), avg.final_model.state_hash());

        // Client-side protocol, active rounds but zero quota.
        let mut cfg = base_cfg(Method::FedZdac, 3);
        cfg.aug_start_round = 1;
        cfg.zsdg.per_class = 0;
        let quota0 = run(&cfg, &arch, &clients, &EvalPlan::none()).unwrap();
        assert_eq!(quota0.final_model.state_hash(), avg.final_model.state_hash());

        // Server-side protocol with zero fine-tuning epochs: generation
        // runs but cannot change the aggregate.
        let mut cfg = base_cfg(Method::FedZdas, 3);
        cfg.aug_start_round = 1;
        cfg.server_epochs = 0;
        let zdas0 = run(&cfg, &arch, &clients, &EvalPlan::none()).unwrap();
        assert_eq!(zdas0.final_model.state_hash(), avg.final_model.state_hash());
        // It still reports the synthesis loss it measured.
        assert!(zdas0.history.iter().all(|r| r.zsdg_loss_mean.is_some()));

        // Zero proximal pull degenerates to plain averaging as well.
        let prox0 = run(&base_cfg(Method::FedProx, 3), &arch, &clients, &EvalPlan::none()).unwrap();
        assert_eq!(prox0.final_model.state_hash(), avg.final_model.state_hash());
    }

    #[test]
    fn augmented_runs_depart_from_fedavg_after_start() {
        let source = toy_source();
        let clients = toy_clients(&source, 4);
        let arch = toy_arch();
        let avg = run(&base_cfg(Method::FedAvg, 3), &arch, &clients, &EvalPlan::none()).unwrap();

        let mut cfg = base_cfg(Method::FedZdac, 3);
        cfg.aug_start_round = 3;
        let zdac = run(&cfg, &arch, &clients, &EvalPlan::none()).unwrap();
        // Identical up to the round before the start, different afterward.
        assert_eq!(zdac.history[0].param_hash, avg.history[0].param_hash);
        assert_eq!(zdac.history[1].param_hash, avg.history[1].param_hash);
        assert_ne!(zdac.history[2].param_hash, avg.history[2].param_hash);
        assert!(zdac.history[2].zsdg_loss_mean.is_some());
        assert!(zdac.history[1].zsdg_loss_mean.is_none());

        let mut cfg = base_cfg(Method::FedZdas, 3);
        cfg.aug_start_round = 3;
        cfg.server_epochs = 1;
        let zdas = run(&cfg, &arch, &clients, &EvalPlan::none()).unwrap();
        assert_eq!(zdas.history[1].param_hash, avg.history[1].param_hash);
        assert_ne!(zdas.history[2].param_hash, avg.history[2].param_hash);
    }

    #[test]
    fn proximal_pull_shrinks_round_movement() {
        let source = toy_source();
        let clients = toy_clients(&source, 4);
        let arch = toy_arch();
        let init = build(&arch, 42).unwrap().param_vector();

        let drift = |mu: f64| -> f64 {
            let mut cfg = base_cfg(Method::FedProx, 1);
            cfg.prox_mu = mu;
            cfg.participation = 1.0;
            let out = run(&cfg, &arch, &clients, &EvalPlan::none()).unwrap();
            out.final_model
                .param_vector()
                .iter()
                .zip(&init)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        let d0 = drift(0.0);
        let d1 = drift(1.0);
        let d2 = drift(20.0);
        assert!(d0 > d1 && d1 > d2, "drift should fall with mu: {d0} {d1} {d2}");
    }

    #[test]
    fn diverging_client_is_dropped_and_reported() {
        // Client 1's pixels are astronomically large; its forward pass
        // overflows and the update is discarded.
        let spec = SyntheticSpec {
            classes: 3,
            train_per_class: 12,
            test_per_class: 4,
            height: 8,
            width: 8,
            ..Default::default()
        };
        let (train, _) = synthetic_pair(&spec, 5).unwrap();
        let n = train.len();
        let mut poisoned = train.gather(&(0..n).collect::<Vec<_>>()).images.data().to_vec();
        let labels = train.labels().to_vec();
        // Poison the contiguous block handed to client 1 below.
        for v in poisoned.iter_mut().skip(12 * 64).take(12 * 64) {
            *v = 1e160;
        }
        let ds = Arc::new(
            Dataset::new(Tensor::new(vec![n, 1, 8, 8], poisoned).unwrap(), labels, 3).unwrap(),
        );
        let clients = vec![
            ClientDataset::new(0, Arc::clone(&ds), (0..12).collect(), vec![]),
            ClientDataset::new(1, Arc::clone(&ds), (12..24).collect(), vec![]),
            ClientDataset::new(2, Arc::clone(&ds), (24..36).collect(), vec![]),
        ];
        let mut cfg = base_cfg(Method::FedAvg, 2);
        cfg.clients = 3;
        cfg.participation = 1.0;
        let arch = toy_arch();
        let out = run(&cfg, &arch, &clients, &EvalPlan::none()).unwrap();
        for r in &out.history {
            assert_eq!(r.failed, vec![1]);
            assert_eq!(r.participants, vec![0, 1, 2]);
        }
        assert!(!out.warnings.is_empty());
        assert!(out.final_model.param_vector().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn every_client_diverging_fails_the_round() {
        let ds = Arc::new(
            Dataset::new(
                Tensor::new(vec![6, 1, 8, 8], vec![1e160; 6 * 64]).unwrap(),
                vec![0, 1, 2, 0, 1, 2],
                3,
            )
            .unwrap(),
        );
        let clients = vec![ClientDataset::new(0, Arc::clone(&ds), (0..6).collect(), vec![])];
        let mut cfg = base_cfg(Method::FedAvg, 1);
        cfg.clients = 1;
        cfg.participation = 1.0;
        let err = run(&cfg, &toy_arch(), &clients, &EvalPlan::none()).unwrap_err();
        assert!(err.to_string().contains("every sampled client diverged"), "{err}");
    }

    #[test]
    fn evaluation_cadence_and_content() {
        let source = toy_source();
        let mut clients = toy_clients(&source, 4);
        for c in clients.iter_mut() {
            *c = local_split(c, 0.25).unwrap();
        }
        let spec = SyntheticSpec {
            classes: 3,
            train_per_class: 4,
            test_per_class: 8,
            height: 8,
            width: 8,
            ..Default::default()
        };
        let (_, external) = synthetic_pair(&spec, 6).unwrap();

        let cfg = base_cfg(Method::FedAvg, 5);
        let plan = EvalPlan::with_external(&external, 2);
        let out = run(&cfg, &toy_arch(), &clients, &plan).unwrap();
        // Rounds 2, 4 (cadence) and 5 (final) are evaluated.
        let evaluated: Vec<usize> =
            out.history.iter().filter(|r| r.external_acc_pct.is_some()).map(|r| r.round).collect();
        assert_eq!(evaluated, vec![2, 4, 5]);
        for r in &out.history {
            assert_eq!(r.external_acc_pct.is_some(), r.local_acc_mean_pct.is_some());
            if let Some(v) = r.local_acc_variance_pct2 {
                assert!(v >= 0.0);
            }
        }
    }

    #[test]
    fn unimodal_partition_trains_end_to_end() {
        // Smoke test over the pathological heterogeneity case: shards are
        // label-sorted slices, so some clients must be missing classes.
        let source = toy_source();
        let parts = partition_unimodal(Arc::clone(&source), 4, 2, 3).unwrap();
        assert!(parts.clients.iter().any(|c| c.distinct_classes() <= 2));
        let mut cfg = base_cfg(Method::FedAvg, 2);
        cfg.participation = 1.0;
        let out = run(&cfg, &toy_arch(), &parts.clients, &EvalPlan::none()).unwrap();
        assert_eq!(out.history.len(), 2);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let source = toy_source();
        let clients = toy_clients(&source, 4);
        let arch = toy_arch();
        let cfg = base_cfg(Method::FedAvg, 6);

        let straight = run(&cfg, &arch, &clients, &EvalPlan::none()).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let policy = CheckpointPolicy { dir: dir.path().to_path_buf(), every: 1 };
        // First leg: stop after round 3 by truncating the horizon.
        let mut half = cfg.clone();
        half.rounds = 3;
        half.aug_start_round = 4;
        run_resumable(&half, &arch, &clients, &EvalPlan::none(), Some(&policy)).unwrap();
        assert_eq!(latest_checkpoint(dir.path()).unwrap(), Some(3));

        // Second leg: full horizon picks up at round 4.
        let resumed = run_resumable(&cfg, &arch, &clients, &EvalPlan::none(), Some(&policy)).unwrap();
        assert_eq!(resumed.history.len(), 6);
        assert_eq!(resumed.final_model.state_hash(), straight.final_model.state_hash());
        let ha: Vec<u64> = straight.history.iter().map(|r| r.param_hash).collect();
        let hb: Vec<u64> = resumed.history.iter().map(|r| r.param_hash).collect();
        assert_eq!(ha, hb);
    }

    #[test]
    fn checkpoint_with_tampered_model_is_rejected() {
        let source = toy_source();
        let clients = toy_clients(&source, 4);
        let arch = toy_arch();
        let mut cfg = base_cfg(Method::FedAvg, 2);

        let dir = tempfile::tempdir().unwrap();
        let policy = CheckpointPolicy { dir: dir.path().to_path_buf(), every: 1 };
        run_resumable(&cfg, &arch, &clients, &EvalPlan::none(), Some(&policy)).unwrap();

        // Swap the round-2 model file for a fresh one; hash check trips.
        let (model_path, _) = checkpoint_paths(dir.path(), 2);
        build(&arch, 999).unwrap().save_file(&model_path).unwrap();
        cfg.rounds = 4;
        let err = run_resumable(&cfg, &arch, &clients, &EvalPlan::none(), Some(&policy)).unwrap_err();
        assert!(err.to_string().contains("state hash mismatch"), "{err}");
    }

    #[test]
    fn config_validation_names_offenders() {
        let mut cfg = base_cfg(Method::FedAvg, 3);
        cfg.participation = 0.0;
        assert!(cfg.validate().unwrap_err().to_string().contains("participation"));
        let mut cfg = base_cfg(Method::FedAvg, 3);
        cfg.aug_start_round = 5;
        assert!(cfg.validate().unwrap_err().to_string().contains("aug_start_round"));
        let mut cfg = base_cfg(Method::FedAvg, 3);
        cfg.clients = 0;
        assert!(cfg.validate().unwrap_err().to_string().contains("clients"));

        let cfg = base_cfg(Method::FedAvg, 3);
        let source = toy_source();
        let clients = toy_clients(&source, 3);
        let err = run(&cfg, &toy_arch(), &clients, &EvalPlan::none()).unwrap_err();
        assert!(err.to_string().contains("partition has 3"), "{err}");
    }

    #[test]
    fn method_names_round_trip() {
        for m in [Method::FedAvg, Method::FedProx, Method::FedZdac, Method::FedZdas] {
            let s = m.to_string();
            assert_eq!(s.parse::<Method>().unwrap(), m);
        }
        assert_eq!("fed-zdac".parse::<Method>().unwrap(), Method::FedZdac);
        assert!("fedsgd".parse::<Method>().is_err());
    }
}
