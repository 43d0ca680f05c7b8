//! Empirical privacy audit of the leakage chain behind zero-shot
//! augmentation.
//!
//! The question audited here: how distinguishable are two federations that
//! differ in a single client's data, measured at three points of the
//! pipeline? `delta_data` compares the (possibly augmented) client
//! datasets themselves through their label marginals. `delta_model`
//! compares the client models trained from them. `delta_agg` compares the
//! aggregates the server would publish, where the differing update is
//! diluted to weight 1/n against a shared broadcast model. Post-processing
//! cannot create distinguishability, so a sound pipeline must show
//! `delta_agg <= delta_model` up to sampling noise; augmentation is
//! supposed to shrink `delta_data` toward zero as the synthetic quota
//! grows, since balanced synthetic samples drown out the real marginals.
//!
//! Distances are total variation over *declared projections*, never over
//! raw high-dimensional objects: a dataset projects to its label marginal,
//! a model to its head weight norm and per-class mean logits on a fixed
//! probe batch. Any measurable projection can only under-report the true
//! distance, so these are necessary checks rather than proofs, and the
//! report says which projection each number came from.
//!
//! Runs are seed-paired: run k of arm A and run k of arm B share their
//! initialization, training stream and synthesis stream, so a difference
//! in outcomes is attributable to the data alone. In the degenerate case
//! of identical differing clients, pairing makes both arms bit-identical
//! and every distance exactly zero.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TrainData;
use crate::error::{Error, Result};
use crate::federation::aggregate;
use crate::hashing::Fnv;
use crate::models::{build, ArchitectureSpec, Model};
use crate::rng::{self, domain};
use crate::tensor::{BnMode, Tape, Tensor};
use crate::train::train_sgd;
use crate::zsdg::{generate, ZsdgConfig};

/// Equal-width bin count for continuous projections.
pub const TV_BINS: usize = 32;
/// Bootstrap resamples behind every reported standard error. Fixed so
/// identical inputs give byte-identical reports.
pub const BOOTSTRAP_RESAMPLES: usize = 200;

/// The sample space a histogram lives on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BinSpec {
    /// One bin per class label.
    Labels { classes: usize },
    /// Equal-width bins over [lo, hi]; values at hi fall into the last
    /// bin. A degenerate range (hi <= lo) collapses everything into bin 0.
    Uniform { lo: f64, hi: f64, bins: usize },
}

impl BinSpec {
    fn bins(&self) -> usize {
        match *self {
            BinSpec::Labels { classes } => classes,
            BinSpec::Uniform { bins, .. } => bins,
        }
    }

    fn index(&self, x: f64) -> usize {
        match *self {
            BinSpec::Labels { classes } => (x as usize).min(classes - 1),
            BinSpec::Uniform { lo, hi, bins } => {
                if hi <= lo {
                    return 0;
                }
                (((x - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1)
            }
        }
    }
}

/// A normalized histogram with its binning and the sample count behind it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmpiricalDistribution {
    pub spec: BinSpec,
    pub masses: Vec<f64>,
    pub count: usize,
}

impl EmpiricalDistribution {
    /// Validated constructor for externally computed masses.
    pub fn from_masses(spec: BinSpec, masses: Vec<f64>, count: usize) -> Result<Self> {
        if masses.len() != spec.bins() {
            return Err(Error::Usage(format!(
                "distribution has {} masses for {} bins",
                masses.len(),
                spec.bins()
            )));
        }
        if count == 0 {
            return Err(Error::Usage("empirical distribution needs at least one sample".into()));
        }
        let total: f64 = masses.iter().sum();
        if masses.iter().any(|&m| !(m >= 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::Usage(format!(
                "bin masses must be non-negative and sum to 1 (got {total})"
            )));
        }
        Ok(EmpiricalDistribution { spec, masses, count })
    }

    /// Label marginal of a dataset.
    pub fn from_labels(labels: &[usize], classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Usage("empirical distribution needs at least one sample".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Usage(format!("label {bad} out of range for {classes} classes")));
        }
        let mut masses = vec![0.0; classes];
        for &l in labels {
            masses[l] += 1.0;
        }
        for m in &mut masses {
            *m /= labels.len() as f64;
        }
        Ok(EmpiricalDistribution { spec: BinSpec::Labels { classes }, masses, count: labels.len() })
    }

    /// Histogram of scalar samples under a shared binning.
    pub fn from_samples(samples: &[f64], spec: BinSpec) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Usage("empirical distribution needs at least one sample".into()));
        }
        let mut masses = vec![0.0; spec.bins()];
        for &x in samples {
            masses[spec.index(x)] += 1.0;
        }
        for m in &mut masses {
            *m /= samples.len() as f64;
        }
        Ok(EmpiricalDistribution { spec, masses, count: samples.len() })
    }

    fn hash(&self) -> u64 {
        let mut h = Fnv::new();
        h.write_f64s(&self.masses);
        h.write_u64(self.count as u64);
        h.finish()
    }
}

/// Draw a multinomial resample of `dist` and return the resampled masses.
fn resample_masses(dist: &EmpiricalDistribution, rng: &mut impl rand_core::RngCore) -> Vec<f64> {
    let mut cum = Vec::with_capacity(dist.masses.len());
    let mut acc = 0.0;
    for &m in &dist.masses {
        acc += m;
        cum.push(acc);
    }
    let mut counts = vec![0usize; dist.masses.len()];
    for _ in 0..dist.count {
        let u = rng::uniform(rng);
        let idx = cum.partition_point(|&c| c < u).min(counts.len() - 1);
        counts[idx] += 1;
    }
    counts.iter().map(|&c| c as f64 / dist.count as f64).collect()
}

fn tv_of(p: &[f64], q: &[f64]) -> f64 {
    // The clamp absorbs rounding from bin masses like 1/30 that cannot
    // sum to exactly 1.
    (0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()).min(1.0)
}

/// Total variation between two histograms on identical binnings, with a
/// bootstrap standard error (multinomial resampling of both histograms).
///
/// The bootstrap streams are keyed by an order-independent hash of the
/// two histograms, so the result is exactly symmetric in its arguments
/// and byte-stable across runs.
pub fn estimate_tv(p: &EmpiricalDistribution, q: &EmpiricalDistribution) -> Result<(f64, f64)> {
    if p.spec != q.spec {
        return Err(Error::Usage("estimate_tv: binning mismatch between the two distributions".into()));
    }
    let tv = tv_of(&p.masses, &q.masses);

    let hp = p.hash();
    let hq = q.hash();
    let base = hp ^ hq;
    let mut rng_p = rng::stream(base, domain::BOOTSTRAP, &[hp]);
    let mut rng_q = rng::stream(base, domain::BOOTSTRAP, &[hq]);
    let mut draws = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    for _ in 0..BOOTSTRAP_RESAMPLES {
        let mp = resample_masses(p, &mut rng_p);
        let mq = resample_masses(q, &mut rng_q);
        draws.push(tv_of(&mp, &mq));
    }
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    let var = draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / draws.len() as f64;
    Ok((tv, var.sqrt()))
}

/// How models are flattened to comparable sample points: the L2 norm of
/// the final dense weight matrix, followed by the per-class mean logits
/// over a fixed random probe batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionSpec {
    pub probe_rows: usize,
}

impl Default for ProjectionSpec {
    fn default() -> Self {
        ProjectionSpec { probe_rows: 8 }
    }
}

/// The fixed probe batch for a given seed and input geometry.
pub fn probe_batch(spec: &ProjectionSpec, arch: &ArchitectureSpec, seed: u64) -> Result<Tensor> {
    if spec.probe_rows == 0 {
        return Err(Error::config("audit.probe_rows", "must be at least 1"));
    }
    let [c, h, w] = arch.input_shape();
    let n = spec.probe_rows * c * h * w;
    let mut rng = rng::stream(seed, domain::PROJECTION, &[]);
    let data: Vec<f64> = (0..n).map(|_| rng::uniform(&mut rng)).collect();
    Tensor::new(vec![spec.probe_rows, c, h, w], data)
}

/// Project a model to its declared low-dimensional statistic. The output
/// length is 1 + classes.
pub fn project_model(model: &Model, probe: &Tensor) -> Result<Vec<f64>> {
    let params = model.param_tensors();
    let head = params[params.len() - 2];
    let norm = head.data().iter().map(|v| v * v).sum::<f64>().sqrt();

    let mut tape = Tape::new();
    let x = tape.constant(probe);
    let trace = model.forward_frozen(&mut tape, x, BnMode::Eval)?;
    let logits = tape.value(trace.logits);
    let classes = model.spec().classes;
    let rows = probe.shape()[0];

    let mut out = Vec::with_capacity(1 + classes);
    out.push(norm);
    for class in 0..classes {
        let mut sum = 0.0;
        for r in 0..rows {
            sum += logits[r * classes + class];
        }
        out.push(sum / rows as f64);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditConfig {
    pub arch: ArchitectureSpec,
    /// Paired runs per arm. At least 30; histograms over fewer runs say
    /// nothing.
    pub runs: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Synthetic samples per class mixed into each arm's dataset before
    /// training. 0 audits the unaugmented pipeline.
    pub quota: usize,
    /// Synthesis settings; `per_class` is overridden by `quota`.
    pub zsdg: ZsdgConfig,
    /// Silent federation peers in the aggregation step. The published
    /// aggregate weighs the differing client 1/(other_clients + 1).
    pub other_clients: usize,
    pub projection: ProjectionSpec,
    pub seed: u64,
    pub parallel: bool,
}

impl AuditConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs < 30 {
            return Err(Error::config(
                "audit.runs",
                format!("need at least 30 paired runs for a meaningful histogram, got {}", self.runs),
            ));
        }
        if self.local_epochs == 0 {
            return Err(Error::config("audit.local_epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("audit.batch_size", "must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config("audit.learning_rate", "must be finite and non-negative"));
        }
        if self.other_clients == 0 {
            return Err(Error::config("audit.other_clients", "aggregation dilution needs at least one peer"));
        }
        if self.probe_rows() == 0 {
            return Err(Error::config("audit.probe_rows", "must be at least 1"));
        }
        if self.quota > 0 {
            self.zsdg.validate()?;
        }
        Ok(())
    }

    fn probe_rows(&self) -> usize {
        self.projection.probe_rows
    }
}

/// One estimated distance with its bootstrap standard error. For model
/// and aggregate links, `coordinate` names the projection coordinate the
/// distance was measured on (the one with the largest distance); the data
/// link is a single label-marginal comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkEstimate {
    pub tv: f64,
    pub stderr: f64,
    pub coordinate: Option<usize>,
}

/// Raw sample points, attached for re-analysis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditRaw {
    pub marginal_a: Vec<f64>,
    pub marginal_b: Vec<f64>,
    /// K x (1 + classes) projection samples per arm.
    pub model_projections_a: Vec<Vec<f64>>,
    pub model_projections_b: Vec<Vec<f64>>,
    pub agg_projections_a: Vec<Vec<f64>>,
    pub agg_projections_b: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditReport {
    pub runs: usize,
    pub quota: usize,
    /// Distance between the augmented datasets' label marginals.
    pub delta_data: LinkEstimate,
    /// Same comparison with the quota forced to 0, to show how much the
    /// synthetic samples alone closed the gap.
    pub delta_data_unaugmented: LinkEstimate,
    pub delta_model: LinkEstimate,
    pub delta_agg: LinkEstimate,
    /// delta_model <= delta_data within 2 combined standard errors. May
    /// legitimately fail when the label marginal understates the data
    /// difference (identical marginals, different pixels).
    pub data_link_holds: bool,
    /// delta_agg <= delta_model within 2 combined standard errors. This is
    /// the post-processing direction; a sound pipeline must satisfy it.
    pub agg_link_holds: bool,
    pub raw: AuditRaw,
}

/// Augmented label list for the data-level comparison: real labels plus
/// `quota` synthetic samples of every class.
fn augmented_labels(real: &TrainData, quota: usize) -> Vec<usize> {
    let mut labels = real.labels.clone();
    for class in 0..real.classes {
        labels.extend(std::iter::repeat(class).take(quota));
    }
    labels
}

fn data_delta(a: &TrainData, b: &TrainData, quota: usize) -> Result<LinkEstimate> {
    let pa = EmpiricalDistribution::from_labels(&augmented_labels(a, quota), a.classes)?;
    let pb = EmpiricalDistribution::from_labels(&augmented_labels(b, quota), b.classes)?;
    let (tv, stderr) = estimate_tv(&pa, &pb)?;
    Ok(LinkEstimate { tv, stderr, coordinate: None })
}

/// Label-marginal distance across a list of synthetic quotas. Cheap (no
/// training); exposes how augmentation drowns out the real marginals.
pub fn quota_sweep(a: &TrainData, b: &TrainData, quotas: &[usize]) -> Result<Vec<(usize, f64)>> {
    if a.classes != b.classes {
        return Err(Error::Usage("quota_sweep: class count mismatch".into()));
    }
    quotas
        .iter()
        .map(|&q| data_delta(a, b, q).map(|link| (q, link.tv)))
        .collect()
}

/// Pick the projection coordinate with the largest binned distance and
/// estimate it. Every coordinate gets the same pooled-range binning rule.
fn projected_delta(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<LinkEstimate> {
    let dim = a[0].len();
    let mut best: Option<LinkEstimate> = None;
    for d in 0..dim {
        let xs: Vec<f64> = a.iter().map(|row| row[d]).collect();
        let ys: Vec<f64> = b.iter().map(|row| row[d]).collect();
        let lo = xs.iter().chain(&ys).copied().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().chain(&ys).copied().fold(f64::NEG_INFINITY, f64::max);
        let spec = BinSpec::Uniform { lo, hi, bins: TV_BINS };
        let p = EmpiricalDistribution::from_samples(&xs, spec.clone())?;
        let q = EmpiricalDistribution::from_samples(&ys, spec)?;
        let (tv, stderr) = estimate_tv(&p, &q)?;
        let better = match &best {
            None => true,
            Some(cur) => tv > cur.tv,
        };
        if better {
            best = Some(LinkEstimate { tv, stderr, coordinate: Some(d) });
        }
    }
    best.ok_or_else(|| Error::Usage("projected_delta: empty projection".into()))
}

/// Train one arm's client model for run `k` and return (model, aggregate)
/// projections. Pairing contract: everything random here is keyed by
/// (seed, k) only, never by the arm, so identical data gives identical
/// outcomes.
fn run_arm(
    cfg: &AuditConfig,
    w0: &Model,
    probe: &Tensor,
    data: &TrainData,
    fake: Option<&TrainData>,
    k: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut local = data.clone();
    if let Some(f) = fake {
        local.append(f)?;
    }
    let mut model = w0.clone();
    let mut rng = rng::stream(cfg.seed, domain::AUDIT, &[k as u64]);
    train_sgd(
        &mut model,
        &local,
        cfg.local_epochs,
        cfg.batch_size,
        cfg.learning_rate,
        None,
        &mut rng,
    )?;
    let model_proj = project_model(&model, probe)?;

    let n = (cfg.other_clients + 1) as f64;
    let mut agg = w0.clone();
    aggregate(&mut agg, &[(&model, 1.0 / n), (w0, (n - 1.0) / n)])?;
    let agg_proj = project_model(&agg, probe)?;
    Ok((model_proj, agg_proj))
}

/// Audit two federations that differ in one client's data (`a` vs `b`,
/// everything else shared). Runs `cfg.runs` seed-paired trainings per arm
/// from a fixed broadcast initialization, projects the client models and
/// their published aggregates, and estimates the three distances.
pub fn audit_chain(a: &TrainData, b: &TrainData, cfg: &AuditConfig) -> Result<AuditReport> {
    cfg.validate()?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::Usage("audit_chain: both differing clients need data".into()));
    }
    if a.classes != b.classes || a.image_shape() != b.image_shape() {
        return Err(Error::Usage("audit_chain: the two arms must share geometry and class count".into()));
    }

    let w0 = build(&cfg.arch, cfg.seed)?;
    let probe = probe_batch(&cfg.projection, &cfg.arch, cfg.seed)?;

    // The synthetic batch depends on the broadcast model and the run seed
    // only, so both arms share it; generate each run's batch once.
    let mut gen_cfg = cfg.zsdg.clone();
    gen_cfg.per_class = cfg.quota;
    let fakes: Vec<Option<TrainData>> = (0..cfg.runs)
        .map(|k| -> Result<Option<TrainData>> {
            if cfg.quota == 0 {
                return Ok(None);
            }
            let batch = generate(&w0, &gen_cfg, rng::mix(rng::mix(cfg.seed, domain::AUDIT), k as u64))?;
            Ok(Some(batch.as_train_data()))
        })
        .collect::<Result<_>>()?;

    let run_pair = |k: usize| -> Result<[(Vec<f64>, Vec<f64>); 2]> {
        let fake = fakes[k].as_ref();
        Ok([run_arm(cfg, &w0, &probe, a, fake, k)?, run_arm(cfg, &w0, &probe, b, fake, k)?])
    };
    let outcomes: Vec<[(Vec<f64>, Vec<f64>); 2]> = if cfg.parallel {
        (0..cfg.runs).into_par_iter().map(run_pair).collect::<Result<_>>()?
    } else {
        (0..cfg.runs).map(run_pair).collect::<Result<_>>()?
    };

    let mut raw = AuditRaw {
        marginal_a: EmpiricalDistribution::from_labels(&augmented_labels(a, cfg.quota), a.classes)?.masses,
        marginal_b: EmpiricalDistribution::from_labels(&augmented_labels(b, cfg.quota), b.classes)?.masses,
        model_projections_a: Vec::with_capacity(cfg.runs),
        model_projections_b: Vec::with_capacity(cfg.runs),
        agg_projections_a: Vec::with_capacity(cfg.runs),
        agg_projections_b: Vec::with_capacity(cfg.runs),
    };
    for [(ma, ga), (mb, gb)] in outcomes {
        raw.model_projections_a.push(ma);
        raw.agg_projections_a.push(ga);
        raw.model_projections_b.push(mb);
        raw.agg_projections_b.push(gb);
    }

    let delta_data = data_delta(a, b, cfg.quota)?;
    let delta_data_unaugmented = data_delta(a, b, 0)?;
    let delta_model = projected_delta(&raw.model_projections_a, &raw.model_projections_b)?;
    let delta_agg = projected_delta(&raw.agg_projections_a, &raw.agg_projections_b)?;

    let combined = |x: &LinkEstimate, y: &LinkEstimate| (x.stderr * x.stderr + y.stderr * y.stderr).sqrt();
    let data_link_holds = delta_model.tv <= delta_data.tv + 2.0 * combined(&delta_model, &delta_data);
    let agg_link_holds = delta_agg.tv <= delta_model.tv + 2.0 * combined(&delta_agg, &delta_model);

    Ok(AuditReport {
        runs: cfg.runs,
        quota: cfg.quota,
        delta_data,
        delta_data_unaugmented,
        delta_model,
        delta_agg,
        data_link_holds,
        agg_link_holds,
        raw,
    })
}
