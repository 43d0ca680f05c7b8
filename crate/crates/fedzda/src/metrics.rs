//! Evaluation: accuracy, fairness statistics, oracle-based grading of
//! synthesized data, and the base-model quality study.
//!
//! Fairness is reported as the population variance of accuracy in percent
//! (so the unit is percent squared): across clients' local test sets for
//! client-level fairness, across classes of a balanced external test set
//! for class-level fairness. Lower variance at comparable mean accuracy
//! means the model serves participants more evenly.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{partition_iid, partition_unimodal, ClientDataset, Dataset, TrainData};
use crate::error::{Error, Result};
use crate::federation::{run, EvalPlan, FedConfig, Method};
use crate::models::{ArchitectureSpec, Model};
use crate::rng::{self, domain};
use crate::train::train_sgd;
use crate::zsdg::{generate, SyntheticBatch, ZsdgConfig};

/// Population (biased) variance; 0 for a single element.
pub fn population_variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

/// Fraction of rows whose argmax prediction matches the label.
pub fn accuracy(model: &Model, data: &TrainData) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Usage("accuracy: empty evaluation data".into()));
    }
    let preds = model.predict_classes(&data.images)?;
    let hits = preds.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Client-level fairness: the global model evaluated on every client's
/// own local test set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalTestStats {
    /// (client id, accuracy in percent), clients with test data only.
    pub per_client: Vec<(usize, f64)>,
    /// Clients skipped for lack of local test data.
    pub skipped: Vec<usize>,
    pub mean_pct: f64,
    /// Population variance of per-client accuracy, in percent squared.
    pub variance_pct2: f64,
}

pub fn local_test(global: &Model, clients: &[ClientDataset]) -> Result<LocalTestStats> {
    let mut per_client = Vec::with_capacity(clients.len());
    let mut skipped = Vec::new();
    for c in clients {
        if c.test_indices.is_empty() {
            skipped.push(c.id);
            continue;
        }
        let acc = accuracy(global, &c.test_data())?;
        per_client.push((c.id, acc * 100.0));
    }
    if per_client.is_empty() {
        return Err(Error::Usage("local_test: no client has local test data".into()));
    }
    let values: Vec<f64> = per_client.iter().map(|&(_, a)| a).collect();
    Ok(LocalTestStats {
        mean_pct: values.iter().sum::<f64>() / values.len() as f64,
        variance_pct2: population_variance(&values),
        per_client,
        skipped,
    })
}

/// Class-level fairness on an external test set that contains every class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlobalTestStats {
    pub accuracy_pct: f64,
    pub per_class_pct: Vec<f64>,
    /// Population variance of per-class accuracy, percent squared.
    pub class_variance_pct2: f64,
    /// Row = true class, column = predicted class.
    pub confusion: Vec<Vec<usize>>,
}

pub fn global_test(model: &Model, external: &Dataset) -> Result<GlobalTestStats> {
    let classes = external.classes;
    let hist = external.histogram();
    if let Some(absent) = hist.iter().position(|&c| c == 0) {
        return Err(Error::Usage(format!(
            "global_test: class {absent} absent from the external test set"
        )));
    }
    let all: Vec<usize> = (0..external.len()).collect();
    let batch = external.gather(&all);
    let preds = model.predict_classes(&batch.images)?;

    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&p, &l) in preds.iter().zip(&batch.labels) {
        confusion[l][p] += 1;
    }
    let per_class_pct: Vec<f64> = (0..classes)
        .map(|c| 100.0 * confusion[c][c] as f64 / hist[c] as f64)
        .collect();
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    Ok(GlobalTestStats {
        accuracy_pct: 100.0 * correct as f64 / external.len() as f64,
        class_variance_pct2: population_variance(&per_class_pct),
        per_class_pct,
        confusion,
    })
}

/// Batch size and learning rate for oracle training; standard small-CNN
/// settings, fixed so oracle quality is comparable across experiments.
const ORACLE_BATCH: usize = 10;
const ORACLE_LR: f64 = 0.02;

/// Train a centralized reference classifier on real data. Used to grade
/// synthesized samples independently of the model that produced them.
pub fn train_oracle(train: &Dataset, arch: &ArchitectureSpec, epochs: usize, seed: u64) -> Result<Model> {
    if epochs == 0 {
        // Explicitly allowed: an untrained oracle is the chance baseline.
        return crate::models::build(arch, seed);
    }
    let mut model = crate::models::build(arch, seed)?;
    let all: Vec<usize> = (0..train.len()).collect();
    let data = train.gather(&all);
    let mut rng = rng::stream(seed, domain::ORACLE_TRAIN, &[]);
    train_sgd(&mut model, &data, epochs, ORACLE_BATCH, ORACLE_LR, None, &mut rng)?;
    Ok(model)
}

/// How well synthesized data stands in for real data, judged by an
/// independent oracle and by the generating model itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleReport {
    pub per_class_oracle_pct: Vec<f64>,
    pub per_class_generator_pct: Vec<f64>,
    /// Mean of per-class oracle accuracy (balanced batches make this the
    /// plain accuracy too).
    pub mean_oracle_pct: f64,
    pub mean_generator_pct: f64,
}

impl OracleReport {
    /// Oracle accuracy as a multiple of chance level.
    pub fn chance_multiple(&self, classes: usize) -> f64 {
        self.mean_oracle_pct / (100.0 / classes as f64)
    }
}

pub fn eval_synthetic(oracle: &Model, generator: &Model, batch: &SyntheticBatch) -> Result<OracleReport> {
    if batch.is_empty() {
        return Err(Error::Usage("eval_synthetic: empty batch".into()));
    }
    if oracle.spec().classes != batch.classes {
        return Err(Error::Usage(format!(
            "eval_synthetic: oracle has {} classes, batch has {}",
            oracle.spec().classes,
            batch.classes
        )));
    }
    let oracle_preds = oracle.predict_classes(&batch.images)?;
    let generator_preds = generator.predict_classes(&batch.images)?;

    let per_class = |preds: &[usize]| -> Result<Vec<f64>> {
        let mut hit = vec![0usize; batch.classes];
        let mut count = vec![0usize; batch.classes];
        for (&p, &l) in preds.iter().zip(&batch.labels) {
            count[l] += 1;
            if p == l {
                hit[l] += 1;
            }
        }
        (0..batch.classes)
            .map(|c| {
                if count[c] == 0 {
                    Err(Error::Usage(format!("eval_synthetic: no samples for class {c}")))
                } else {
                    Ok(100.0 * hit[c] as f64 / count[c] as f64)
                }
            })
            .collect()
    };

    let per_class_oracle_pct = per_class(&oracle_preds)?;
    let per_class_generator_pct = per_class(&generator_preds)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(OracleReport {
        mean_oracle_pct: mean(&per_class_oracle_pct),
        mean_generator_pct: mean(&per_class_generator_pct),
        per_class_oracle_pct,
        per_class_generator_pct,
    })
}

/// The three training regimes compared by the base-model quality study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Centralized,
    FedIid,
    FedNonIid,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegimeOutcome {
    pub regime: Regime,
    pub external_acc_pct: f64,
    pub generation_final_loss: f64,
    /// Self-classification accuracy of the generated batch under the
    /// generating model.
    pub generation_self_acc_pct: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QualityReport {
    pub rows: Vec<RegimeOutcome>,
}

#[derive(Debug, Clone)]
pub struct QualityStudyConfig {
    pub arch: ArchitectureSpec,
    /// Federated settings shared by the two federated regimes; `method`
    /// is forced to plain averaging.
    pub fed: FedConfig,
    pub centralized_epochs: usize,
    pub noniid_shards_per_client: usize,
    pub zsdg: ZsdgConfig,
}

/// Train the same architecture centralized, federated-iid and
/// federated-non-iid, then measure external accuracy and the quality of
/// data synthesized from each result. The study quantifies how much the
/// base model's own quality bounds the synthetic data's usefulness.
pub fn model_quality_study(
    train: Arc<Dataset>,
    external: &Dataset,
    cfg: &QualityStudyConfig,
) -> Result<QualityReport> {
    let mut fed = cfg.fed.clone();
    fed.method = Method::FedAvg;
    fed.validate()?;

    let mut rows = Vec::with_capacity(3);
    for (tag, regime) in [(0u64, Regime::Centralized), (1, Regime::FedIid), (2, Regime::FedNonIid)] {
        let model = match regime {
            Regime::Centralized => {
                let mut m = crate::models::build(&cfg.arch, fed.seed)?;
                let all: Vec<usize> = (0..train.len()).collect();
                let data = train.gather(&all);
                let mut rng = rng::stream(fed.seed, domain::ORACLE_TRAIN, &[100]);
                train_sgd(&mut m, &data, cfg.centralized_epochs, fed.batch_size, fed.learning_rate, None, &mut rng)?;
                m
            }
            Regime::FedIid => {
                let parts = partition_iid(Arc::clone(&train), fed.clients, fed.seed)?;
                run(&fed, &cfg.arch, &parts.clients, &EvalPlan::none())?.final_model
            }
            Regime::FedNonIid => {
                let parts = partition_unimodal(
                    Arc::clone(&train),
                    fed.clients,
                    cfg.noniid_shards_per_client,
                    fed.seed,
                )?;
                run(&fed, &cfg.arch, &parts.clients, &EvalPlan::none())?.final_model
            }
        };

        let stats = global_test(&model, external)?;
        let batch = generate(&model, &cfg.zsdg, rng::mix(fed.seed, 0x71a1 + tag))?;
        let self_preds = model.predict_classes(&batch.images)?;
        let self_hits = self_preds.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
        rows.push(RegimeOutcome {
            regime,
            external_acc_pct: stats.accuracy_pct,
            generation_final_loss: batch.final_loss.total,
            generation_self_acc_pct: 100.0 * self_hits as f64 / batch.len() as f64,
        });
    }
    Ok(QualityReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_pair, SyntheticSpec};
    use crate::models::build;
    use crate::tensor::Tensor;

    fn toy_arch() -> ArchitectureSpec {
        ArchitectureSpec::toy_cnn(1, 8, 8, 4)
    }

    fn toy_data() -> (Dataset, Dataset) {
        let spec = SyntheticSpec {
            classes: 4,
            train_per_class: 30,
            test_per_class: 10,
            height: 8,
            width: 8,
            class_sep: 0.9,
            noise_std: 0.08,
            ..Default::default()
        };
        synthetic_pair(&spec, 11).unwrap()
    }

    #[test]
    fn population_variance_closed_forms() {
        assert_eq!(population_variance(&[]), 0.0);
        assert_eq!(population_variance(&[5.0]), 0.0);
        assert_eq!(population_variance(&[2.0, 4.0]), 1.0);
        // Identical representable values: exactly zero.
        assert_eq!(population_variance(&[3.5; 7]), 0.0);
    }

    #[test]
    fn zero_logit_model_hits_chance_on_balanced_set() {
        // A zeroed head predicts class 0 for every input, so accuracy on a
        // balanced set is exactly 1/classes and class variance is the
        // one-hot pattern's variance.
        let (_, test) = toy_data();
        let mut model = build(&toy_arch(), 1).unwrap();
        let mut params = model.param_vector();
        let head = 4 * 4 * 4 * 4 + 4;
        let off = params.len() - head;
        for p in &mut params[off..] {
            *p = 0.0;
        }
        model.set_param_vector(&params).unwrap();

        let stats = global_test(&model, &test).unwrap();
        assert!((stats.accuracy_pct - 25.0).abs() < 1e-9);
        assert_eq!(stats.per_class_pct, vec![100.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn confusion_matrix_recounts_to_accuracy() {
        let (train, test) = toy_data();
        let oracle = train_oracle(&train, &toy_arch(), 3, 7).unwrap();
        let stats = global_test(&oracle, &test).unwrap();
        // Independent recount from the confusion matrix.
        let total: usize = stats.confusion.iter().map(|row| row.iter().sum::<usize>()).sum();
        let diag: usize = (0..4).map(|c| stats.confusion[c][c]).sum();
        assert_eq!(total, test.len());
        assert!((stats.accuracy_pct - 100.0 * diag as f64 / total as f64).abs() < 1e-12);
        for c in 0..4 {
            let row: usize = stats.confusion[c].iter().sum();
            assert!((stats.per_class_pct[c] - 100.0 * stats.confusion[c][c] as f64 / row as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn global_test_requires_every_class() {
        let (_, test) = toy_data();
        let model = build(&toy_arch(), 1).unwrap();
        // Drop class 3 from the set.
        let keep: Vec<usize> = (0..test.len()).filter(|&i| test.labels()[i] != 3).collect();
        let partial = test.gather(&keep);
        let partial = Dataset::new(partial.images, partial.labels, 4).unwrap();
        let err = global_test(&model, &partial).unwrap_err();
        assert!(err.to_string().contains("class 3 absent"), "{err}");
    }

    #[test]
    fn perfect_model_has_zero_variance() {
        // Build a dataset labeled by the oracle itself: accuracy 100%.
        let (train, test) = toy_data();
        let oracle = train_oracle(&train, &toy_arch(), 3, 7).unwrap();
        let all: Vec<usize> = (0..test.len()).collect();
        let batch = test.gather(&all);
        let relabeled = Dataset::new(batch.images, oracle.predict_classes(test.images()).unwrap(), 4);
        // Relabeling may drop a class entirely; only run the check when
        // every class survives.
        if let Ok(ds) = relabeled {
            if ds.histogram().iter().all(|&c| c > 0) {
                let stats = global_test(&oracle, &ds).unwrap();
                assert_eq!(stats.accuracy_pct, 100.0);
                assert_eq!(stats.class_variance_pct2, 0.0);
            }
        }
    }

    #[test]
    fn oracle_trains_above_chance_and_untrained_is_chance_like() {
        let (train, test) = toy_data();
        let oracle = train_oracle(&train, &toy_arch(), 4, 3).unwrap();
        let stats = global_test(&oracle, &test).unwrap();
        assert!(stats.accuracy_pct > 3.0 * 25.0, "oracle accuracy {} should beat 3x chance", stats.accuracy_pct);

        let untrained = train_oracle(&train, &toy_arch(), 0, 3).unwrap();
        let u = global_test(&untrained, &test).unwrap();
        assert!(u.accuracy_pct < 60.0, "untrained oracle suspiciously good: {}", u.accuracy_pct);
    }

    #[test]
    fn train_oracle_is_deterministic() {
        let (train, _) = toy_data();
        let a = train_oracle(&train, &toy_arch(), 2, 9).unwrap();
        let b = train_oracle(&train, &toy_arch(), 2, 9).unwrap();
        assert_eq!(a.state_hash(), b.state_hash());
    }

    #[test]
    fn local_test_skips_and_errors_sensibly() {
        let (train, _) = toy_data();
        let source = Arc::new(train);
        let model = build(&toy_arch(), 2).unwrap();
        let with_test = ClientDataset::new(0, Arc::clone(&source), vec![0, 1, 2], vec![3, 4, 5]);
        let without = ClientDataset::new(1, Arc::clone(&source), vec![6, 7], vec![]);
        let stats = local_test(&model, &[with_test.clone(), without.clone()]).unwrap();
        assert_eq!(stats.per_client.len(), 1);
        assert_eq!(stats.skipped, vec![1]);
        assert_eq!(stats.variance_pct2, 0.0, "single client has zero variance");

        let err = local_test(&model, &[without]).unwrap_err();
        assert!(err.to_string().contains("no client has local test data"), "{err}");
    }

    #[test]
    fn relabeled_real_data_scores_like_global_test() {
        // eval_synthetic fed with real images labeled by their true labels
        // must agree with the per-class accuracy of global_test.
        let (train, test) = toy_data();
        let oracle = train_oracle(&train, &toy_arch(), 3, 7).unwrap();
        let all: Vec<usize> = (0..test.len()).collect();
        let batch_data = test.gather(&all);
        let batch = SyntheticBatch {
            images: batch_data.images.clone(),
            labels: batch_data.labels.clone(),
            source_model: vec![0; batch_data.labels.len()],
            classes: 4,
            per_class: 10,
            initial_loss: crate::zsdg::LossBreakdown { bn: 0.0, ce: 0.0, total: 0.0 },
            final_loss: crate::zsdg::LossBreakdown { bn: 0.0, ce: 0.0, total: 0.0 },
            loss_history: vec![],
        };
        let report = eval_synthetic(&oracle, &oracle, &batch).unwrap();
        let stats = global_test(&oracle, &test).unwrap();
        for c in 0..4 {
            assert!((report.per_class_oracle_pct[c] - stats.per_class_pct[c]).abs() < 1e-9);
        }
    }

    #[test]
    fn noise_batch_scores_near_chance_on_average() {
        // Mean per-class accuracy over balanced random-noise labels is
        // 1/classes in expectation regardless of the oracle's biases.
        let (train, _) = toy_data();
        let oracle = train_oracle(&train, &toy_arch(), 3, 7).unwrap();
        let n_per = 50;
        let mut rng = rng::stream(31, domain::SYNTH_DATA, &[7]);
        let n = 4 * n_per;
        let images = Tensor::from_parts(vec![n, 1, 8, 8], (0..n * 64).map(|_| rng::uniform(&mut rng)).collect());
        let labels: Vec<usize> = (0..n).map(|i| i / n_per).collect();
        let batch = SyntheticBatch {
            images,
            labels,
            source_model: vec![0; n],
            classes: 4,
            per_class: n_per,
            initial_loss: crate::zsdg::LossBreakdown { bn: 0.0, ce: 0.0, total: 0.0 },
            final_loss: crate::zsdg::LossBreakdown { bn: 0.0, ce: 0.0, total: 0.0 },
            loss_history: vec![],
        };
        let report = eval_synthetic(&oracle, &oracle, &batch).unwrap();
        // Multinomial 4-sigma bound around 25% with 200 draws.
        let sigma = (25.0 * 75.0 / n as f64).sqrt();
        assert!(
            (report.mean_oracle_pct - 25.0).abs() < 4.0 * sigma,
            "noise scored {} (expected ~25 +/- {})",
            report.mean_oracle_pct,
            4.0 * sigma
        );
    }
}
