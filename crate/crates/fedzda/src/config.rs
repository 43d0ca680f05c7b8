//! Experiment configuration: TOML files, named presets, resolution of
//! sentinel values, and dataset loading.
//!
//! A config file may omit any field; defaults fill the gaps. `resolve`
//! turns the sentinels (`aug_start_round = 0`, `partition.clients = 0`)
//! into concrete values, and the harness persists the resolved form next
//! to its artifacts so a run's inputs are reproducible from the output
//! directory alone.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{
    load_cifar10_test, load_cifar10_train, load_idx, synthetic_pair, Dataset, PartitionPlan,
    SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::federation::{FedConfig, Method, Weighting};
use crate::models::{ArchId, ArchitectureSpec};
use crate::zsdg::ZsdgConfig;

/// Where training data comes from. File-backed variants expect the
/// standard distribution layout inside `dir`; relative directories are
/// resolved against the `FEDZDA_DATA_DIR` environment variable when set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum DataSpec {
    /// IDX files: train-images-idx3-ubyte, train-labels-idx1-ubyte,
    /// t10k-images-idx3-ubyte, t10k-labels-idx1-ubyte.
    Mnist { dir: PathBuf },
    /// Same layout as `Mnist`.
    FashionMnist { dir: PathBuf },
    /// data_batch_1..5.bin and test_batch.bin.
    Cifar10 { dir: PathBuf },
    /// Generated in-process; no files involved.
    Synthetic {
        #[serde(default)]
        spec: SyntheticSpec,
    },
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::Synthetic { spec: SyntheticSpec::default() }
    }
}

fn resolve_dir(dir: &Path) -> PathBuf {
    if dir.is_absolute() {
        return dir.to_path_buf();
    }
    match std::env::var_os("FEDZDA_DATA_DIR") {
        Some(root) => PathBuf::from(root).join(dir),
        None => dir.to_path_buf(),
    }
}

const IDX_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

impl DataSpec {
    /// The architecture matched to this data's geometry.
    pub fn arch(&self) -> ArchitectureSpec {
        match self {
            DataSpec::Mnist { .. } | DataSpec::FashionMnist { .. } => ArchitectureSpec::mnist_cnn(),
            DataSpec::Cifar10 { .. } => ArchitectureSpec::cifar_cnn(10),
            DataSpec::Synthetic { spec } => {
                ArchitectureSpec::toy_cnn(spec.channels, spec.height, spec.width, spec.classes)
            }
        }
    }

    /// Check that every referenced file exists, without reading it.
    pub fn validate(&self) -> Result<()> {
        match self {
            DataSpec::Mnist { dir } | DataSpec::FashionMnist { dir } => {
                let dir = resolve_dir(dir);
                for f in IDX_FILES {
                    let p = dir.join(f);
                    if !p.is_file() {
                        return Err(Error::config(
                            "data.dir",
                            format!("missing dataset file {}", p.display()),
                        ));
                    }
                }
                Ok(())
            }
            DataSpec::Cifar10 { dir } => {
                let dir = resolve_dir(dir);
                for f in (1..=5)
                    .map(|i| format!("data_batch_{i}.bin"))
                    .chain(std::iter::once("test_batch.bin".to_string()))
                {
                    let p = dir.join(&f);
                    if !p.is_file() {
                        return Err(Error::config(
                            "data.dir",
                            format!("missing dataset file {}", p.display()),
                        ));
                    }
                }
                Ok(())
            }
            DataSpec::Synthetic { spec } => spec.validate(),
        }
    }

    /// Load (train, held-out test).
    pub fn load(&self, seed: u64) -> Result<(Arc<Dataset>, Dataset)> {
        match self {
            DataSpec::Mnist { dir } | DataSpec::FashionMnist { dir } => {
                let dir = resolve_dir(dir);
                let train = load_idx(&dir.join(IDX_FILES[0]), &dir.join(IDX_FILES[1]))?;
                let test = load_idx(&dir.join(IDX_FILES[2]), &dir.join(IDX_FILES[3]))?;
                Ok((Arc::new(train), test))
            }
            DataSpec::Cifar10 { dir } => {
                let dir = resolve_dir(dir);
                Ok((Arc::new(load_cifar10_train(&dir)?), load_cifar10_test(&dir)?))
            }
            DataSpec::Synthetic { spec } => {
                let (train, test) = synthetic_pair(spec, seed)?;
                Ok((Arc::new(train), test))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataSpec,
    /// `clients = 0` resolves to `fed.clients`.
    pub partition: PartitionPlan,
    pub fed: FedConfig,
    /// Fraction of each client's data held out as its local test set.
    pub test_fraction: f64,
    /// Evaluate every this many rounds (the final round is always
    /// evaluated); 0 evaluates never.
    pub eval_every: usize,
    /// Centralized epochs for the reference oracle used in grading.
    pub oracle_epochs: usize,
    /// Paired runs for the privacy audit.
    pub audit_runs: usize,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSpec::default(),
            partition: PartitionPlan::Iid { clients: 0 },
            fed: FedConfig::default(),
            test_fraction: 0.2,
            eval_every: 5,
            oracle_epochs: 3,
            audit_runs: 50,
            out_dir: PathBuf::from("out"),
            seeds: vec![1],
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse("<config>", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::parse("<config>", e.to_string()))
    }

    /// Replace sentinels with concrete values and validate everything.
    /// Every run path goes through here before touching data.
    pub fn resolve(mut self) -> Result<ExperimentConfig> {
        if self.fed.aug_start_round == 0 {
            self.fed.aug_start_round = self.fed.rounds + 1;
        }
        let clients = match &mut self.partition {
            PartitionPlan::Unimodal { clients, .. }
            | PartitionPlan::Multimodal { clients, .. }
            | PartitionPlan::Iid { clients } => clients,
        };
        if *clients == 0 {
            *clients = self.fed.clients;
        } else if *clients != self.fed.clients {
            return Err(Error::config(
                "partition.clients",
                format!("partition has {} clients but fed.clients is {}", clients, self.fed.clients),
            ));
        }
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.partition.validate()?;
        self.fed.validate()?;
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::config(
                "test_fraction",
                format!("must be in [0, 1), got {}", self.test_fraction),
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        let arch = self.data.arch();
        if arch.id == ArchId::ToyCnn {
            // Synthetic geometry feeds the toy architecture directly;
            // catch impossible shapes before any training starts.
            crate::models::build(&arch, 0)?;
        }
        Ok(())
    }
}

pub fn preset_names() -> &'static [&'static str] {
    &[
        "paper-mnist-unimodal",
        "paper-fmnist-unimodal",
        "paper-cifar10-unimodal",
        "desk-unimodal",
        "desk-iid",
        "desk-multimodal",
    ]
}

/// A named, fully specified starting configuration. The `paper-*` presets
/// reproduce the published experimental scale and expect the real dataset
/// files on disk; the `desk-*` presets run in seconds on synthetic data.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    match name {
        "paper-mnist-unimodal" | "paper-fmnist-unimodal" => {
            cfg.data = if name.contains("fmnist") {
                DataSpec::FashionMnist { dir: PathBuf::from("data/fashion-mnist") }
            } else {
                DataSpec::Mnist { dir: PathBuf::from("data/mnist") }
            };
            cfg.partition = PartitionPlan::Unimodal { clients: 100, shards_per_client: 2 };
            cfg.fed = FedConfig {
                method: Method::FedAvg,
                rounds: 100,
                clients: 100,
                participation: 0.1,
                local_epochs: 5,
                batch_size: 10,
                learning_rate: 0.02,
                prox_mu: 0.01,
                weighting: Weighting::BySamples,
                seed: 1,
                aug_start_round: 1,
                zsdg: ZsdgConfig::default(),
                server_epochs: 1,
                parallel: false,
            };
            cfg.eval_every = 10;
            cfg.seeds = vec![1, 2, 3];
        }
        "paper-cifar10-unimodal" => {
            cfg.data = DataSpec::Cifar10 { dir: PathBuf::from("data/cifar-10-batches-bin") };
            cfg.partition = PartitionPlan::Unimodal { clients: 100, shards_per_client: 2 };
            cfg.fed = FedConfig {
                method: Method::FedAvg,
                rounds: 100,
                clients: 100,
                participation: 0.1,
                local_epochs: 5,
                batch_size: 10,
                learning_rate: 0.02,
                prox_mu: 0.01,
                weighting: Weighting::BySamples,
                seed: 1,
                aug_start_round: 1,
                zsdg: ZsdgConfig::default(),
                server_epochs: 1,
                parallel: false,
            };
            cfg.eval_every = 10;
            cfg.seeds = vec![1, 2, 3];
        }
        "desk-unimodal" => {
            cfg.partition = PartitionPlan::Unimodal { clients: 0, shards_per_client: 2 };
            cfg.fed.method = Method::FedZdac;
            cfg.fed.aug_start_round = 5;
        }
        "desk-iid" => {}
        "desk-multimodal" => {
            cfg.partition = PartitionPlan::Multimodal { clients: 0, weights: vec![0.6, 0.4] };
            cfg.fed.method = Method::FedZdac;
            cfg.fed.aug_start_round = 5;
        }
        other => {
            return Err(Error::config(
                "preset",
                format!("unknown preset `{other}`; available: {}", preset_names().join(", ")),
            ));
        }
    }
    Ok(cfg)
}
