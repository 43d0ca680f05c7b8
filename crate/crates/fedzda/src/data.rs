//! Datasets, binary loaders, client partitioning and local splits.
//!
//! Images are `[n, c, h, w]` tensors with values in [0, 1]. Client shards
//! hold index lists into a shared source dataset, so partitioning never
//! copies pixels; training code materializes owned batches via `gather`.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, domain};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(Error::shape("dataset", format!("images must be [n,c,h,w], got {shape:?}")));
        }
        if shape[0] != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} images but {} labels", shape[0], labels.len()),
            ));
        }
        if classes < 2 {
            return Err(Error::shape("dataset", format!("need at least 2 classes, got {classes}")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::shape("dataset", format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Dataset { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let row = self.images.numel() / self.len();
        &self.images.data()[i * row..(i + 1) * row]
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0usize; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Materialize an owned batch from source indices.
    pub fn gather(&self, indices: &[usize]) -> TrainData {
        let [c, h, w] = self.image_shape();
        let row = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * row);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        TrainData { images: Tensor::from_parts(vec![indices.len(), c, h, w], data), labels, classes: self.classes }
    }

    /// Deterministic per-class subsample: up to `per_class` items of each
    /// class, chosen by seeded shuffle. Used to build balanced external
    /// test sets and to scale real datasets down to desk size.
    pub fn subsample_per_class(&self, per_class: usize, seed: u64) -> Result<Dataset> {
        let mut keep = Vec::new();
        for class in 0..self.classes {
            let mut pool: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
            let mut rng = rng::stream(seed, domain::SYNTH_DATA, &[0x5b5b, class as u64]);
            rng::shuffle(&mut rng, &mut pool);
            pool.truncate(per_class);
            pool.sort_unstable();
            keep.extend(pool);
        }
        keep.sort_unstable();
        let batch = self.gather(&keep);
        Dataset::new(batch.images, batch.labels, self.classes)
    }
}

/// An owned (images, labels) batch. The unit local trainers consume;
/// synthetic samples are appended to these before shuffling.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl TrainData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Append another batch of identical image geometry.
    pub fn append(&mut self, other: &TrainData) -> Result<()> {
        if self.image_shape() != other.image_shape() {
            return Err(Error::shape(
                "train_data append",
                format!("{:?} vs {:?}", self.image_shape(), other.image_shape()),
            ));
        }
        let [c, h, w] = self.image_shape();
        let mut data = self.images.data().to_vec();
        data.extend_from_slice(other.images.data());
        self.labels.extend_from_slice(&other.labels);
        self.images = Tensor::from_parts(vec![self.labels.len(), c, h, w], data);
        Ok(())
    }

    /// Owned batch for a subset of rows, in the order given.
    pub fn select(&self, rows: &[usize]) -> TrainData {
        let [c, h, w] = self.image_shape();
        let row = c * h * w;
        let mut data = Vec::with_capacity(rows.len() * row);
        let mut labels = Vec::with_capacity(rows.len());
        for &i in rows {
            data.extend_from_slice(&self.images.data()[i * row..(i + 1) * row]);
            labels.push(self.labels[i]);
        }
        TrainData { images: Tensor::from_parts(vec![rows.len(), c, h, w], data), labels, classes: self.classes }
    }
}

/// One client's slice of the federation: disjoint train and local-test
/// index lists into a shared source dataset.
#[derive(Debug, Clone)]
pub struct ClientDataset {
    pub id: usize,
    source: Arc<Dataset>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

impl ClientDataset {
    pub fn new(id: usize, source: Arc<Dataset>, train: Vec<usize>, test: Vec<usize>) -> Self {
        ClientDataset { id, source, train_indices: train, test_indices: test }
    }

    pub fn source(&self) -> &Dataset {
        &self.source
    }

    pub fn source_arc(&self) -> Arc<Dataset> {
        Arc::clone(&self.source)
    }

    pub fn len(&self) -> usize {
        self.train_indices.len() + self.test_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn train_data(&self) -> TrainData {
        self.source.gather(&self.train_indices)
    }

    pub fn test_data(&self) -> TrainData {
        self.source.gather(&self.test_indices)
    }

    /// Label counts over all local items (train and test).
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0usize; self.source.classes];
        for &i in self.train_indices.iter().chain(&self.test_indices) {
            h[self.source.labels()[i]] += 1;
        }
        h
    }

    pub fn distinct_classes(&self) -> usize {
        self.class_histogram().iter().filter(|&&c| c > 0).count()
    }
}

/// How the source dataset is spread over clients.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PartitionPlan {
    /// Label-sorted contiguous shards, dealt randomly; each client gets a
    /// fixed number of shards and therefore sees only a few classes.
    Unimodal { clients: usize, shards_per_client: usize },
    /// Weighted subpopulations over disjoint class ranges; client counts
    /// follow the weights, per-client quotas are equal.
    Multimodal { clients: usize, weights: Vec<f64> },
    /// Uniform random split, sizes differing by at most one.
    Iid { clients: usize },
}

impl PartitionPlan {
    pub fn clients(&self) -> usize {
        match self {
            PartitionPlan::Unimodal { clients, .. }
            | PartitionPlan::Multimodal { clients, .. }
            | PartitionPlan::Iid { clients } => *clients,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients() == 0 {
            return Err(Error::config("partition.clients", "must be at least 1"));
        }
        match self {
            PartitionPlan::Unimodal { shards_per_client, .. } => {
                if *shards_per_client == 0 {
                    return Err(Error::config("partition.shards_per_client", "must be at least 1"));
                }
            }
            PartitionPlan::Multimodal { weights, .. } => {
                if weights.is_empty() {
                    return Err(Error::config("partition.weights", "must not be empty"));
                }
                if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
                    return Err(Error::config("partition.weights", "must be nonnegative and finite"));
                }
                let sum: f64 = weights.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::config("partition.weights", format!("must sum to 1, got {sum}")));
                }
            }
            PartitionPlan::Iid { .. } => {}
        }
        Ok(())
    }
}

pub struct PartitionOutcome {
    pub clients: Vec<ClientDataset>,
    pub warnings: Vec<String>,
}

pub fn partition(source: Arc<Dataset>, plan: &PartitionPlan, seed: u64) -> Result<PartitionOutcome> {
    plan.validate()?;
    match plan {
        PartitionPlan::Unimodal { clients, shards_per_client } => {
            partition_unimodal(source, *clients, *shards_per_client, seed)
        }
        PartitionPlan::Multimodal { clients, weights } => {
            partition_multimodal(source, *clients, weights, seed)
        }
        PartitionPlan::Iid { clients } => partition_iid(source, *clients, seed),
    }
}

/// Sort by label, cut into `clients * shards_per_client` contiguous shards
/// (remainder items join the last shard), deal shards to clients at random.
pub fn partition_unimodal(
    source: Arc<Dataset>,
    clients: usize,
    shards_per_client: usize,
    seed: u64,
) -> Result<PartitionOutcome> {
    let n = source.len();
    let shards = clients * shards_per_client;
    if shards > n {
        return Err(Error::Usage(format!("cannot cut {n} items into {shards} shards")));
    }

    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps original order within a label, so the layout is a
    // pure function of the labels.
    order.sort_by_key(|&i| source.labels()[i]);

    let base = n / shards;
    let mut shard_slices: Vec<&[usize]> = (0..shards)
        .map(|k| {
            let lo = k * base;
            let hi = if k + 1 == shards { n } else { (k + 1) * base };
            &order[lo..hi]
        })
        .collect();

    let mut rng = rng::stream(seed, domain::PARTITION, &[0]);
    rng::shuffle(&mut rng, &mut shard_slices);

    let clients_out = (0..clients)
        .map(|id| {
            let mut train = Vec::with_capacity(shards_per_client * base + 1);
            for s in &shard_slices[id * shards_per_client..(id + 1) * shards_per_client] {
                train.extend_from_slice(s);
            }
            ClientDataset::new(id, Arc::clone(&source), train, Vec::new())
        })
        .collect();

    Ok(PartitionOutcome { clients: clients_out, warnings: Vec::new() })
}

/// Largest-remainder apportionment of `total` into parts proportional to
/// `weights`. Ties go to the lower index.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let mut counts: Vec<usize> = weights.iter().map(|w| (w * total as f64).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = weights[a] * total as f64 - counts[a] as f64;
        let rb = weights[b] * total as f64 - counts[b] as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for i in 0..total.saturating_sub(assigned) {
        counts[order[i % order.len()]] += 1;
    }
    counts
}

/// Weighted subpopulations over disjoint, contiguous class ranges. Client
/// counts per subpopulation follow the weights (largest remainder); every
/// client draws the same per-client quota from its subpopulation's pool,
/// so the aggregate label mass follows the weights. Subsamples the source:
/// leftover items in each pool stay unassigned.
pub fn partition_multimodal(
    source: Arc<Dataset>,
    clients: usize,
    weights: &[f64],
    seed: u64,
) -> Result<PartitionOutcome> {
    let groups = weights.len();
    if groups > source.classes {
        return Err(Error::config(
            "partition.weights",
            format!("{groups} subpopulations but only {} classes", source.classes),
        ));
    }

    let counts = apportion(clients, weights);
    let mut warnings = Vec::new();

    // Contiguous class ranges, as even as possible.
    let class_range = |g: usize| -> (usize, usize) {
        let k = source.classes;
        (g * k / groups, (g + 1) * k / groups)
    };

    let mut pools: Vec<Vec<usize>> = Vec::with_capacity(groups);
    for g in 0..groups {
        let (lo, hi) = class_range(g);
        let mut pool: Vec<usize> =
            (0..source.len()).filter(|&i| (lo..hi).contains(&source.labels()[i])).collect();
        let mut rng = rng::stream(seed, domain::PARTITION, &[1, g as u64]);
        rng::shuffle(&mut rng, &mut pool);
        pools.push(pool);
        if counts[g] == 0 {
            warnings.push(format!(
                "subpopulation {g} (classes {lo}..{hi}) received no clients; its items are unused"
            ));
        }
    }

    let quota = (0..groups)
        .filter(|&g| counts[g] > 0)
        .map(|g| pools[g].len() / counts[g])
        .min()
        .unwrap_or(0);
    if quota == 0 {
        return Err(Error::Usage(
            "multimodal partition: some subpopulation has fewer items than clients".into(),
        ));
    }

    let mut clients_out = Vec::with_capacity(clients);
    let mut id = 0;
    for g in 0..groups {
        for slot in 0..counts[g] {
            let train = pools[g][slot * quota..(slot + 1) * quota].to_vec();
            clients_out.push(ClientDataset::new(id, Arc::clone(&source), train, Vec::new()));
            id += 1;
        }
    }

    Ok(PartitionOutcome { clients: clients_out, warnings })
}

/// Uniform shuffle dealt into near-equal chunks (sizes differ by <= 1).
pub fn partition_iid(source: Arc<Dataset>, clients: usize, seed: u64) -> Result<PartitionOutcome> {
    let n = source.len();
    if clients > n {
        return Err(Error::Usage(format!("cannot split {n} items across {clients} clients")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng::stream(seed, domain::PARTITION, &[2]);
    rng::shuffle(&mut rng, &mut order);

    let base = n / clients;
    let rem = n % clients;
    let mut clients_out = Vec::with_capacity(clients);
    let mut offset = 0;
    for id in 0..clients {
        let take = base + usize::from(id < rem);
        clients_out.push(ClientDataset::new(
            id,
            Arc::clone(&source),
            order[offset..offset + take].to_vec(),
            Vec::new(),
        ));
        offset += take;
    }
    Ok(PartitionOutcome { clients: clients_out, warnings: Vec::new() })
}

/// Carve a local test set out of a client's data, stratified by class.
/// The test size is `round(fraction * n)`, forced to at least 1 when the
/// client holds 2+ items and the fraction is positive. Clients with fewer
/// than 2 items keep everything in train.
pub fn local_split(cd: &ClientDataset, test_fraction: f64) -> Result<ClientDataset> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::config("split.test_fraction", format!("must be in [0, 1), got {test_fraction}")));
    }
    let mut all: Vec<usize> = cd.train_indices.iter().chain(&cd.test_indices).copied().collect();
    all.sort_unstable();
    let n = all.len();
    if n < 2 || test_fraction == 0.0 {
        return Ok(ClientDataset::new(cd.id, cd.source_arc(), all, Vec::new()));
    }

    let target = ((test_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let labels = cd.source().labels();
    let classes = cd.source().classes;

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for &i in &all {
        by_class[labels[i]].push(i);
    }

    // Per-class share by largest remainder, capped by class size.
    let mut take: Vec<usize> =
        by_class.iter().map(|c| (test_fraction * c.len() as f64).floor() as usize).collect();
    let mut remaining = target.saturating_sub(take.iter().sum());
    let mut order: Vec<usize> = (0..classes).filter(|&c| !by_class[c].is_empty()).collect();
    order.sort_by(|&a, &b| {
        let ra = test_fraction * by_class[a].len() as f64 - take[a] as f64;
        let rb = test_fraction * by_class[b].len() as f64 - take[b] as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    while remaining > 0 {
        let mut progressed = false;
        for &c in &order {
            if remaining == 0 {
                break;
            }
            if take[c] < by_class[c].len() {
                take[c] += 1;
                remaining -= 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    // Rounding may overshoot the target by the sum of floors; trim from the
    // largest classes to keep the total exact.
    let mut excess = take.iter().sum::<usize>().saturating_sub(target);
    while excess > 0 {
        let mut trimmed = false;
        for &c in order.iter().rev() {
            if excess == 0 {
                break;
            }
            if take[c] > 0 {
                take[c] -= 1;
                excess -= 1;
                trimmed = true;
            }
        }
        if !trimmed {
            break;
        }
    }

    let mut train = Vec::with_capacity(n - target);
    let mut test = Vec::with_capacity(target);
    for (c, mut members) in by_class.into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let mut rng = rng::stream(0x5eed_0001, domain::LOCAL_SPLIT, &[cd.id as u64, c as u64]);
        rng::shuffle(&mut rng, &mut members);
        let (t, rest) = members.split_at(take[c]);
        test.extend_from_slice(t);
        train.extend_from_slice(rest);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(ClientDataset::new(cd.id, cd.source_arc(), train, test))
}

// ---------------------------------------------------------------------------
// Binary loaders.

fn be_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]])
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Load an IDX image/label file pair (the MNIST and Fashion-MNIST layout):
/// big-endian magic + dims header followed by raw unsigned bytes. Pixels
/// are scaled to [0, 1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lbl_bytes = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;

    if img_bytes.len() < 16 {
        return Err(Error::parse(images_path, format!("header needs 16 bytes, file has {}", img_bytes.len())));
    }
    let magic = be_u32(&img_bytes, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::parse(
            images_path,
            format!("magic {magic:#010x}, expected image magic {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let n = be_u32(&img_bytes, 4) as usize;
    let h = be_u32(&img_bytes, 8) as usize;
    let w = be_u32(&img_bytes, 12) as usize;
    let expected = 16 + n * h * w;
    if img_bytes.len() != expected {
        return Err(Error::parse(
            images_path,
            format!("{n} images of {h}x{w} need {expected} bytes, file has {}", img_bytes.len()),
        ));
    }

    if lbl_bytes.len() < 8 {
        return Err(Error::parse(labels_path, format!("header needs 8 bytes, file has {}", lbl_bytes.len())));
    }
    let lmagic = be_u32(&lbl_bytes, 0);
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::parse(
            labels_path,
            format!("magic {lmagic:#010x}, expected label magic {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let ln = be_u32(&lbl_bytes, 4) as usize;
    if ln != n {
        return Err(Error::parse(labels_path, format!("{ln} labels for {n} images")));
    }
    if lbl_bytes.len() != 8 + ln {
        return Err(Error::parse(
            labels_path,
            format!("{ln} labels need {} bytes, file has {}", 8 + ln, lbl_bytes.len()),
        ));
    }

    let pixels: Vec<f64> = img_bytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = lbl_bytes[8..].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().copied().max().unwrap_or(1).max(1) + 1;
    Dataset::new(Tensor::new(vec![n, 1, h, w], pixels)?, labels, classes.max(2))
}

const CIFAR_RECORD: usize = 3073; // 1 label byte + 3 * 1024 pixels
const CIFAR_SIDE: usize = 32;

fn parse_cifar_file(path: &Path, pixels: &mut Vec<f64>, labels: &mut Vec<usize>) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % CIFAR_RECORD != 0 {
        let complete = bytes.len() / CIFAR_RECORD;
        return Err(Error::parse(
            path,
            format!("truncated record at byte offset {}", complete * CIFAR_RECORD),
        ));
    }
    for (rec, chunk) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = chunk[0] as usize;
        if label > 9 {
            return Err(Error::parse(path, format!("invalid label {label} in record {rec}")));
        }
        labels.push(label);
        pixels.extend(chunk[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(())
}

/// Load the five CIFAR-10 training batches from a directory.
pub fn load_cifar10_train(dir: &Path) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for i in 1..=5 {
        parse_cifar_file(&dir.join(format!("data_batch_{i}.bin")), &mut pixels, &mut labels)?;
    }
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, 3, CIFAR_SIDE, CIFAR_SIDE], pixels)?, labels, 10)
}

pub fn load_cifar10_test(dir: &Path) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    parse_cifar_file(&dir.join("test_batch.bin"), &mut pixels, &mut labels)?;
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, 3, CIFAR_SIDE, CIFAR_SIDE], pixels)?, labels, 10)
}

// ---------------------------------------------------------------------------
// Synthetic template dataset.

/// Parameters of the synthetic image generator used for fast deterministic
/// experiments. Each class has a smooth template; samples are the template
/// plus pixel noise, clamped to [0, 1]. `class_sep` interpolates between a
/// shared background (0: classes indistinguishable) and fully independent
/// templates (1).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub class_sep: f64,
    pub noise_std: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 10,
            train_per_class: 200,
            test_per_class: 40,
            channels: 1,
            height: 28,
            width: 28,
            class_sep: 0.75,
            noise_std: 0.12,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("synthetic.classes", "need at least 2"));
        }
        if self.train_per_class == 0 {
            return Err(Error::config("synthetic.train_per_class", "must be positive"));
        }
        if self.height < 2 || self.width < 2 || self.channels == 0 {
            return Err(Error::config("synthetic", "image dims must be at least 2x2 with 1+ channels"));
        }
        if !(0.0..=1.0).contains(&self.class_sep) {
            return Err(Error::config("synthetic.class_sep", "must be in [0, 1]"));
        }
        if self.noise_std < 0.0 {
            return Err(Error::config("synthetic.noise_std", "must be nonnegative"));
        }
        Ok(())
    }
}

/// Bilinear upsample of a coarse grid to (h, w).
fn upsample(grid: &[f64], gh: usize, gw: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let fy = ((y as f64 + 0.5) * gh as f64 / h as f64 - 0.5).clamp(0.0, (gh - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(gh - 1);
        let ty = fy - y0 as f64;
        for x in 0..w {
            let fx = ((x as f64 + 0.5) * gw as f64 / w as f64 - 0.5).clamp(0.0, (gw - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(gw - 1);
            let tx = fx - x0 as f64;
            let top = grid[y0 * gw + x0] * (1.0 - tx) + grid[y0 * gw + x1] * tx;
            let bot = grid[y1 * gw + x0] * (1.0 - tx) + grid[y1 * gw + x1] * tx;
            out[y * w + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

fn class_templates(spec: &SyntheticSpec, seed: u64) -> Vec<Vec<f64>> {
    let (gh, gw) = ((spec.height / 4).max(2), (spec.width / 4).max(2));
    let plane = spec.height * spec.width;

    let mut shared_rng = rng::stream(seed, domain::SYNTH_DATA, &[1]);
    let shared_grid: Vec<f64> =
        (0..spec.channels * gh * gw).map(|_| rng::uniform(&mut shared_rng)).collect();

    (0..spec.classes)
        .map(|class| {
            let mut rng = rng::stream(seed, domain::SYNTH_DATA, &[0, class as u64]);
            let grid: Vec<f64> = (0..spec.channels * gh * gw).map(|_| rng::uniform(&mut rng)).collect();
            let mut tmpl = Vec::with_capacity(spec.channels * plane);
            for ch in 0..spec.channels {
                let own = upsample(&grid[ch * gh * gw..][..gh * gw], gh, gw, spec.height, spec.width);
                let shared =
                    upsample(&shared_grid[ch * gh * gw..][..gh * gw], gh, gw, spec.height, spec.width);
                for (o, s) in own.iter().zip(&shared) {
                    tmpl.push(spec.class_sep * o + (1.0 - spec.class_sep) * s);
                }
            }
            // Rescale into [0.15, 0.85] so noise rarely clips.
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &v in &tmpl {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            let span = (hi - lo).max(1e-9);
            tmpl.iter().map(|&v| 0.15 + 0.7 * (v - lo) / span).collect()
        })
        .collect()
}

fn sample_split(spec: &SyntheticSpec, templates: &[Vec<f64>], seed: u64, per_class: usize, tag: u64) -> Result<Dataset> {
    let plane = spec.channels * spec.height * spec.width;
    let n = spec.classes * per_class;
    let mut pixels = Vec::with_capacity(n * plane);
    let mut labels = Vec::with_capacity(n);
    for class in 0..spec.classes {
        let mut rng = rng::stream(seed, domain::SYNTH_DATA, &[tag, class as u64]);
        for _ in 0..per_class {
            for &t in &templates[class] {
                pixels.push((t + spec.noise_std * rng::normal(&mut rng)).clamp(0.0, 1.0));
            }
            labels.push(class);
        }
    }
    Dataset::new(
        Tensor::new(vec![n, spec.channels, spec.height, spec.width], pixels)?,
        labels,
        spec.classes,
    )
}

/// Generate a deterministic (train, test) dataset pair.
pub fn synthetic_pair(spec: &SyntheticSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let templates = class_templates(spec, seed);
    let train = sample_split(spec, &templates, seed, spec.train_per_class, 2)?;
    let test = sample_split(spec, &templates, seed, spec.test_per_class.max(1), 3)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset(n: usize, classes: usize) -> Arc<Dataset> {
        // 2x2 single-channel images; pixel value encodes the index.
        let pixels: Vec<f64> = (0..n * 4).map(|i| (i % 251) as f64 / 251.0).collect();
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        Arc::new(Dataset::new(Tensor::new(vec![n, 1, 2, 2], pixels).unwrap(), labels, classes).unwrap())
    }

    #[test]
    fn gather_preserves_rows_and_labels() {
        let ds = tiny_dataset(10, 5);
        let batch = ds.gather(&[3, 7, 0]);
        assert_eq!(batch.labels, vec![3, 2, 0]);
        assert_eq!(batch.images.shape(), &[3, 1, 2, 2]);
        assert_eq!(&batch.images.data()[0..4], ds.image(3));
    }

    #[test]
    fn unimodal_shard_arithmetic_and_class_locality() {
        // 50000 items, 100 clients, 2 shards each: shard size 250, client
        // size 500, and with balanced classes every shard is label-pure,
        // so each client sees at most 2 distinct classes.
        let ds = tiny_dataset(50_000, 10);
        let out = partition_unimodal(Arc::clone(&ds), 100, 2, 7).unwrap();
        assert_eq!(out.clients.len(), 100);
        let mut seen = vec![false; 50_000];
        for c in &out.clients {
            assert_eq!(c.len(), 500);
            assert!(c.distinct_classes() <= 2, "client {} spans {} classes", c.id, c.distinct_classes());
            for &i in &c.train_indices {
                assert!(!seen[i], "index {i} assigned twice");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s), "every item must be assigned");
    }

    #[test]
    fn unimodal_remainder_goes_to_last_shard() {
        // 103 items into 10 shards: 9 shards of 10, last shard 13.
        let ds = tiny_dataset(103, 2);
        let out = partition_unimodal(ds, 5, 2, 1).unwrap();
        let total: usize = out.clients.iter().map(|c| c.len()).sum();
        assert_eq!(total, 103);
        let mut sizes: Vec<usize> = out.clients.iter().map(|c| c.len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes[4], 23, "one client holds the 13-item shard: {sizes:?}");
    }

    #[test]
    fn iid_sizes_differ_by_at_most_one() {
        let ds = tiny_dataset(103, 5);
        let out = partition_iid(ds, 10, 3).unwrap();
        let sizes: Vec<usize> = out.clients.iter().map(|c| c.len()).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 103);
        let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        assert!(hi - lo <= 1, "{sizes:?}");
    }

    #[test]
    fn apportion_largest_remainder_oracle() {
        // Independent check: 20 * (0.52, 0.31, 0.17) = (10.4, 6.2, 3.4);
        // floors (10, 6, 3) leave one seat, tie 0.4 vs 0.4 -> lower index.
        assert_eq!(apportion(20, &[0.52, 0.31, 0.17]), vec![11, 6, 3]);
        assert_eq!(apportion(10, &[0.8, 0.2]), vec![8, 2]);
        assert_eq!(apportion(3, &[0.5, 0.5]), vec![2, 1]);
    }

    #[test]
    fn multimodal_weights_drive_aggregate_mass() {
        let ds = tiny_dataset(10_000, 10);
        let out = partition_multimodal(Arc::clone(&ds), 10, &[0.8, 0.2], 11).unwrap();
        assert!(out.warnings.is_empty());
        assert_eq!(out.clients.len(), 10);

        // Disjointness.
        let mut seen = vec![false; 10_000];
        for c in &out.clients {
            for &i in &c.train_indices {
                assert!(!seen[i]);
                seen[i] = true;
            }
        }

        // 8 clients on classes 0..5, 2 clients on classes 5..10, equal
        // quotas: mass ratio must be exactly 8:2.
        let mass_low: usize = out.clients[..8].iter().map(|c| c.len()).sum();
        let mass_high: usize = out.clients[8..].iter().map(|c| c.len()).sum();
        assert_eq!(mass_low * 2, mass_high * 8);
        for c in &out.clients[..8] {
            let h = c.class_histogram();
            assert!(h[5..].iter().all(|&v| v == 0), "low-group client saw high classes: {h:?}");
        }
    }

    #[test]
    fn multimodal_uniform_weights_near_uniform_histogram() {
        let ds = tiny_dataset(5_000, 10);
        let out = partition_multimodal(Arc::clone(&ds), 10, &[0.2; 5], 5).unwrap();
        let mut hist = vec![0usize; 10];
        for c in &out.clients {
            for (k, v) in c.class_histogram().into_iter().enumerate() {
                hist[k] += v;
            }
        }
        let total: usize = hist.iter().sum();
        let expected = total as f64 / 10.0;
        for (k, &v) in hist.iter().enumerate() {
            let dev = (v as f64 - expected).abs();
            assert!(dev < 4.0 * expected.sqrt(), "class {k}: {v} vs {expected} (hist {hist:?})");
        }
    }

    #[test]
    fn multimodal_zero_weight_subpopulation_warns() {
        let ds = tiny_dataset(1_000, 10);
        let out = partition_multimodal(ds, 10, &[0.9, 0.1, 0.0], 2).unwrap();
        assert_eq!(out.warnings.len(), 1);
        assert!(out.warnings[0].contains("no clients"), "{}", out.warnings[0]);
    }

    #[test]
    fn multimodal_rejects_bad_weights() {
        let plan = PartitionPlan::Multimodal { clients: 4, weights: vec![0.7, 0.7] };
        let err = plan.validate().unwrap_err();
        assert!(err.to_string().contains("partition.weights"), "{err}");
        let plan = PartitionPlan::Multimodal { clients: 4, weights: vec![1.2, -0.2] };
        assert!(plan.validate().is_err());
    }

    #[test]
    fn local_split_is_stratified_and_disjoint() {
        let ds = tiny_dataset(100, 4);
        let cd = ClientDataset::new(0, Arc::clone(&ds), (0..100).collect(), Vec::new());
        let split = local_split(&cd, 0.2).unwrap();
        assert_eq!(split.test_indices.len(), 20);
        assert_eq!(split.train_indices.len(), 80);

        let train: std::collections::HashSet<_> = split.train_indices.iter().collect();
        assert!(split.test_indices.iter().all(|i| !train.contains(i)));

        // 25 per class, so exactly 5 test items per class.
        let mut per_class = vec![0usize; 4];
        for &i in &split.test_indices {
            per_class[ds.labels()[i]] += 1;
        }
        assert_eq!(per_class, vec![5, 5, 5, 5]);
    }

    #[test]
    fn local_split_deterministic_and_handles_tiny_clients() {
        let ds = tiny_dataset(10, 2);
        let cd = ClientDataset::new(3, Arc::clone(&ds), vec![0, 1, 2, 3, 4], Vec::new());
        let a = local_split(&cd, 0.2).unwrap();
        let b = local_split(&cd, 0.2).unwrap();
        assert_eq!(a.train_indices, b.train_indices);
        assert_eq!(a.test_indices, b.test_indices);
        assert_eq!(a.test_indices.len(), 1);

        let single = ClientDataset::new(4, Arc::clone(&ds), vec![7], Vec::new());
        let s = local_split(&single, 0.2).unwrap();
        assert!(s.test_indices.is_empty());
        assert_eq!(s.train_indices, vec![7]);

        // Two items: test still forced nonempty.
        let pair = ClientDataset::new(5, ds, vec![7, 8], Vec::new());
        let p = local_split(&pair, 0.2).unwrap();
        assert_eq!(p.test_indices.len(), 1);
        assert_eq!(p.train_indices.len(), 1);
    }

    // -- IDX fixtures -------------------------------------------------------

    fn idx_image_bytes(n: usize, h: usize, w: usize, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        b.extend_from_slice(&(n as u32).to_be_bytes());
        b.extend_from_slice(&(h as u32).to_be_bytes());
        b.extend_from_slice(&(w as u32).to_be_bytes());
        b.extend_from_slice(pixels);
        b
    }

    fn idx_label_bytes(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    fn write_temp(dir: &std::path::Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn idx_roundtrip_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = vec![0, 255, 128, 64, 10, 20, 30, 40];
        let img = write_temp(dir.path(), "img", &idx_image_bytes(2, 2, 2, &pixels));
        let lbl = write_temp(dir.path(), "lbl", &idx_label_bytes(&[3, 9]));
        let ds = load_idx(&img, &lbl).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.classes, 10);
        assert_eq!(ds.labels(), &[3, 9]);
        assert!((ds.image(0)[1] - 1.0).abs() < 1e-12);
        assert!((ds.image(0)[2] - 128.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn idx_rejects_swapped_magics() {
        let dir = tempfile::tempdir().unwrap();
        // Labels file carrying the image magic: the classic swapped-path mistake.
        let img = write_temp(dir.path(), "img", &idx_image_bytes(1, 2, 2, &[1, 2, 3, 4]));
        let mut bad = idx_label_bytes(&[1]);
        bad[..4].copy_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        let lbl = write_temp(dir.path(), "lbl", &bad);
        let err = load_idx(&img, &lbl).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("0x00000801"), "should name expected magic: {msg}");
        assert!(msg.contains("0x00000803"), "should name actual magic: {msg}");
    }

    #[test]
    fn idx_rejects_truncation_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let mut img_bytes = idx_image_bytes(2, 2, 2, &[0; 8]);
        img_bytes.truncate(img_bytes.len() - 3);
        let img = write_temp(dir.path(), "img", &img_bytes);
        let lbl = write_temp(dir.path(), "lbl", &idx_label_bytes(&[0, 1]));
        assert!(load_idx(&img, &lbl).is_err());

        let img = write_temp(dir.path(), "img2", &idx_image_bytes(2, 2, 2, &[0; 8]));
        let lbl = write_temp(dir.path(), "lbl2", &idx_label_bytes(&[0, 1, 2]));
        let err = load_idx(&img, &lbl).unwrap_err();
        assert!(err.to_string().contains("3 labels for 2 images"), "{err}");
    }

    #[test]
    fn cifar_roundtrip_and_truncation_offset() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = vec![0u8; CIFAR_RECORD * 2];
        rec[0] = 7; // label of record 0
        rec[1] = 255; // first red pixel
        rec[CIFAR_RECORD] = 2; // label of record 1
        write_temp(dir.path(), "test_batch.bin", &rec);
        let ds = load_cifar10_test(dir.path()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels(), &[7, 2]);
        assert!((ds.image(0)[0] - 1.0).abs() < 1e-12);
        assert_eq!(ds.image_shape(), [3, 32, 32]);

        let mut truncated = rec.clone();
        truncated.truncate(CIFAR_RECORD + 100);
        write_temp(dir.path(), "test_batch.bin", &truncated);
        let err = load_cifar10_test(dir.path()).unwrap_err();
        assert!(err.to_string().contains(&format!("byte offset {CIFAR_RECORD}")), "{err}");
    }

    #[test]
    fn cifar_rejects_invalid_label() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = vec![0u8; CIFAR_RECORD];
        rec[0] = 11;
        write_temp(dir.path(), "test_batch.bin", &rec);
        let err = load_cifar10_test(dir.path()).unwrap_err();
        assert!(err.to_string().contains("invalid label 11 in record 0"), "{err}");
    }

    // -- Synthetic ----------------------------------------------------------

    #[test]
    fn synthetic_shapes_range_and_determinism() {
        let spec = SyntheticSpec {
            classes: 4,
            train_per_class: 10,
            test_per_class: 5,
            height: 12,
            width: 12,
            ..Default::default()
        };
        let (train, test) = synthetic_pair(&spec, 42).unwrap();
        assert_eq!(train.len(), 40);
        assert_eq!(test.len(), 20);
        assert_eq!(train.image_shape(), [1, 12, 12]);
        assert!(train.images().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(train.histogram(), vec![10; 4]);

        let (train2, _) = synthetic_pair(&spec, 42).unwrap();
        assert_eq!(train.images().data(), train2.images().data());
        let (train3, _) = synthetic_pair(&spec, 43).unwrap();
        assert_ne!(train.images().data(), train3.images().data());
    }

    #[test]
    fn synthetic_classes_are_separated() {
        let spec = SyntheticSpec { classes: 3, train_per_class: 20, ..Default::default() };
        let (train, _) = synthetic_pair(&spec, 7).unwrap();
        let plane = 28 * 28;
        // Mean image per class.
        let mut means = vec![vec![0.0; plane]; 3];
        for i in 0..train.len() {
            let c = train.labels()[i];
            for (m, &v) in means[c].iter_mut().zip(train.image(i)) {
                *m += v / 20.0;
            }
        }
        let dist = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        };
        // Class means must be farther apart than sampling noise.
        let noise = spec.noise_std / (20.0f64).sqrt() * (plane as f64).sqrt();
        for a in 0..3 {
            for b in a + 1..3 {
                assert!(
                    dist(&means[a], &means[b]) > 4.0 * noise,
                    "classes {a},{b} too close: {} vs noise {noise}",
                    dist(&means[a], &means[b])
                );
            }
        }
    }

    #[test]
    fn subsample_per_class_is_balanced() {
        let ds = tiny_dataset(1000, 10);
        let sub = ds.subsample_per_class(7, 3).unwrap();
        assert_eq!(sub.len(), 70);
        assert_eq!(sub.histogram(), vec![7; 10]);
    }
}
