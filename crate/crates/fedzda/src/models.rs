//! Model architectures: small batch-norm CNNs over a shared layer set.
//!
//! Parameters live in plain tensors; each forward pass registers them on a
//! fresh tape. `forward_train` normalizes with batch statistics and folds
//! the momentum update into the running statistics; `forward_frozen` never
//! mutates the model and is the only path the input-synthesis code uses.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::Fnv;
use crate::rng::{self, domain};
use crate::tensor::{batchnorm, BnForward, BnMode, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchId {
    /// conv5x5(16) -> BN -> ReLU -> pool -> conv5x5(32) -> BN -> ReLU -> pool -> dense.
    MnistCnn,
    /// conv3x3(16) -> BN -> ReLU -> pool, twice, then dense 80 -> 60 -> classes.
    CifarCnn,
    /// Single conv block + dense head; meant for fast deterministic tests.
    ToyCnn,
}

impl std::fmt::Display for ArchId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ArchId::MnistCnn => "mnist_cnn",
            ArchId::CifarCnn => "cifar_cnn",
            ArchId::ToyCnn => "toy_cnn",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for ArchId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist_cnn" => Ok(ArchId::MnistCnn),
            "cifar_cnn" => Ok(ArchId::CifarCnn),
            "toy_cnn" => Ok(ArchId::ToyCnn),
            other => Err(Error::config("arch", format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub id: ArchId,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Weight of the batch statistics in the running-stat update.
    pub bn_momentum: f64,
}

impl ArchitectureSpec {
    pub fn mnist_cnn() -> Self {
        ArchitectureSpec { id: ArchId::MnistCnn, in_channels: 1, height: 28, width: 28, classes: 10, bn_momentum: 0.1 }
    }

    pub fn cifar_cnn(classes: usize) -> Self {
        ArchitectureSpec { id: ArchId::CifarCnn, in_channels: 3, height: 32, width: 32, classes, bn_momentum: 0.1 }
    }

    pub fn toy_cnn(in_channels: usize, height: usize, width: usize, classes: usize) -> Self {
        ArchitectureSpec { id: ArchId::ToyCnn, in_channels, height, width, classes, bn_momentum: 0.1 }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_channels, self.height, self.width]
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("arch.classes", "need at least 2 classes"));
        }
        if self.height % 2 != 0 || self.width % 2 != 0 {
            return Err(Error::config("arch", "input height and width must be even (2x2 pooling)"));
        }
        match self.id {
            ArchId::MnistCnn => {
                if self.input_shape() != [1, 28, 28] {
                    return Err(Error::config("arch", "mnist_cnn expects 1x28x28 input"));
                }
            }
            ArchId::CifarCnn => {
                if self.input_shape() != [3, 32, 32] {
                    return Err(Error::config("arch", "cifar_cnn expects 3x32x32 input"));
                }
            }
            ArchId::ToyCnn => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv { weight: Tensor, bias: Tensor, stride: usize, pad: usize },
    BatchNorm { gamma: Tensor, beta: Tensor, running_mean: Tensor, running_var: Tensor },
    Relu,
    MaxPool2,
    Flatten,
    Dense { weight: Tensor, bias: Tensor },
}

/// Outputs of one forward pass. Batch-norm statistic nodes stay live on
/// the tape so losses can attach to them; `param_vars` aligns with the
/// model's canonical parameter order when gradients were requested.
#[derive(Debug)]
pub struct Trace {
    pub logits: Var,
    /// Per batch-norm layer, in network order: (batch mean, batch variance).
    pub bn_stats: Vec<(Var, Var)>,
    pub param_vars: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ArchitectureSpec,
    layers: Vec<Layer>,
    /// Seed the initial parameters were drawn from; provenance only.
    seed: u64,
}

fn uniform_tensor(rng: &mut impl rand_core::RngCore, shape: Vec<usize>, limit: f64) -> Tensor {
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng::uniform_in(rng, -limit, limit)).collect();
    Tensor::from_parts(shape, data)
}

/// Deterministically initialize a model. Weights and biases draw from a
/// uniform distribution scaled by 1/sqrt(fan_in); batch-norm starts at the
/// identity transform with running stats (0, 1).
pub fn build(spec: &ArchitectureSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut rng = rng::stream(seed, domain::MODEL_INIT, &[]);
    let mut layers = Vec::new();

    let conv = |rng: &mut rand_chacha::ChaCha12Rng, c_in: usize, c_out: usize, k: usize, pad: usize| {
        let limit = 1.0 / ((c_in * k * k) as f64).sqrt();
        Layer::Conv {
            weight: uniform_tensor(rng, vec![c_out, c_in, k, k], limit),
            bias: uniform_tensor(rng, vec![c_out], limit),
            stride: 1,
            pad,
        }
    };
    let bn = |c: usize| Layer::BatchNorm {
        gamma: Tensor::from_parts(vec![c], vec![1.0; c]),
        beta: Tensor::zeros(vec![c]),
        running_mean: Tensor::zeros(vec![c]),
        running_var: Tensor::from_parts(vec![c], vec![1.0; c]),
    };
    let dense = |rng: &mut rand_chacha::ChaCha12Rng, din: usize, dout: usize| {
        let limit = 1.0 / (din as f64).sqrt();
        Layer::Dense {
            weight: uniform_tensor(rng, vec![din, dout], limit),
            bias: uniform_tensor(rng, vec![dout], limit),
        }
    };

    let (h, w, classes) = (spec.height, spec.width, spec.classes);
    match spec.id {
        ArchId::MnistCnn => {
            layers.push(conv(&mut rng, 1, 16, 5, 2));
            layers.push(bn(16));
            layers.push(Layer::Relu);
            layers.push(Layer::MaxPool2);
            layers.push(conv(&mut rng, 16, 32, 5, 2));
            layers.push(bn(32));
            layers.push(Layer::Relu);
            layers.push(Layer::MaxPool2);
            layers.push(Layer::Flatten);
            layers.push(dense(&mut rng, 32 * (h / 4) * (w / 4), classes));
        }
        ArchId::CifarCnn => {
            layers.push(conv(&mut rng, 3, 16, 3, 1));
            layers.push(bn(16));
            layers.push(Layer::Relu);
            layers.push(Layer::MaxPool2);
            layers.push(conv(&mut rng, 16, 16, 3, 1));
            layers.push(bn(16));
            layers.push(Layer::Relu);
            layers.push(Layer::MaxPool2);
            layers.push(Layer::Flatten);
            layers.push(dense(&mut rng, 16 * (h / 4) * (w / 4), 80));
            layers.push(Layer::Relu);
            layers.push(dense(&mut rng, 80, 60));
            layers.push(Layer::Relu);
            layers.push(dense(&mut rng, 60, classes));
        }
        ArchId::ToyCnn => {
            layers.push(conv(&mut rng, spec.in_channels, 4, 3, 1));
            layers.push(bn(4));
            layers.push(Layer::Relu);
            layers.push(Layer::MaxPool2);
            layers.push(Layer::Flatten);
            layers.push(dense(&mut rng, 4 * (h / 2) * (w / 2), classes));
        }
    }

    Ok(Model { spec: *spec, layers, seed })
}

enum ParamPolicy {
    Trainable,
    Frozen,
}

impl Model {
    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let shape = tape.shape(x);
        let want = self.spec.input_shape();
        if shape.len() != 4 || shape[1..] != want {
            return Err(Error::shape(
                "model forward",
                format!("input {shape:?}, expected [n, {}, {}, {}]", want[0], want[1], want[2]),
            ));
        }
        Ok(())
    }

    fn forward_impl(
        &self,
        tape: &mut Tape,
        x: Var,
        mode: BnMode,
        policy: ParamPolicy,
    ) -> Result<(Trace, Vec<(usize, Tensor, Tensor)>)> {
        self.check_input(tape, x)?;
        let register = |tape: &mut Tape, t: &Tensor| -> Var {
            match policy {
                ParamPolicy::Trainable => tape.leaf(&t.clone().with_grad()),
                ParamPolicy::Frozen => tape.constant(t),
            }
        };

        let mut cur = x;
        let mut bn_stats = Vec::new();
        let mut param_vars = Vec::new();
        let mut pending = Vec::new();

        for (li, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv { weight, bias, stride, pad } => {
                    let w = register(tape, weight);
                    let b = register(tape, bias);
                    param_vars.push(w);
                    param_vars.push(b);
                    cur = tape.conv2d(cur, w, b, *stride, *pad)?;
                }
                Layer::BatchNorm { gamma, beta, running_mean, running_var } => {
                    let g = register(tape, gamma);
                    let bt = register(tape, beta);
                    param_vars.push(g);
                    param_vars.push(bt);
                    let BnForward { y, batch_mean, batch_var, updated_running } =
                        batchnorm(tape, cur, g, bt, running_mean, running_var, mode, self.spec.bn_momentum)?;
                    cur = y;
                    bn_stats.push((batch_mean, batch_var));
                    if let Some((m, v)) = updated_running {
                        pending.push((li, m, v));
                    }
                }
                Layer::Relu => cur = tape.relu(cur)?,
                Layer::MaxPool2 => cur = tape.maxpool2(cur)?,
                Layer::Flatten => cur = tape.flatten(cur)?,
                Layer::Dense { weight, bias } => {
                    let w = register(tape, weight);
                    let b = register(tape, bias);
                    param_vars.push(w);
                    param_vars.push(b);
                    cur = tape.dense(cur, w, b)?;
                }
            }
        }

        Ok((Trace { logits: cur, bn_stats, param_vars }, pending))
    }

    /// Forward pass for optimization: parameters are gradient targets,
    /// batch statistics normalize, and running statistics absorb the
    /// momentum update.
    pub fn forward_train(&mut self, tape: &mut Tape, x: Var) -> Result<Trace> {
        let (trace, pending) = self.forward_impl(tape, x, BnMode::Train, ParamPolicy::Trainable)?;
        for (li, mean, var) in pending {
            if let Layer::BatchNorm { running_mean, running_var, .. } = &mut self.layers[li] {
                *running_mean = mean;
                *running_var = var;
            }
        }
        Ok(trace)
    }

    /// Forward pass that provably cannot mutate the model. `Eval`
    /// normalizes with running statistics, `Probe` with batch statistics.
    pub fn forward_frozen(&self, tape: &mut Tape, x: Var, mode: BnMode) -> Result<Trace> {
        if mode == BnMode::Train {
            return Err(Error::Usage("forward_frozen cannot run in train mode".into()));
        }
        let (trace, _) = self.forward_impl(tape, x, mode, ParamPolicy::Frozen)?;
        Ok(trace)
    }

    /// Class probabilities `[n, classes]` under eval-mode normalization.
    pub fn predict(&self, inputs: &Tensor) -> Result<Tensor> {
        let shape = inputs.shape();
        if shape.len() != 4 {
            return Err(Error::shape("predict", format!("expected [n,c,h,w], got {shape:?}")));
        }
        let n = shape[0];
        let classes = self.spec.classes;
        let mut out = vec![0.0; n * classes];
        // Rows are independent in eval mode; chunking bounds tape memory
        // without changing any value.
        let chunk = 256usize;
        let row = inputs.numel() / n.max(1);
        for start in (0..n).step_by(chunk) {
            let end = (start + chunk).min(n);
            let mut tape = Tape::new();
            let slice = Tensor::from_parts(
                vec![end - start, shape[1], shape[2], shape[3]],
                inputs.data()[start * row..end * row].to_vec(),
            );
            let x = tape.constant(&slice);
            let trace = self.forward_frozen(&mut tape, x, BnMode::Eval)?;
            let logits = tape.value(trace.logits);
            for i in 0..end - start {
                let lrow = &logits[i * classes..][..classes];
                let mx = lrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                let orow = &mut out[(start + i) * classes..][..classes];
                for (o, &l) in orow.iter_mut().zip(lrow) {
                    *o = (l - mx).exp();
                    sum += *o;
                }
                for o in orow.iter_mut() {
                    *o /= sum;
                }
            }
        }
        Ok(Tensor::from_parts(vec![n, classes], out))
    }

    /// Most likely class per row.
    pub fn predict_classes(&self, inputs: &Tensor) -> Result<Vec<usize>> {
        let probs = self.predict(inputs)?;
        let k = self.spec.classes;
        Ok(probs
            .data()
            .chunks_exact(k)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }

    /// Learnable tensors in canonical order: per layer, weights before
    /// biases (gamma before beta for batch norm).
    pub fn param_tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv { weight, bias, .. } | Layer::Dense { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                Layer::BatchNorm { gamma, beta, .. } => {
                    out.push(gamma);
                    out.push(beta);
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv { weight, bias, .. } | Layer::Dense { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                Layer::BatchNorm { gamma, beta, .. } => {
                    out.push(gamma);
                    out.push(beta);
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_tensors().iter().map(|t| t.numel()).sum()
    }

    /// Flatten all learnable parameters into one vector (canonical order).
    pub fn param_vector(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for t in self.param_tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn set_param_vector(&mut self, flat: &[f64]) -> Result<()> {
        let want = self.param_count();
        if flat.len() != want {
            return Err(Error::shape(
                "set_param_vector",
                format!("expected {want} values, got {}", flat.len()),
            ));
        }
        let mut offset = 0;
        for t in self.param_tensors_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Running batch-norm statistics in network order: (mean, var) pairs.
    pub fn bn_stats(&self) -> Vec<(Tensor, Tensor)> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::BatchNorm { running_mean, running_var, .. } => {
                    Some((running_mean.clone(), running_var.clone()))
                }
                _ => None,
            })
            .collect()
    }

    pub fn bn_stats_vector(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            if let Layer::BatchNorm { running_mean, running_var, .. } = layer {
                out.extend_from_slice(running_mean.data());
                out.extend_from_slice(running_var.data());
            }
        }
        out
    }

    pub fn set_bn_stats_vector(&mut self, flat: &[f64]) -> Result<()> {
        let want: usize = self.bn_stats().iter().map(|(m, v)| m.numel() + v.numel()).sum();
        if flat.len() != want {
            return Err(Error::shape(
                "set_bn_stats_vector",
                format!("expected {want} values, got {}", flat.len()),
            ));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            if let Layer::BatchNorm { running_mean, running_var, .. } = layer {
                let c = running_mean.numel();
                running_mean.data_mut().copy_from_slice(&flat[offset..offset + c]);
                offset += c;
                running_var.data_mut().copy_from_slice(&flat[offset..offset + c]);
                offset += c;
            }
        }
        Ok(())
    }

    /// Content hash over parameters and running statistics; equal hashes
    /// mean bit-identical model state.
    pub fn state_hash(&self) -> u64 {
        let mut h = Fnv::new();
        h.write_f64s(&self.param_vector());
        h.write_f64s(&self.bn_stats_vector());
        h.finish()
    }

    const MAGIC: &'static [u8; 4] = b"FZDA";
    const VERSION: u32 = 1;

    /// Serialize to a self-describing little-endian binary blob.
    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        let io = |e| Error::Checkpoint(format!("write failed: {e}"));
        w.write_all(Self::MAGIC).map_err(io)?;
        w.write_all(&Self::VERSION.to_le_bytes()).map_err(io)?;
        let arch: u8 = match self.spec.id {
            ArchId::MnistCnn => 0,
            ArchId::CifarCnn => 1,
            ArchId::ToyCnn => 2,
        };
        w.write_all(&[arch]).map_err(io)?;
        for dim in [self.spec.in_channels, self.spec.height, self.spec.width, self.spec.classes] {
            w.write_all(&(dim as u32).to_le_bytes()).map_err(io)?;
        }
        w.write_all(&self.spec.bn_momentum.to_le_bytes()).map_err(io)?;
        w.write_all(&self.seed.to_le_bytes()).map_err(io)?;

        let params = self.param_vector();
        w.write_all(&(params.len() as u64).to_le_bytes()).map_err(io)?;
        for v in &params {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        let stats = self.bn_stats_vector();
        w.write_all(&(stats.len() as u64).to_le_bytes()).map_err(io)?;
        for v in &stats {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        Ok(())
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Model> {
        fn read_exact<const N: usize>(r: &mut impl Read, what: &str) -> Result<[u8; N]> {
            let mut buf = [0u8; N];
            r.read_exact(&mut buf)
                .map_err(|e| Error::Checkpoint(format!("truncated reading {what}: {e}")))?;
            Ok(buf)
        }
        let magic = read_exact::<4>(r, "magic")?;
        if &magic != Self::MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}, expected {:?}", Self::MAGIC)));
        }
        let version = u32::from_le_bytes(read_exact::<4>(r, "version")?);
        if version != Self::VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let arch = match read_exact::<1>(r, "arch id")?[0] {
            0 => ArchId::MnistCnn,
            1 => ArchId::CifarCnn,
            2 => ArchId::ToyCnn,
            other => return Err(Error::Checkpoint(format!("unknown arch id {other}"))),
        };
        let mut dims = [0usize; 4];
        for (i, d) in dims.iter_mut().enumerate() {
            *d = u32::from_le_bytes(read_exact::<4>(r, &format!("dim {i}"))?) as usize;
        }
        let bn_momentum = f64::from_le_bytes(read_exact::<8>(r, "bn momentum")?);
        let seed = u64::from_le_bytes(read_exact::<8>(r, "seed")?);
        let spec = ArchitectureSpec {
            id: arch,
            in_channels: dims[0],
            height: dims[1],
            width: dims[2],
            classes: dims[3],
            bn_momentum,
        };
        let mut model = build(&spec, seed)?;

        let n_params = u64::from_le_bytes(read_exact::<8>(r, "param count")?) as usize;
        if n_params != model.param_count() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {n_params} params, architecture needs {}",
                model.param_count()
            )));
        }
        let mut params = vec![0.0; n_params];
        for (i, p) in params.iter_mut().enumerate() {
            *p = f64::from_le_bytes(read_exact::<8>(r, &format!("param {i}"))?);
        }
        model.set_param_vector(&params)?;

        let n_stats = u64::from_le_bytes(read_exact::<8>(r, "stat count")?) as usize;
        let mut stats = vec![0.0; n_stats];
        for (i, s) in stats.iter_mut().enumerate() {
            *s = f64::from_le_bytes(read_exact::<8>(r, &format!("stat {i}"))?);
        }
        model.set_bn_stats_vector(&stats)?;
        Ok(model)
    }

    pub fn save_file(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.save(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_file(path: &std::path::Path) -> Result<Model> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = std::io::BufReader::new(file);
        Model::load(&mut r)
    }
}
