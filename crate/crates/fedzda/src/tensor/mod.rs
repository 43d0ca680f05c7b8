//! Tensor values and the autodiff tape.
//!
//! Tensors are dense, row-major, `f64` buffers with explicit shapes.
//! Construction validates finiteness; in-place mutation is reserved for
//! optimizer steps, which re-check through the loss on the next forward
//! pass.

pub mod kernels;
pub mod tape;

pub use tape::{Tape, Var};

use crate::error::{Error, Result};

/// Epsilon added to variances before the batch-norm rsqrt. Shared by the
/// network layers and the data-generation loss so both see the same
/// normalization geometry.
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} implies {numel} elements, got {}", data.len()),
            ));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: format!("tensor construction (value {bad})") });
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    /// Construction from values already known finite (tape outputs).
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(shape, vec![value; numel])
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![], vec![value])
    }

    /// Builder: mark this tensor as a gradient target when registered on a
    /// tape.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for optimizer steps. Bypasses the finiteness check;
    /// training loops re-validate through the next forward pass.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f64>>) {
        self.grad = grad;
    }
}

/// How a batch-norm layer sources its normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and report a running-stat update.
    Train,
    /// Normalize with the stored running statistics; batch statistics are
    /// still computed and exposed for inspection.
    Eval,
    /// Normalize with batch statistics without touching running state.
    /// Used when optimizing inputs against a frozen model.
    Probe,
}

/// Result of one batch-norm application. `batch_mean` / `batch_var` are
/// live graph nodes, so losses may attach to them; `updated_running` is
/// the momentum update the owning layer should apply in train mode.
#[derive(Debug)]
pub struct BnForward {
    pub y: Var,
    pub batch_mean: Var,
    pub batch_var: Var,
    pub updated_running: Option<(Tensor, Tensor)>,
}

/// Batch normalization composed from channel statistics and an affine
/// normalize node, so gradients flow through the statistics themselves.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    running_mean: &Tensor,
    running_var: &Tensor,
    mode: BnMode,
    momentum: f64,
) -> Result<BnForward> {
    let shape = tape.shape(x).to_vec();
    let (n, spatial) = match shape.len() {
        2 => (shape[0], 1),
        4 => (shape[0], shape[2] * shape[3]),
        _ => return Err(Error::shape("batchnorm", format!("expected rank 2 or 4, got {shape:?}"))),
    };
    if mode != BnMode::Eval && n * spatial < 2 {
        return Err(Error::shape(
            "batchnorm",
            format!("batch statistics need at least 2 values per channel, got {}", n * spatial),
        ));
    }

    let batch_mean = tape.channel_mean(x)?;
    let batch_var = tape.channel_var(x, batch_mean)?;

    let (norm_mean, norm_var) = match mode {
        BnMode::Train | BnMode::Probe => (batch_mean, batch_var),
        BnMode::Eval => (tape.constant(running_mean), tape.constant(running_var)),
    };
    let y = tape.bn_affine(x, norm_mean, norm_var, gamma, beta, BN_EPSILON)?;

    let updated_running = if mode == BnMode::Train {
        let mix = |old: &[f64], new: &[f64]| -> Vec<f64> {
            old.iter().zip(new).map(|(&o, &b)| (1.0 - momentum) * o + momentum * b).collect()
        };
        let new_mean = mix(running_mean.data(), tape.value(batch_mean));
        let new_var = mix(running_var.data(), tape.value(batch_var));
        Some((
            Tensor::from_parts(running_mean.shape().to_vec(), new_mean),
            Tensor::from_parts(running_var.shape().to_vec(), new_var),
        ))
    } else {
        None
    };

    Ok(BnForward { y, batch_mean, batch_var, updated_running })
}
