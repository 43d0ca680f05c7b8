//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! Graph nodes live in an arena indexed by [`Var`]. Builders validate
//! shapes, run the forward kernel immediately, verify the result is finite
//! and record enough state to replay the chain rule in reverse. Gradients
//! are accumulated in a fixed order, so identical graphs produce identical
//! gradients bit for bit.

use super::kernels::{self, ConvDims};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, dims: ConvDims },
    ChannelMean { x: Var, n: usize, c: usize, spatial: usize },
    ChannelVar { x: Var, mean: Var, n: usize, c: usize, spatial: usize },
    BnAffine { x: Var, mean: Var, var: Var, gamma: Var, beta: Var, n: usize, c: usize, spatial: usize },
    Relu { x: Var },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Flatten { x: Var },
    Dense { x: Var, w: Var, b: Var, n: usize, din: usize, k: usize },
    SoftmaxXent { logits: Var, targets: Vec<usize>, probs: Vec<f64>, n: usize, k: usize },
    SqDiffSum { a: Var, target: Vec<f64> },
    WeightedSum { terms: Vec<(Var, f64)> },
    Sum { x: Var },
}

pub struct Tape {
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
    needs_grad: Vec<bool>,
    is_leaf: Vec<bool>,
    grads: Vec<Option<Vec<f64>>>,
    ops: Vec<(Op, usize)>,
    ran_backward: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Interpret a tensor as `[batch, channels, spatial]` for channel statistics.
fn stat_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape.len() {
        2 => Ok((shape[0], shape[1], 1)),
        4 => Ok((shape[0], shape[1], shape[2] * shape[3])),
        _ => Err(Error::shape(op, format!("expected rank 2 or 4, got {shape:?}"))),
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            shapes: Vec::new(),
            values: Vec::new(),
            needs_grad: Vec::new(),
            is_leaf: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
            ran_backward: false,
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, needs: bool, leaf: bool, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let id = self.shapes.len();
        self.shapes.push(shape);
        self.values.push(value);
        self.needs_grad.push(needs);
        self.is_leaf.push(leaf);
        self.grads.push(None);
        self.ops.push((op, id));
        Var(id)
    }

    fn check_finite(&self, op: &'static str, value: &[f64]) -> Result<()> {
        for (i, &v) in value.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite { context: format!("{op} output at flat index {i} ({v})") });
            }
        }
        Ok(())
    }

    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), true, Op::Leaf)
    }

    /// A leaf that never receives a gradient, regardless of the tensor flag.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, true, Op::Leaf)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.shapes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.values[v.0]
    }

    /// Copy a node's value into a fresh tensor.
    pub fn value_tensor(&self, v: Var) -> Tensor {
        Tensor::from_parts(self.shapes[v.0].clone(), self.values[v.0].clone())
    }

    /// Gradient of the last `backward` target with respect to a leaf.
    /// Present iff the leaf was registered with `requires_grad`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let dims = ConvDims::infer(&self.shapes[x.0], &self.shapes[w.0], stride, pad)?;
        if self.shapes[b.0] != [dims.c_out] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?}, expected [{}]", self.shapes[b.0], dims.c_out),
            ));
        }
        let mut out = vec![0.0; dims.n * dims.c_out * dims.oh * dims.ow];
        kernels::conv2d_forward(&dims, &self.values[x.0], &self.values[w.0], &self.values[b.0], &mut out);
        self.check_finite("conv2d", &out)?;
        let needs = self.any_needs(&[x, w, b]);
        Ok(self.push(dims.out_shape(), out, needs, false, Op::Conv2d { x, w, b, dims }))
    }

    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (n, c, spatial) = stat_dims("channel_mean", &self.shapes[x.0])?;
        if n * spatial == 0 {
            return Err(Error::shape("channel_mean", "empty batch"));
        }
        let mut out = vec![0.0; c];
        kernels::channel_mean(&self.values[x.0], n, c, spatial, &mut out);
        self.check_finite("channel_mean", &out)?;
        let needs = self.any_needs(&[x]);
        Ok(self.push(vec![c], out, needs, false, Op::ChannelMean { x, n, c, spatial }))
    }

    /// Population (biased) variance of `x` around `mean`, per channel.
    pub fn channel_var(&mut self, x: Var, mean: Var) -> Result<Var> {
        let (n, c, spatial) = stat_dims("channel_var", &self.shapes[x.0])?;
        if self.shapes[mean.0] != [c] {
            return Err(Error::shape(
                "channel_var",
                format!("mean shape {:?}, expected [{c}]", self.shapes[mean.0]),
            ));
        }
        let mut out = vec![0.0; c];
        kernels::channel_var(&self.values[x.0], &self.values[mean.0], n, c, spatial, &mut out);
        self.check_finite("channel_var", &out)?;
        let needs = self.any_needs(&[x, mean]);
        Ok(self.push(vec![c], out, needs, false, Op::ChannelVar { x, mean, n, c, spatial }))
    }

    pub fn bn_affine(&mut self, x: Var, mean: Var, var: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, c, spatial) = stat_dims("bn_affine", &self.shapes[x.0])?;
        for (name, v) in [("mean", mean), ("var", var), ("gamma", gamma), ("beta", beta)] {
            if self.shapes[v.0] != [c] {
                return Err(Error::shape(
                    "bn_affine",
                    format!("{name} shape {:?}, expected [{c}]", self.shapes[v.0]),
                ));
            }
        }
        let mut out = vec![0.0; numel(&self.shapes[x.0])];
        kernels::bn_affine_forward(
            &self.values[x.0],
            &self.values[mean.0],
            &self.values[var.0],
            &self.values[gamma.0],
            &self.values[beta.0],
            eps,
            n,
            c,
            spatial,
            &mut out,
        )?;
        self.check_finite("bn_affine", &out)?;
        let needs = self.any_needs(&[x, mean, var, gamma, beta]);
        let shape = self.shapes[x.0].clone();
        Ok(self.push(shape, out, needs, false, Op::BnAffine { x, mean, var, gamma, beta, n, c, spatial }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.values[x.0].iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let needs = self.any_needs(&[x]);
        let shape = self.shapes[x.0].clone();
        Ok(self.push(shape, out, needs, false, Op::Relu { x }))
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shapes[x.0].clone();
        if shape.len() != 4 {
            return Err(Error::shape("maxpool2", format!("expected rank 4, got {shape:?}")));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("maxpool2", format!("spatial dims must be even, got {h}x{w}")));
        }
        let mut out = vec![0.0; n * c * (h / 2) * (w / 2)];
        let mut argmax = vec![0usize; out.len()];
        kernels::maxpool2_forward(&self.values[x.0], n, c, h, w, &mut out, &mut argmax);
        let needs = self.any_needs(&[x]);
        Ok(self.push(vec![n, c, h / 2, w / 2], out, needs, false, Op::MaxPool2 { x, argmax }))
    }

    /// Collapse all trailing dims into one: `[n, ...] -> [n, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = &self.shapes[x.0];
        if shape.len() < 2 {
            return Err(Error::shape("flatten", format!("expected rank >= 2, got {shape:?}")));
        }
        let n = shape[0];
        let rest = numel(shape) / n;
        let value = self.values[x.0].clone();
        let needs = self.any_needs(&[x]);
        Ok(self.push(vec![n, rest], value, needs, false, Op::Flatten { x }))
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = &self.shapes[x.0];
        let ws = &self.shapes[w.0];
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::shape("dense", format!("x {xs:?} and w {ws:?} must be rank 2")));
        }
        let (n, din, k) = (xs[0], xs[1], ws[1]);
        if ws[0] != din {
            return Err(Error::shape("dense", format!("x has {din} features, w expects {}", ws[0])));
        }
        if self.shapes[b.0] != [k] {
            return Err(Error::shape("dense", format!("bias shape {:?}, expected [{k}]", self.shapes[b.0])));
        }
        let mut out = vec![0.0; n * k];
        kernels::dense_forward(&self.values[x.0], &self.values[w.0], &self.values[b.0], n, din, k, &mut out);
        self.check_finite("dense", &out)?;
        let needs = self.any_needs(&[x, w, b]);
        Ok(self.push(vec![n, k], out, needs, false, Op::Dense { x, w, b, n, din, k }))
    }

    /// Mean cross-entropy of row-wise softmax against integer targets.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = &self.shapes[logits.0];
        if shape.len() != 2 {
            return Err(Error::shape("softmax_xent", format!("logits must be rank 2, got {shape:?}")));
        }
        let (n, k) = (shape[0], shape[1]);
        if k < 2 {
            return Err(Error::shape("softmax_xent", format!("need at least 2 classes, got {k}")));
        }
        if targets.len() != n {
            return Err(Error::shape(
                "softmax_xent",
                format!("{} targets for batch of {n}", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::shape("softmax_xent", format!("target {bad} out of range for {k} classes")));
        }
        let mut probs = vec![0.0; n * k];
        let loss = kernels::softmax_xent_forward(&self.values[logits.0], targets, n, k, &mut probs);
        self.check_finite("softmax_xent", std::slice::from_ref(&loss))?;
        let needs = self.any_needs(&[logits]);
        Ok(self.push(
            vec![],
            vec![loss],
            needs,
            false,
            Op::SoftmaxXent { logits, targets: targets.to_vec(), probs, n, k },
        ))
    }

    /// `sum((a - target)^2)` against a constant target of identical shape.
    pub fn sq_diff_sum(&mut self, a: Var, target: &Tensor) -> Result<Var> {
        if self.shapes[a.0] != target.shape() {
            return Err(Error::shape(
                "sq_diff_sum",
                format!("operand {:?} vs target {:?}", self.shapes[a.0], target.shape()),
            ));
        }
        let mut acc = 0.0;
        for (&v, &t) in self.values[a.0].iter().zip(target.data()) {
            let d = v - t;
            acc += d * d;
        }
        self.check_finite("sq_diff_sum", std::slice::from_ref(&acc))?;
        let needs = self.any_needs(&[a]);
        Ok(self.push(vec![], vec![acc], needs, false, Op::SqDiffSum { a, target: target.data().to_vec() }))
    }

    /// Linear combination of scalar nodes with constant coefficients.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        if terms.is_empty() {
            return Err(Error::shape("weighted_sum", "no terms"));
        }
        let mut acc = 0.0;
        for &(v, coeff) in terms {
            if numel(&self.shapes[v.0]) != 1 {
                return Err(Error::shape(
                    "weighted_sum",
                    format!("term must be scalar, got {:?}", self.shapes[v.0]),
                ));
            }
            acc += coeff * self.values[v.0][0];
        }
        self.check_finite("weighted_sum", std::slice::from_ref(&acc))?;
        let needs = terms.iter().any(|&(v, _)| self.needs_grad[v.0]);
        Ok(self.push(vec![], vec![acc], needs, false, Op::WeightedSum { terms: terms.to_vec() }))
    }

    /// Sum of all elements.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let acc: f64 = self.values[x.0].iter().sum();
        self.check_finite("sum", std::slice::from_ref(&acc))?;
        let needs = self.any_needs(&[x]);
        Ok(self.push(vec![], vec![acc], needs, false, Op::Sum { x }))
    }

    fn any_needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.needs_grad[v.0])
    }

    fn take_grad(&mut self, v: Var) -> Vec<f64> {
        self.grads[v.0].take().unwrap_or_else(|| vec![0.0; numel(&self.shapes[v.0])])
    }

    /// Run the chain rule backwards from a scalar loss. Gradients of
    /// intermediate nodes are freed afterwards; only leaves registered with
    /// `requires_grad` keep theirs. A second call is a usage error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.ran_backward {
            return Err(Error::Usage("backward already ran on this tape".into()));
        }
        if numel(&self.shapes[loss.0]) != 1 {
            return Err(Error::Usage(format!(
                "backward target must be scalar, got shape {:?}",
                self.shapes[loss.0]
            )));
        }
        self.ran_backward = true;
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..self.ops.len()).rev() {
            let out = self.ops[idx].1;
            if self.grads[out].is_none() {
                continue;
            }
            let gout = self.grads[out].take().expect("grad present");
            // Ops are split out of `self.ops` temporarily so input values
            // and gradients can be borrowed without aliasing the op data.
            let op = std::mem::replace(&mut self.ops[idx].0, Op::Leaf);
            self.apply_backward(&op, &gout);
            self.ops[idx].0 = op;
            self.grads[out] = Some(gout);
        }

        for i in 0..self.grads.len() {
            if !self.is_leaf[i] || !self.needs_grad[i] {
                self.grads[i] = None;
            }
        }
        Ok(())
    }

    fn apply_backward(&mut self, op: &Op, gout: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, dims } => {
                if self.needs_grad[x.0] {
                    let mut dx = self.take_grad(*x);
                    kernels::conv2d_backward_x(dims, &self.values[w.0], gout, &mut dx);
                    self.grads[x.0] = Some(dx);
                }
                if self.needs_grad[w.0] {
                    let mut dw = self.take_grad(*w);
                    kernels::conv2d_backward_w(dims, &self.values[x.0], gout, &mut dw);
                    self.grads[w.0] = Some(dw);
                }
                if self.needs_grad[b.0] {
                    let mut db = self.take_grad(*b);
                    kernels::conv2d_backward_b(dims, gout, &mut db);
                    self.grads[b.0] = Some(db);
                }
            }
            Op::ChannelMean { x, n, c, spatial } => {
                if self.needs_grad[x.0] {
                    let mut dx = self.take_grad(*x);
                    kernels::channel_mean_backward(gout, *n, *c, *spatial, &mut dx);
                    self.grads[x.0] = Some(dx);
                }
            }
            Op::ChannelVar { x, mean, n, c, spatial } => {
                // dmean is accumulated even when only x needs gradients,
                // because the two share the same kernel pass; the unused
                // buffer is dropped below.
                let needs_x = self.needs_grad[x.0];
                let needs_m = self.needs_grad[mean.0];
                if needs_x || needs_m {
                    let mut dx = if needs_x { self.take_grad(*x) } else { vec![0.0; self.values[x.0].len()] };
                    let mut dmean = if needs_m { self.take_grad(*mean) } else { vec![0.0; *c] };
                    kernels::channel_var_backward(
                        &self.values[x.0],
                        &self.values[mean.0],
                        gout,
                        *n,
                        *c,
                        *spatial,
                        &mut dx,
                        &mut dmean,
                    );
                    if needs_x {
                        self.grads[x.0] = Some(dx);
                    }
                    if needs_m {
                        self.grads[mean.0] = Some(dmean);
                    }
                }
            }
            Op::BnAffine { x, mean, var, gamma, beta, n, c, spatial } => {
                let any = [*x, *mean, *var, *gamma, *beta].iter().any(|v| self.needs_grad[v.0]);
                if !any {
                    return;
                }
                let mut dx = self.take_grad(*x);
                let mut dmean = self.take_grad(*mean);
                let mut dvar = self.take_grad(*var);
                let mut dgamma = self.take_grad(*gamma);
                let mut dbeta = self.take_grad(*beta);
                kernels::bn_affine_backward(
                    &self.values[x.0],
                    &self.values[mean.0],
                    &self.values[var.0],
                    &self.values[gamma.0],
                    super::BN_EPSILON,
                    *n,
                    *c,
                    *spatial,
                    gout,
                    kernels::BnAffineGrads {
                        dx: &mut dx,
                        dmean: &mut dmean,
                        dvar: &mut dvar,
                        dgamma: &mut dgamma,
                        dbeta: &mut dbeta,
                    },
                );
                for (v, g) in [(*x, dx), (*mean, dmean), (*var, dvar), (*gamma, dgamma), (*beta, dbeta)] {
                    if self.needs_grad[v.0] {
                        self.grads[v.0] = Some(g);
                    }
                }
            }
            Op::Relu { x } => {
                if self.needs_grad[x.0] {
                    let mut dx = self.take_grad(*x);
                    for ((dv, &v), &g) in dx.iter_mut().zip(&self.values[x.0]).zip(gout) {
                        if v > 0.0 {
                            *dv += g;
                        }
                    }
                    self.grads[x.0] = Some(dx);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if self.needs_grad[x.0] {
                    let mut dx = self.take_grad(*x);
                    kernels::maxpool2_backward(gout, argmax, &mut dx);
                    self.grads[x.0] = Some(dx);
                }
            }
            Op::Flatten { x } => {
                if self.needs_grad[x.0] {
                    let mut dx = self.take_grad(*x);
                    for (dv, &g) in dx.iter_mut().zip(gout) {
                        *dv += g;
                    }
                    self.grads[x.0] = Some(dx);
                }
            }
            Op::Dense { x, w, b, n, din, k } => {
                if self.needs_grad[x.0] {
                    let mut dx = self.take_grad(*x);
                    kernels::dense_backward_x(gout, &self.values[w.0], *n, *din, *k, &mut dx);
                    self.grads[x.0] = Some(dx);
                }
                if self.needs_grad[w.0] {
                    let mut dw = self.take_grad(*w);
                    kernels::dense_backward_w(&self.values[x.0], gout, *n, *din, *k, &mut dw);
                    self.grads[w.0] = Some(dw);
                }
                if self.needs_grad[b.0] {
                    let mut db = self.take_grad(*b);
                    kernels::dense_backward_b(gout, *n, *k, &mut db);
                    self.grads[b.0] = Some(db);
                }
            }
            Op::SoftmaxXent { logits, targets, probs, n, k } => {
                if self.needs_grad[logits.0] {
                    let mut dl = self.take_grad(*logits);
                    kernels::softmax_xent_backward(probs, targets, *n, *k, gout[0], &mut dl);
                    self.grads[logits.0] = Some(dl);
                }
            }
            Op::SqDiffSum { a, target } => {
                if self.needs_grad[a.0] {
                    let mut da = self.take_grad(*a);
                    for ((dv, &v), &t) in da.iter_mut().zip(&self.values[a.0]).zip(target) {
                        *dv += gout[0] * 2.0 * (v - t);
                    }
                    self.grads[a.0] = Some(da);
                }
            }
            Op::WeightedSum { terms } => {
                for &(v, coeff) in terms {
                    if self.needs_grad[v.0] {
                        let mut dv = self.take_grad(v);
                        dv[0] += gout[0] * coeff;
                        self.grads[v.0] = Some(dv);
                    }
                }
            }
            Op::Sum { x } => {
                if self.needs_grad[x.0] {
                    let mut dx = self.take_grad(*x);
                    for dv in dx.iter_mut() {
                        *dv += gout[0];
                    }
                    self.grads[x.0] = Some(dx);
                }
            }
        }
    }
}
