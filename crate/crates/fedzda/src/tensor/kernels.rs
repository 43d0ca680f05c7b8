//! Dense numeric kernels over flat row-major buffers.
//!
//! Every kernel fixes its summation order (documented per function), so
//! repeated runs produce bit-identical results on any platform. Backward
//! kernels accumulate with `+=` into caller-provided gradient buffers.

use crate::error::{Error, Result};

/// Resolved convolution geometry. Input `[n, c_in, h, w]`, kernel
/// `[c_out, c_in, kh, kw]`, output `[n, c_out, oh, ow]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    /// Infer output geometry, rejecting kernels larger than the padded
    /// input and strides that do not divide the span exactly.
    pub fn infer(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x_shape.len() != 4 {
            return Err(Error::shape("conv2d", format!("input must be 4-d, got {x_shape:?}")));
        }
        if w_shape.len() != 4 {
            return Err(Error::shape("conv2d", format!("kernel must be 4-d, got {w_shape:?}")));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be >= 1"));
        }
        let (n, c_in, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (c_out, kc, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        if kc != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("kernel expects {kc} input channels, input has {c_in}"),
            ));
        }
        let ph = h + 2 * pad;
        let pw = w + 2 * pad;
        if kh > ph || kw > pw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {ph}x{pw}"),
            ));
        }
        if (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "stride {stride} does not evenly divide padded span ({}x{})",
                    ph - kh,
                    pw - kw
                ),
            ));
        }
        Ok(ConvDims {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            oh: (ph - kh) / stride + 1,
            ow: (pw - kw) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.c_out, self.oh, self.ow]
    }
}

/// Valid output-column range for a fixed kernel column at stride 1:
/// `iw = ow + kw - pad` must land in `[0, w)`.
#[inline]
fn stride1_cols(ow: usize, w: usize, pad: usize, kw: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kw);
    let hi = (w + pad - kw).min(ow);
    (lo, hi.max(lo))
}

/// Forward convolution. Accumulation order per output element: bias first,
/// then input channel, then kernel row, then kernel column.
pub fn conv2d_forward(d: &ConvDims, x: &[f64], wt: &[f64], b: &[f64], out: &mut [f64]) {
    let (hw, ohw) = (d.h * d.w, d.oh * d.ow);
    for n in 0..d.n {
        for f in 0..d.c_out {
            let out_plane = &mut out[(n * d.c_out + f) * ohw..][..ohw];
            out_plane.fill(b[f]);
            for c in 0..d.c_in {
                let x_plane = &x[(n * d.c_in + c) * hw..][..hw];
                for kh in 0..d.kh {
                    for kw in 0..d.kw {
                        let wv = wt[((f * d.c_in + c) * d.kh + kh) * d.kw + kw];
                        for oh in 0..d.oh {
                            let ih = oh * d.stride + kh;
                            if ih < d.pad || ih - d.pad >= d.h {
                                continue;
                            }
                            let x_row = &x_plane[(ih - d.pad) * d.w..][..d.w];
                            let out_row = &mut out_plane[oh * d.ow..][..d.ow];
                            if d.stride == 1 {
                                let (lo, hi) = stride1_cols(d.ow, d.w, d.pad, kw);
                                if lo < hi {
                                    let xs = &x_row[lo + kw - d.pad..hi + kw - d.pad];
                                    for (o, xv) in out_row[lo..hi].iter_mut().zip(xs) {
                                        *o += wv * xv;
                                    }
                                }
                            } else {
                                for ow in 0..d.ow {
                                    let iw = ow * d.stride + kw;
                                    if iw >= d.pad && iw - d.pad < d.w {
                                        out_row[ow] += wv * x_row[iw - d.pad];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_backward_x(d: &ConvDims, wt: &[f64], dout: &[f64], dx: &mut [f64]) {
    let (hw, ohw) = (d.h * d.w, d.oh * d.ow);
    for n in 0..d.n {
        for f in 0..d.c_out {
            let dout_plane = &dout[(n * d.c_out + f) * ohw..][..ohw];
            for c in 0..d.c_in {
                let dx_plane = &mut dx[(n * d.c_in + c) * hw..][..hw];
                for kh in 0..d.kh {
                    for kw in 0..d.kw {
                        let wv = wt[((f * d.c_in + c) * d.kh + kh) * d.kw + kw];
                        for oh in 0..d.oh {
                            let ih = oh * d.stride + kh;
                            if ih < d.pad || ih - d.pad >= d.h {
                                continue;
                            }
                            let dx_row = &mut dx_plane[(ih - d.pad) * d.w..][..d.w];
                            let dout_row = &dout_plane[oh * d.ow..][..d.ow];
                            if d.stride == 1 {
                                let (lo, hi) = stride1_cols(d.ow, d.w, d.pad, kw);
                                if lo < hi {
                                    let dxs = &mut dx_row[lo + kw - d.pad..hi + kw - d.pad];
                                    for (dxv, g) in dxs.iter_mut().zip(&dout_row[lo..hi]) {
                                        *dxv += wv * g;
                                    }
                                }
                            } else {
                                for ow in 0..d.ow {
                                    let iw = ow * d.stride + kw;
                                    if iw >= d.pad && iw - d.pad < d.w {
                                        dx_row[iw - d.pad] += wv * dout_row[ow];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_backward_w(d: &ConvDims, x: &[f64], dout: &[f64], dw: &mut [f64]) {
    let (hw, ohw) = (d.h * d.w, d.oh * d.ow);
    for n in 0..d.n {
        for f in 0..d.c_out {
            let dout_plane = &dout[(n * d.c_out + f) * ohw..][..ohw];
            for c in 0..d.c_in {
                let x_plane = &x[(n * d.c_in + c) * hw..][..hw];
                for kh in 0..d.kh {
                    for kw in 0..d.kw {
                        let mut acc = 0.0;
                        for oh in 0..d.oh {
                            let ih = oh * d.stride + kh;
                            if ih < d.pad || ih - d.pad >= d.h {
                                continue;
                            }
                            let x_row = &x_plane[(ih - d.pad) * d.w..][..d.w];
                            let dout_row = &dout_plane[oh * d.ow..][..d.ow];
                            if d.stride == 1 {
                                let (lo, hi) = stride1_cols(d.ow, d.w, d.pad, kw);
                                if lo < hi {
                                    let xs = &x_row[lo + kw - d.pad..hi + kw - d.pad];
                                    for (xv, g) in xs.iter().zip(&dout_row[lo..hi]) {
                                        acc += xv * g;
                                    }
                                }
                            } else {
                                for ow in 0..d.ow {
                                    let iw = ow * d.stride + kw;
                                    if iw >= d.pad && iw - d.pad < d.w {
                                        acc += x_row[iw - d.pad] * dout_row[ow];
                                    }
                                }
                            }
                        }
                        dw[((f * d.c_in + c) * d.kh + kh) * d.kw + kw] += acc;
                    }
                }
            }
        }
    }
}

pub fn conv2d_backward_b(d: &ConvDims, dout: &[f64], db: &mut [f64]) {
    let ohw = d.oh * d.ow;
    for n in 0..d.n {
        for f in 0..d.c_out {
            let mut acc = 0.0;
            for &g in &dout[(n * d.c_out + f) * ohw..][..ohw] {
                acc += g;
            }
            db[f] += acc;
        }
    }
}

/// Per-channel mean over batch and spatial dims. `x` is `[n, c, spatial]`
/// flattened; sums run batch-major then element order within a plane.
pub fn channel_mean(x: &[f64], n: usize, c: usize, spatial: usize, out: &mut [f64]) {
    let m = (n * spatial) as f64;
    for ch in 0..c {
        let mut acc = 0.0;
        for i in 0..n {
            for &v in &x[(i * c + ch) * spatial..][..spatial] {
                acc += v;
            }
        }
        out[ch] = acc / m;
    }
}

pub fn channel_mean_backward(dmean: &[f64], n: usize, c: usize, spatial: usize, dx: &mut [f64]) {
    let m = (n * spatial) as f64;
    for ch in 0..c {
        let g = dmean[ch] / m;
        for i in 0..n {
            for dv in &mut dx[(i * c + ch) * spatial..][..spatial] {
                *dv += g;
            }
        }
    }
}

/// Biased (population) per-channel variance around a supplied mean.
pub fn channel_var(x: &[f64], mean: &[f64], n: usize, c: usize, spatial: usize, out: &mut [f64]) {
    let m = (n * spatial) as f64;
    for ch in 0..c {
        let mu = mean[ch];
        let mut acc = 0.0;
        for i in 0..n {
            for &v in &x[(i * c + ch) * spatial..][..spatial] {
                let d = v - mu;
                acc += d * d;
            }
        }
        out[ch] = acc / m;
    }
}

pub fn channel_var_backward(
    x: &[f64],
    mean: &[f64],
    dvar: &[f64],
    n: usize,
    c: usize,
    spatial: usize,
    dx: &mut [f64],
    dmean: &mut [f64],
) {
    let m = (n * spatial) as f64;
    for ch in 0..c {
        let mu = mean[ch];
        let scale = 2.0 * dvar[ch] / m;
        let mut dev_sum = 0.0;
        for i in 0..n {
            let xs = &x[(i * c + ch) * spatial..][..spatial];
            let dxs = &mut dx[(i * c + ch) * spatial..][..spatial];
            for (&v, dv) in xs.iter().zip(dxs.iter_mut()) {
                let dev = v - mu;
                dev_sum += dev;
                *dv += scale * dev;
            }
        }
        dmean[ch] -= scale * dev_sum;
    }
}

/// Normalize-and-shift: `y = gamma * (x - mean) / sqrt(var + eps) + beta`,
/// broadcast per channel.
#[allow(clippy::too_many_arguments)]
pub fn bn_affine_forward(
    x: &[f64],
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    n: usize,
    c: usize,
    spatial: usize,
    out: &mut [f64],
) -> Result<()> {
    for ch in 0..c {
        let denom = var[ch] + eps;
        if denom <= 0.0 || !denom.is_finite() {
            return Err(Error::NonFinite {
                context: format!("bn_affine: variance + eps = {denom} in channel {ch}"),
            });
        }
        let inv = 1.0 / denom.sqrt();
        let (g, mu, bt) = (gamma[ch], mean[ch], beta[ch]);
        for i in 0..n {
            let xs = &x[(i * c + ch) * spatial..][..spatial];
            let ys = &mut out[(i * c + ch) * spatial..][..spatial];
            for (&v, y) in xs.iter().zip(ys.iter_mut()) {
                *y = g * (v - mu) * inv + bt;
            }
        }
    }
    Ok(())
}

pub struct BnAffineGrads<'a> {
    pub dx: &'a mut [f64],
    pub dmean: &'a mut [f64],
    pub dvar: &'a mut [f64],
    pub dgamma: &'a mut [f64],
    pub dbeta: &'a mut [f64],
}

#[allow(clippy::too_many_arguments)]
pub fn bn_affine_backward(
    x: &[f64],
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    eps: f64,
    n: usize,
    c: usize,
    spatial: usize,
    dout: &[f64],
    grads: BnAffineGrads<'_>,
) {
    for ch in 0..c {
        let inv = 1.0 / (var[ch] + eps).sqrt();
        let (g, mu) = (gamma[ch], mean[ch]);
        let mut sum_d = 0.0;
        let mut sum_d_dev = 0.0;
        for i in 0..n {
            let base = (i * c + ch) * spatial;
            let xs = &x[base..base + spatial];
            let ds = &dout[base..base + spatial];
            let dxs = &mut grads.dx[base..base + spatial];
            for ((&v, &dy), dxv) in xs.iter().zip(ds).zip(dxs.iter_mut()) {
                *dxv += dy * g * inv;
                sum_d += dy;
                sum_d_dev += dy * (v - mu);
            }
        }
        grads.dmean[ch] -= g * inv * sum_d;
        grads.dvar[ch] -= 0.5 * g * inv * inv * inv * sum_d_dev;
        grads.dgamma[ch] += inv * sum_d_dev;
        grads.dbeta[ch] += sum_d;
    }
}

/// 2x2 max pooling with stride 2. `argmax` receives, per output element,
/// the flat index into `x` of the winning input. Ties resolve to the first
/// maximum in row-major window order.
pub fn maxpool2_forward(
    x: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    out: &mut [f64],
    argmax: &mut [usize],
) {
    let (oh, ow) = (h / 2, w / 2);
    for i in 0..n {
        for ch in 0..c {
            let plane = (i * c + ch) * h * w;
            let out_plane = (i * c + ch) * oh * ow;
            for r in 0..oh {
                for q in 0..ow {
                    let mut best = plane + (2 * r) * w + 2 * q;
                    let mut best_v = x[best];
                    for (dy, dx_) in [(0usize, 1usize), (1, 0), (1, 1)] {
                        let idx = plane + (2 * r + dy) * w + 2 * q + dx_;
                        if x[idx] > best_v {
                            best_v = x[idx];
                            best = idx;
                        }
                    }
                    out[out_plane + r * ow + q] = best_v;
                    argmax[out_plane + r * ow + q] = best;
                }
            }
        }
    }
}

pub fn maxpool2_backward(dout: &[f64], argmax: &[usize], dx: &mut [f64]) {
    for (g, &idx) in dout.iter().zip(argmax) {
        dx[idx] += g;
    }
}

/// Fully connected layer: `out[n,k] = b[k] + sum_d x[n,d] * w[d,k]`.
/// Accumulation order: bias first, then ascending `d`.
pub fn dense_forward(x: &[f64], wt: &[f64], b: &[f64], n: usize, din: usize, k: usize, out: &mut [f64]) {
    for i in 0..n {
        let out_row = &mut out[i * k..][..k];
        out_row.copy_from_slice(b);
        let x_row = &x[i * din..][..din];
        for (d, &xv) in x_row.iter().enumerate() {
            let w_row = &wt[d * k..][..k];
            for (o, &wv) in out_row.iter_mut().zip(w_row) {
                *o += xv * wv;
            }
        }
    }
}

pub fn dense_backward_x(dout: &[f64], wt: &[f64], n: usize, din: usize, k: usize, dx: &mut [f64]) {
    for i in 0..n {
        let dout_row = &dout[i * k..][..k];
        let dx_row = &mut dx[i * din..][..din];
        for (d, dxv) in dx_row.iter_mut().enumerate() {
            let w_row = &wt[d * k..][..k];
            let mut acc = 0.0;
            for (&g, &wv) in dout_row.iter().zip(w_row) {
                acc += g * wv;
            }
            *dxv += acc;
        }
    }
}

pub fn dense_backward_w(x: &[f64], dout: &[f64], n: usize, din: usize, k: usize, dw: &mut [f64]) {
    for i in 0..n {
        let x_row = &x[i * din..][..din];
        let dout_row = &dout[i * k..][..k];
        for (d, &xv) in x_row.iter().enumerate() {
            let dw_row = &mut dw[d * k..][..k];
            for (dv, &g) in dw_row.iter_mut().zip(dout_row) {
                *dv += xv * g;
            }
        }
    }
}

pub fn dense_backward_b(dout: &[f64], n: usize, k: usize, db: &mut [f64]) {
    for i in 0..n {
        for (dv, &g) in db.iter_mut().zip(&dout[i * k..][..k]) {
            *dv += g;
        }
    }
}

/// Row-wise softmax cross-entropy with max-subtraction. Returns mean loss
/// over rows and fills `probs` with the softmax output.
pub fn softmax_xent_forward(
    logits: &[f64],
    targets: &[usize],
    n: usize,
    k: usize,
    probs: &mut [f64],
) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        let row = &logits[i * k..][..k];
        let p_row = &mut probs[i * k..][..k];
        let mut mx = row[0];
        for &v in &row[1..] {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = 0.0;
        for (&v, p) in row.iter().zip(p_row.iter_mut()) {
            let e = (v - mx).exp();
            *p = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for p in p_row.iter_mut() {
            *p *= inv;
        }
        total += -(row[targets[i]] - mx - sum.ln());
    }
    total / n as f64
}

pub fn softmax_xent_backward(
    probs: &[f64],
    targets: &[usize],
    n: usize,
    k: usize,
    dloss: f64,
    dlogits: &mut [f64],
) {
    let scale = dloss / n as f64;
    for i in 0..n {
        let p_row = &probs[i * k..][..k];
        let d_row = &mut dlogits[i * k..][..k];
        for (j, (dv, &p)) in d_row.iter_mut().zip(p_row).enumerate() {
            let indicator = if j == targets[i] { 1.0 } else { 0.0 };
            *dv += scale * (p - indicator);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, domain};

    /// Straight quadruple-loop convolution used as an oracle; deliberately
    /// shares no structure with the production kernel.
    fn naive_conv(d: &ConvDims, x: &[f64], wt: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; d.n * d.c_out * d.oh * d.ow];
        for n in 0..d.n {
            for f in 0..d.c_out {
                for oh in 0..d.oh {
                    for ow in 0..d.ow {
                        let mut acc = b[f];
                        for c in 0..d.c_in {
                            for kh in 0..d.kh {
                                for kw in 0..d.kw {
                                    let ih = (oh * d.stride + kh) as isize - d.pad as isize;
                                    let iw = (ow * d.stride + kw) as isize - d.pad as isize;
                                    if ih >= 0 && iw >= 0 && (ih as usize) < d.h && (iw as usize) < d.w {
                                        let xi = ((n * d.c_in + c) * d.h + ih as usize) * d.w
                                            + iw as usize;
                                        let wi = ((f * d.c_in + c) * d.kh + kh) * d.kw + kw;
                                        acc += x[xi] * wt[wi];
                                    }
                                }
                            }
                        }
                        out[((n * d.c_out + f) * d.oh + oh) * d.ow + ow] = acc;
                    }
                }
            }
        }
        out
    }

    fn randv(len: usize, tag: u64) -> Vec<f64> {
        let mut r = rng::stream(11, domain::SYNTH_DATA, &[tag]);
        (0..len).map(|_| rng::uniform_in(&mut r, -1.0, 1.0)).collect()
    }

    #[test]
    fn conv_matches_naive_oracle_padded_and_strided() {
        for &(h, w, kh, kw, stride, pad) in
            &[(5, 5, 3, 3, 1, 1), (6, 4, 3, 3, 1, 0), (8, 8, 5, 5, 1, 2), (7, 7, 3, 3, 2, 0)]
        {
            let d = ConvDims::infer(&[2, 3, h, w], &[4, 3, kh, kw], stride, pad).unwrap();
            let x = randv(2 * 3 * h * w, 1);
            let wt = randv(4 * 3 * kh * kw, 2);
            let b = randv(4, 3);
            let mut out = vec![0.0; d.n * d.c_out * d.oh * d.ow];
            conv2d_forward(&d, &x, &wt, &b, &mut out);
            let oracle = naive_conv(&d, &x, &wt, &b);
            for (a, e) in out.iter().zip(&oracle) {
                assert!((a - e).abs() < 1e-12, "{a} vs {e} for {d:?}");
            }
        }
    }

    #[test]
    fn conv_rejects_non_dividing_stride() {
        let err = ConvDims::infer(&[1, 1, 5, 5], &[1, 1, 2, 2], 2, 0).unwrap_err();
        assert!(err.to_string().contains("stride"), "{err}");
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let err = ConvDims::infer(&[1, 1, 3, 3], &[1, 1, 5, 5], 1, 0).unwrap_err();
        assert!(err.to_string().contains("larger than padded input"), "{err}");
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let d = ConvDims::infer(&[1, 1, 4, 4], &[1, 1, 1, 1], 1, 0).unwrap();
        let x = randv(16, 4);
        let mut out = vec![0.0; 16];
        conv2d_forward(&d, &x, &[1.0], &[0.0], &mut out);
        assert_eq!(out, x);
    }

    #[test]
    fn dense_matches_naive() {
        let (n, din, k) = (3, 7, 5);
        let x = randv(n * din, 5);
        let wt = randv(din * k, 6);
        let b = randv(k, 7);
        let mut out = vec![0.0; n * k];
        dense_forward(&x, &wt, &b, n, din, k, &mut out);
        for i in 0..n {
            for j in 0..k {
                let mut acc = b[j];
                for d in 0..din {
                    acc += x[i * din + d] * wt[d * k + j];
                }
                assert!((out[i * k + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn maxpool_picks_first_max_on_ties() {
        // All four window entries equal: the top-left index must win.
        let x = vec![2.0, 2.0, 2.0, 2.0];
        let mut out = vec![0.0; 1];
        let mut arg = vec![0usize; 1];
        maxpool2_forward(&x, 1, 1, 2, 2, &mut out, &mut arg);
        assert_eq!(out[0], 2.0);
        assert_eq!(arg[0], 0);
    }

    #[test]
    fn maxpool_constant_plane() {
        let x = vec![3.5; 1 * 1 * 4 * 4];
        let mut out = vec![0.0; 4];
        let mut arg = vec![0usize; 4];
        maxpool2_forward(&x, 1, 1, 4, 4, &mut out, &mut arg);
        assert!(out.iter().all(|&v| v == 3.5));
        // Winners are each window's row-major first element.
        assert_eq!(arg, vec![0, 2, 8, 10]);
    }

    #[test]
    fn softmax_uniform_logits() {
        let logits = vec![0.0; 2 * 4];
        let mut probs = vec![0.0; 8];
        let loss = softmax_xent_forward(&logits, &[1, 3], 2, 4, &mut probs);
        assert!((loss - (4.0f64).ln()).abs() < 1e-12);
        assert!(probs.iter().all(|&p| (p - 0.25).abs() < 1e-12));
    }

    #[test]
    fn softmax_shift_invariant() {
        let logits: Vec<f64> = vec![1.0, 2.0, 3.0];
        let shifted: Vec<f64> = logits.iter().map(|v| v + 1000.0).collect();
        let mut p1 = vec![0.0; 3];
        let mut p2 = vec![0.0; 3];
        let l1 = softmax_xent_forward(&logits, &[2], 1, 3, &mut p1);
        let l2 = softmax_xent_forward(&shifted, &[2], 1, 3, &mut p2);
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in p1.iter().zip(&p2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_stats_constant_input() {
        let x = vec![0.7; 2 * 3 * 4];
        let mut mean = vec![0.0; 3];
        let mut var = vec![0.0; 3];
        channel_mean(&x, 2, 3, 4, &mut mean);
        channel_var(&x, &mean, 2, 3, 4, &mut var);
        assert!(mean.iter().all(|&m| (m - 0.7).abs() < 1e-15));
        assert!(var.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn bn_affine_normalizes_exactly() {
        // Mean 2, population variance 1 over the channel; gamma 1 beta 0.
        let x = vec![1.0, 3.0, 2.0, 2.0];
        let mut out = vec![0.0; 4];
        bn_affine_forward(&x, &[2.0], &[1.0], &[1.0], &[0.0], 0.0, 1, 1, 4, &mut out).unwrap();
        assert_eq!(out, vec![-1.0, 1.0, 0.0, 0.0]);
    }
}
