//! Forward/backward kernels for the fixed layer vocabulary.
//!
//! Channel masks are row-major `batch x channels` boolean slices; `None`
//! means every channel is active. Masked-out output channels are produced as
//! exact zeros and masked-out input channels are skipped entirely, which is
//! what makes the FLOP counter reflect the work actually done.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Geometry of one convolution applied to a concrete input size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        in_h: usize,
        in_w: usize,
    ) -> Result<Self> {
        let extent = |n: usize| {
            let padded = n + 2 * padding;
            (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
        };
        match (extent(in_h), extent(in_w)) {
            (Some(out_h), Some(out_w)) => Ok(Self {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                in_h,
                in_w,
                out_h,
                out_w,
            }),
            _ => Err(Error::Structural(format!(
                "{kernel}x{kernel} kernel does not fit {in_h}x{in_w} input"
            ))),
        }
    }

    fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    /// FLOPs for one (input channel, output channel) plane pair.
    pub fn pair_flops(&self) -> u64 {
        2 * (self.kernel * self.kernel * self.out_h * self.out_w) as u64
    }
}

/// Output indices `o` with `0 <= o*stride + k - pad < len`.
fn valid_range(k: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if len + pad <= k {
        0
    } else {
        ((len - 1 + pad - k) / stride + 1).min(out_len)
    };
    (lo.min(hi), hi)
}

#[inline]
fn active(mask: Option<&[bool]>, idx: usize) -> bool {
    mask.is_none_or(|m| m[idx])
}

/// Unfolds the active input channels of one sample into rows of
/// `out_h * out_w` values, one row per (channel, kernel offset).
fn im2col(input: &[f64], g: &ConvGeom, mask: Option<&[bool]>, cols: &mut [f64]) {
    let k = g.kernel;
    let plane = g.out_h * g.out_w;
    let in_plane = g.in_h * g.in_w;
    for ic in 0..g.in_channels {
        if !active(mask, ic) {
            continue;
        }
        let inp = &input[ic * in_plane..][..in_plane];
        for kh in 0..k {
            let (oh0, oh1) = valid_range(kh, g.padding, g.stride, g.in_h, g.out_h);
            for kw in 0..k {
                let (ow0, ow1) = valid_range(kw, g.padding, g.stride, g.in_w, g.out_w);
                let row = &mut cols[((ic * k + kh) * k + kw) * plane..][..plane];
                row.fill(0.0);
                for oh in oh0..oh1 {
                    let ih = oh * g.stride + kh - g.padding;
                    let src = &inp[ih * g.in_w..][..g.in_w];
                    let dst = &mut row[oh * g.out_w..][..g.out_w];
                    for ow in ow0..ow1 {
                        dst[ow] = src[ow * g.stride + kw - g.padding];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters row gradients back onto the input planes.
fn col2im(dcols: &[f64], g: &ConvGeom, mask: Option<&[bool]>, dinput: &mut [f64]) {
    let k = g.kernel;
    let plane = g.out_h * g.out_w;
    let in_plane = g.in_h * g.in_w;
    for ic in 0..g.in_channels {
        if !active(mask, ic) {
            continue;
        }
        let dx = &mut dinput[ic * in_plane..][..in_plane];
        for kh in 0..k {
            let (oh0, oh1) = valid_range(kh, g.padding, g.stride, g.in_h, g.out_h);
            for kw in 0..k {
                let (ow0, ow1) = valid_range(kw, g.padding, g.stride, g.in_w, g.out_w);
                let row = &dcols[((ic * k + kh) * k + kw) * plane..][..plane];
                for oh in oh0..oh1 {
                    let ih = oh * g.stride + kh - g.padding;
                    let dst = &mut dx[ih * g.in_w..][..g.in_w];
                    let src = &row[oh * g.out_w..][..g.out_w];
                    for ow in ow0..ow1 {
                        dst[ow * g.stride + kw - g.padding] += src[ow];
                    }
                }
            }
        }
    }
}

/// `y += sum_i w[i] * xs[i]`, four rows per pass over `y`.
fn accumulate_rows(y: &mut [f64], w: &[f64], xs: &[&[f64]]) {
    let n = y.len();
    let mut i = 0;
    while i + 4 <= xs.len() {
        let (a, b, c, d) = (&xs[i][..n], &xs[i + 1][..n], &xs[i + 2][..n], &xs[i + 3][..n]);
        let (wa, wb, wc, wd) = (w[i], w[i + 1], w[i + 2], w[i + 3]);
        for p in 0..n {
            y[p] += (wa * a[p] + wb * b[p]) + (wc * c[p] + wd * d[p]);
        }
        i += 4;
    }
    for (x, &wv) in xs[i..].iter().zip(&w[i..]) {
        for (yv, xv) in y.iter_mut().zip(&x[..n]) {
            *yv += wv * xv;
        }
    }
}

/// Dot product with two interleaved partial sums.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (mut s0, mut s1) = (0.0, 0.0);
    let mut p = 0;
    while p + 2 <= n {
        s0 += a[p] * b[p];
        s1 += a[p + 1] * b[p + 1];
        p += 2;
    }
    if p < n {
        s0 += a[p] * b[p];
    }
    s0 + s1
}

/// Row indices of the unfolded input that belong to active channels.
fn active_rows(in_channels: usize, kk: usize, mask: Option<&[bool]>) -> Vec<usize> {
    (0..in_channels)
        .filter(|&ic| active(mask, ic))
        .flat_map(|ic| ic * kk..(ic + 1) * kk)
        .collect()
}

/// Direct convolution restricted to active channels. Returns the output and
/// the number of FLOPs performed.
pub fn conv_forward(
    x: &Tensor,
    weight: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeom,
    out_mask: Option<&[bool]>,
    in_mask: Option<&[bool]>,
) -> Result<(Tensor, u64)> {
    let batch = x.shape()[0];
    if x.shape() != [batch, g.in_channels, g.in_h, g.in_w] || weight.len() != g.weight_len() {
        return Err(Error::Structural(format!(
            "conv input {:?} / weight {} do not match geometry {g:?}",
            x.shape(),
            weight.len()
        )));
    }
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let kk = g.kernel * g.kernel;
    let mut out = Tensor::zeros(&[batch, g.out_channels, g.out_h, g.out_w]);
    let mut cols = vec![0.0; g.in_channels * kk * out_plane];
    let mut flops = 0u64;
    let xd = x.data();
    let od = out.data_mut();
    let mut w = Vec::with_capacity(g.in_channels * kk);
    for b in 0..batch {
        let in_row = in_mask.map(|m| &m[b * g.in_channels..][..g.in_channels]);
        im2col(&xd[b * g.in_channels * in_plane..][..g.in_channels * in_plane], g, in_row, &mut cols);
        let rows = active_rows(g.in_channels, kk, in_row);
        let srcs: Vec<&[f64]> = rows.iter().map(|&r| &cols[r * out_plane..][..out_plane]).collect();
        let pairs = (rows.len() / kk) as u64;
        for oc in 0..g.out_channels {
            if !active(out_mask, b * g.out_channels + oc) {
                continue;
            }
            let o = &mut od[(b * g.out_channels + oc) * out_plane..][..out_plane];
            if let Some(bias) = bias {
                o.iter_mut().for_each(|v| *v = bias[oc]);
            }
            let ker = &weight[oc * g.in_channels * kk..][..g.in_channels * kk];
            w.clear();
            w.extend(rows.iter().map(|&r| ker[r]));
            accumulate_rows(o, &w, &srcs);
            flops += pairs * g.pair_flops();
        }
    }
    Ok((out, flops))
}

/// Backward of [`conv_forward`]. Gradients are accumulated into `dweight` /
/// `dbias`; the returned input gradient is zero on inactive input channels.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    x: &Tensor,
    weight: &[f64],
    g: &ConvGeom,
    dout: &Tensor,
    out_mask: Option<&[bool]>,
    in_mask: Option<&[bool]>,
    dweight: &mut [f64],
    mut dbias: Option<&mut [f64]>,
) -> Tensor {
    let batch = x.shape()[0];
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let kk = g.kernel * g.kernel;
    let mut dx = Tensor::zeros(x.shape());
    let mut cols = vec![0.0; g.in_channels * kk * out_plane];
    let mut dcols = vec![0.0; g.in_channels * kk * out_plane];
    let xd = x.data();
    let dd = dout.data();
    let dxd = dx.data_mut();
    let row_len = g.in_channels * kk;
    let mut w = Vec::with_capacity(g.out_channels);
    for b in 0..batch {
        let in_row = in_mask.map(|m| &m[b * g.in_channels..][..g.in_channels]);
        im2col(&xd[b * g.in_channels * in_plane..][..g.in_channels * in_plane], g, in_row, &mut cols);
        let rows = active_rows(g.in_channels, kk, in_row);
        let outs: Vec<usize> = (0..g.out_channels)
            .filter(|&oc| active(out_mask, b * g.out_channels + oc))
            .collect();
        let douts: Vec<&[f64]> = outs
            .iter()
            .map(|&oc| &dd[(b * g.out_channels + oc) * out_plane..][..out_plane])
            .collect();
        for (&oc, d) in outs.iter().zip(&douts) {
            if let Some(db) = dbias.as_deref_mut() {
                db[oc] += d.iter().sum::<f64>();
            }
            let dker = &mut dweight[oc * row_len..][..row_len];
            for &r in &rows {
                dker[r] += dot(d, &cols[r * out_plane..][..out_plane]);
            }
        }
        for &r in &rows {
            w.clear();
            w.extend(outs.iter().map(|&oc| weight[oc * row_len + r]));
            let dst = &mut dcols[r * out_plane..][..out_plane];
            dst.fill(0.0);
            accumulate_rows(dst, &w, &douts);
        }
        col2im(&dcols, g, in_row, &mut dxd[b * g.in_channels * in_plane..][..g.in_channels * in_plane]);
    }
    dx
}

/// `y = x W^T + b` for `x: batch x in`, `W: out x in`.
pub fn linear_forward(x: &Tensor, weight: &Tensor, bias: &[f64]) -> Result<(Tensor, u64)> {
    let [batch, inf] = x.shape() else {
        return Err(Error::Structural(format!("linear input must be 2-D, got {:?}", x.shape())));
    };
    let (batch, inf) = (*batch, *inf);
    let outf = weight.shape()[0];
    if weight.shape() != [outf, inf] || bias.len() != outf {
        return Err(Error::Structural(format!(
            "linear weight {:?} does not match input width {inf}",
            weight.shape()
        )));
    }
    let mut y = Tensor::zeros(&[batch, outf]);
    let w = weight.data();
    for b in 0..batch {
        let xr = &x.data()[b * inf..][..inf];
        for o in 0..outf {
            let wr = &w[o * inf..][..inf];
            let mut acc = bias[o];
            for (a, c) in wr.iter().zip(xr) {
                acc += a * c;
            }
            y.data_mut()[b * outf + o] = acc;
        }
    }
    Ok((y, (2 * inf * outf * batch) as u64))
}

pub fn linear_backward(
    x: &Tensor,
    weight: &Tensor,
    dy: &Tensor,
    dweight: &mut [f64],
    dbias: &mut [f64],
) -> Tensor {
    let (batch, inf) = (x.shape()[0], x.shape()[1]);
    let outf = weight.shape()[0];
    let mut dx = Tensor::zeros(x.shape());
    for b in 0..batch {
        let xr = &x.data()[b * inf..][..inf];
        for o in 0..outf {
            let g = dy.data()[b * outf + o];
            dbias[o] += g;
            let wr = &weight.data()[o * inf..][..inf];
            let dwr = &mut dweight[o * inf..][..inf];
            for i in 0..inf {
                dwr[i] += g * xr[i];
            }
            let dxr = &mut dx.data_mut()[b * inf..][..inf];
            for i in 0..inf {
                dxr[i] += g * wr[i];
            }
        }
    }
    dx
}

/// Saved state of a batch-normalization forward pass.
#[derive(Clone, Debug)]
pub struct NormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    /// Number of normalized elements per channel (zero when no sample kept it).
    pub count: Vec<usize>,
    pub train: bool,
}

/// Batch statistics for a running-average update. `None` for channels no
/// sample kept.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<Option<f64>>,
    pub var_unbiased: Vec<Option<f64>>,
}

/// Training-mode batch normalization over the masked-in (sample, channel)
/// planes only. Masked-out planes are output as zeros.
pub fn norm_forward_train(
    z: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    mask: Option<&[bool]>,
) -> (Tensor, NormCache, BatchStats) {
    let [batch, c, h, w] = dims4(z);
    let plane = h * w;
    let mut out = Tensor::zeros(z.shape());
    let mut xhat = Tensor::zeros(z.shape());
    let mut inv_std = vec![0.0; c];
    let mut count = vec![0usize; c];
    let mut stats = BatchStats {
        mean: vec![None; c],
        var_unbiased: vec![None; c],
    };
    let zd = z.data();
    for ch in 0..c {
        let mut sum = 0.0;
        let mut n = 0usize;
        for b in 0..batch {
            if active(mask, b * c + ch) {
                sum += zd[(b * c + ch) * plane..][..plane].iter().sum::<f64>();
                n += plane;
            }
        }
        if n == 0 {
            continue;
        }
        let mean = sum / n as f64;
        let mut sq = 0.0;
        for b in 0..batch {
            if active(mask, b * c + ch) {
                for v in &zd[(b * c + ch) * plane..][..plane] {
                    sq += (v - mean) * (v - mean);
                }
            }
        }
        let var = sq / n as f64;
        let istd = 1.0 / (var + BN_EPS).sqrt();
        inv_std[ch] = istd;
        count[ch] = n;
        stats.mean[ch] = Some(mean);
        stats.var_unbiased[ch] = Some(if n > 1 { sq / (n - 1) as f64 } else { var });
        for b in 0..batch {
            if active(mask, b * c + ch) {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    let xh = (zd[i] - mean) * istd;
                    xhat.data_mut()[i] = xh;
                    out.data_mut()[i] = gamma[ch] * xh + beta[ch];
                }
            }
        }
    }
    (
        out,
        NormCache {
            xhat,
            inv_std,
            count,
            train: true,
        },
        stats,
    )
}

pub fn norm_forward_eval(
    z: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    mask: Option<&[bool]>,
) -> (Tensor, NormCache) {
    let [batch, c, h, w] = dims4(z);
    let plane = h * w;
    let mut out = Tensor::zeros(z.shape());
    let mut xhat = Tensor::zeros(z.shape());
    let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut count = vec![0usize; c];
    for b in 0..batch {
        for ch in 0..c {
            if !active(mask, b * c + ch) {
                continue;
            }
            count[ch] += plane;
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                let xh = (z.data()[i] - running_mean[ch]) * inv_std[ch];
                xhat.data_mut()[i] = xh;
                out.data_mut()[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    (
        out,
        NormCache {
            xhat,
            inv_std,
            count,
            train: false,
        },
    )
}

pub fn norm_backward(
    du: &Tensor,
    cache: &NormCache,
    gamma: &[f64],
    mask: Option<&[bool]>,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Tensor {
    let [batch, c, h, w] = dims4(du);
    let plane = h * w;
    let mut dz = Tensor::zeros(du.shape());
    let dd = du.data();
    let xh = cache.xhat.data();
    for ch in 0..c {
        if cache.count[ch] == 0 {
            continue;
        }
        let mut sum_d = 0.0;
        let mut sum_dx = 0.0;
        for b in 0..batch {
            if active(mask, b * c + ch) {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    sum_d += dd[i];
                    sum_dx += dd[i] * xh[i];
                }
            }
        }
        dgamma[ch] += sum_dx;
        dbeta[ch] += sum_d;
        let scale = gamma[ch] * cache.inv_std[ch];
        let n = cache.count[ch] as f64;
        for b in 0..batch {
            if active(mask, b * c + ch) {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    dz.data_mut()[i] = if cache.train {
                        scale * (dd[i] - sum_d / n - xh[i] * sum_dx / n)
                    } else {
                        scale * dd[i]
                    };
                }
            }
        }
    }
    dz
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0
        }
    });
    y
}

/// `dy` masked by `x > 0`, where `x` is the ReLU input.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

pub fn avgpool_forward(x: &Tensor, size: usize) -> Tensor {
    let [batch, c, h, w] = dims4(x);
    let (oh, ow) = (h / size, w / size);
    let mut y = Tensor::zeros(&[batch, c, oh, ow]);
    let inv = 1.0 / (size * size) as f64;
    for bc in 0..batch * c {
        let src = &x.data()[bc * h * w..][..h * w];
        let dst = &mut y.data_mut()[bc * oh * ow..][..oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for di in 0..size {
                    for dj in 0..size {
                        acc += src[(i * size + di) * w + j * size + dj];
                    }
                }
                dst[i * ow + j] = acc * inv;
            }
        }
    }
    y
}

pub fn avgpool_backward(in_shape: &[usize], dy: &Tensor, size: usize) -> Tensor {
    let (batch, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (h / size, w / size);
    let mut dx = Tensor::zeros(in_shape);
    let inv = 1.0 / (size * size) as f64;
    for bc in 0..batch * c {
        let src = &dy.data()[bc * oh * ow..][..oh * ow];
        let dst = &mut dx.data_mut()[bc * h * w..][..h * w];
        for i in 0..oh {
            for j in 0..ow {
                let g = src[i * ow + j] * inv;
                for di in 0..size {
                    for dj in 0..size {
                        dst[(i * size + di) * w + j * size + dj] = g;
                    }
                }
            }
        }
    }
    dx
}

/// Spatial mean per (sample, channel): `batch x C x H x W -> batch x C`.
pub fn spatial_mean(x: &Tensor) -> Tensor {
    let [batch, c, h, w] = dims4(x);
    let plane = h * w;
    let data = x
        .data()
        .chunks(plane)
        .map(|p| p.iter().sum::<f64>() / plane as f64)
        .collect();
    Tensor::new(vec![batch, c], data).expect("spatial mean shape")
}

/// Spreads `batch x C` gradients uniformly back over `H x W`.
pub fn spatial_mean_backward(in_shape: &[usize], dy: &Tensor) -> Tensor {
    let plane = in_shape[2] * in_shape[3];
    let inv = 1.0 / plane as f64;
    let mut dx = Tensor::zeros(in_shape);
    for (chunk, &g) in dx.data_mut().chunks_mut(plane).zip(dy.data()) {
        chunk.iter_mut().for_each(|v| *v = g * inv);
    }
    dx
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let [batch, classes] = logits.shape() else {
        return Err(Error::Structural(format!(
            "logits must be batch x classes, got {:?}",
            logits.shape()
        )));
    };
    let (batch, classes) = (*batch, *classes);
    if labels.len() != batch {
        return Err(Error::Structural(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Structural(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(&[batch, classes]);
    let inv_b = 1.0 / batch as f64;
    for (b, &label) in labels.iter().enumerate() {
        let row = &logits.data()[b * classes..][..classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[label];
        let g = &mut grad.data_mut()[b * classes..][..classes];
        for (k, gv) in g.iter_mut().enumerate() {
            *gv = ((row[k] - lse).exp() - if k == label { 1.0 } else { 0.0 }) * inv_b;
        }
    }
    let loss = loss * inv_b;
    if !loss.is_finite() {
        return Err(Error::Numeric("cross-entropy is not finite".into()));
    }
    Ok((loss, grad))
}

pub(crate) fn dims4(t: &Tensor) -> [usize; 4] {
    let s = t.shape();
    [s[0], s[1], s[2], s[3]]
}
