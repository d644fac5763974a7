//! Forward and backward kernels over [`Tensor`].
//!
//! All kernels are pure functions of their arguments. Batched kernels split
//! work across samples with rayon; any cross-sample reduction is summed in
//! sample order so results are bitwise reproducible regardless of thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch mean and biased variance.
pub type BatchStats<T> = (Vec<T>, Vec<T>);

/// Input and weight gradients of a convolution, each only when requested.
pub type ConvGrads<T> = (Option<Tensor<T>>, Option<Tensor<T>>);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub groups: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, pad: usize, groups: usize) -> Self {
        ConvGeometry { stride: (stride, stride), pad: (pad, pad), groups }
    }

    /// Output spatial size for an `h × w` input and `kh × kw` kernel.
    pub fn output_size(&self, h: usize, w: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
        let span = |len: usize, pad: usize, k: usize, stride: usize, axis: &str| {
            if stride == 0 {
                return Err(Error::Shape(format!("conv2d stride along {axis} must be ≥ 1")));
            }
            let padded = len + 2 * pad;
            if padded < k {
                return Err(Error::Shape(format!("conv2d kernel {axis} {k} exceeds padded input {axis} {padded}")));
            }
            Ok((padded - k) / stride + 1)
        };
        Ok((span(h, self.pad.0, kh, self.stride.0, "height")?, span(w, self.pad.1, kw, self.stride.1, "width")?))
    }
}

struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_g: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv_dims<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, geom: ConvGeometry) -> Result<ConvDims> {
    let [n, cin, h, w] = input.dims4("conv2d input")?;
    let [cout, cin_g, kh, kw] = weight.dims4("conv2d weight")?;
    let g = geom.groups;
    if g == 0 || cin % g != 0 {
        return Err(Error::Shape(format!("conv2d input channels (axis 1) = {cin} not divisible by groups = {g}")));
    }
    if cout % g != 0 {
        return Err(Error::Shape(format!("conv2d output channels (weight axis 0) = {cout} not divisible by groups = {g}")));
    }
    if cin_g != cin / g {
        return Err(Error::Shape(format!("conv2d weight axis 1 = {cin_g} but input axis 1 / groups = {}", cin / g)));
    }
    let (oh, ow) = geom.output_size(h, w, kh, kw)?;
    Ok(ConvDims { n, cin, h, w, cout, cin_g, kh, kw, oh, ow })
}

/// Range of output columns whose input column `ox * stride + k - pad` lies in `0..len`.
fn valid_range(out_len: usize, len: usize, k: usize, pad: usize, stride: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if len + pad > k { (len + pad - k).div_ceil(stride).min(out_len) } else { 0 };
    (lo, hi.max(lo))
}

/// Direct 2-D cross-correlation. `groups == Cin` gives a depthwise convolution.
pub fn conv2d<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, geom: ConvGeometry) -> Result<Tensor<T>> {
    let d = conv_dims(input, weight, geom)?;
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.pad;
    let cout_g = d.cout / geom.groups;
    let in_plane = d.h * d.w;
    let out_plane = d.oh * d.ow;
    let wdata = weight.data();

    let per_sample: Vec<Vec<T>> = input
        .data()
        .par_chunks(d.cin * in_plane)
        .map(|x| {
            let mut out = vec![T::zero(); d.cout * out_plane];
            for co in 0..d.cout {
                let group = co / cout_g;
                let dst = &mut out[co * out_plane..(co + 1) * out_plane];
                for cig in 0..d.cin_g {
                    let ci = group * d.cin_g + cig;
                    let src = &x[ci * in_plane..(ci + 1) * in_plane];
                    for ky in 0..d.kh {
                        let (oy_lo, oy_hi) = valid_range(d.oh, d.h, ky, ph, sh);
                        for kx in 0..d.kw {
                            let wv = wdata[((co * d.cin_g + cig) * d.kh + ky) * d.kw + kx];
                            let (ox_lo, ox_hi) = valid_range(d.ow, d.w, kx, pw, sw);
                            for oy in oy_lo..oy_hi {
                                let iy = oy * sh + ky - ph;
                                let row = &src[iy * d.w..(iy + 1) * d.w];
                                let orow = &mut dst[oy * d.ow..(oy + 1) * d.ow];
                                if sw == 1 {
                                    let off = ox_lo + kx - pw;
                                    let n = ox_hi - ox_lo;
                                    for (o, &v) in orow[ox_lo..ox_hi].iter_mut().zip(&row[off..off + n]) {
                                        *o += wv * v;
                                    }
                                } else {
                                    for ox in ox_lo..ox_hi {
                                        orow[ox] += wv * row[ox * sw + kx - pw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            out
        })
        .collect();
    Tensor::new(vec![d.n, d.cout, d.oh, d.ow], per_sample.concat())
}

/// Gradients of [`conv2d`] with respect to its input and/or weight.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    geom: ConvGeometry,
    need_input: bool,
    need_weight: bool,
) -> Result<ConvGrads<T>> {
    let d = conv_dims(input, weight, geom)?;
    if grad_out.shape() != [d.n, d.cout, d.oh, d.ow] {
        return Err(Error::Shape(format!(
            "conv2d output gradient {:?} does not match output [{}, {}, {}, {}]",
            grad_out.shape(),
            d.n,
            d.cout,
            d.oh,
            d.ow
        )));
    }
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.pad;
    let cout_g = d.cout / geom.groups;
    let in_plane = d.h * d.w;
    let out_plane = d.oh * d.ow;
    let wdata = weight.data();
    let wlen = weight.numel();

    let per_sample: Vec<(Vec<T>, Vec<T>)> = input
        .data()
        .par_chunks(d.cin * in_plane)
        .zip(grad_out.data().par_chunks(d.cout * out_plane))
        .map(|(x, g)| {
            let mut gx = if need_input { vec![T::zero(); d.cin * in_plane] } else { Vec::new() };
            let mut gw = if need_weight { vec![T::zero(); wlen] } else { Vec::new() };
            for co in 0..d.cout {
                let group = co / cout_g;
                let gsrc = &g[co * out_plane..(co + 1) * out_plane];
                for cig in 0..d.cin_g {
                    let ci = group * d.cin_g + cig;
                    for ky in 0..d.kh {
                        let (oy_lo, oy_hi) = valid_range(d.oh, d.h, ky, ph, sh);
                        for kx in 0..d.kw {
                            let widx = ((co * d.cin_g + cig) * d.kh + ky) * d.kw + kx;
                            let wv = wdata[widx];
                            let (ox_lo, ox_hi) = valid_range(d.ow, d.w, kx, pw, sw);
                            let mut acc = T::zero();
                            for oy in oy_lo..oy_hi {
                                let iy = oy * sh + ky - ph;
                                let grow = &gsrc[oy * d.ow..(oy + 1) * d.ow];
                                let base = ci * in_plane + iy * d.w;
                                if need_input {
                                    let xrow = &mut gx[base..base + d.w];
                                    for ox in ox_lo..ox_hi {
                                        xrow[ox * sw + kx - pw] += wv * grow[ox];
                                    }
                                }
                                if need_weight {
                                    let xrow = &x[base..base + d.w];
                                    for ox in ox_lo..ox_hi {
                                        acc += xrow[ox * sw + kx - pw] * grow[ox];
                                    }
                                }
                            }
                            if need_weight {
                                gw[widx] += acc;
                            }
                        }
                    }
                }
            }
            (gx, gw)
        })
        .collect();

    let grad_input = if need_input {
        let flat: Vec<T> = per_sample.iter().flat_map(|(gx, _)| gx.iter().copied()).collect();
        Some(Tensor::new(input.shape().to_vec(), flat)?)
    } else {
        None
    };
    let grad_weight = if need_weight {
        let mut acc = vec![T::zero(); wlen];
        for (_, gw) in &per_sample {
            for (a, &v) in acc.iter_mut().zip(gw) {
                *a += v;
            }
        }
        Some(Tensor::new(weight.shape().to_vec(), acc)?)
    } else {
        None
    };
    Ok((grad_input, grad_weight))
}

/// How a batch-norm layer obtains its normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnMode {
    /// Batch statistics; the caller folds them into the running stats.
    Train,
    /// Batch statistics; running stats are neither read nor written.
    BatchStat,
    /// Stored running statistics (frozen inference).
    Running,
}

impl BnMode {
    pub fn uses_batch_stats(self) -> bool {
        !matches!(self, BnMode::Running)
    }
}

/// Batch-norm forward result plus what the backward pass needs.
#[derive(Debug, Clone)]
pub struct BnOutput<T: Real> {
    pub output: Tensor<T>,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    /// Per-channel batch mean and biased variance (batch-stat modes only).
    pub batch_stats: Option<BatchStats<T>>,
}

/// Per-channel batch normalization over `[N, C, H, W]`.
pub fn batch_norm<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: Option<(&[T], &[T])>,
    mode: BnMode,
    eps: f64,
) -> Result<BnOutput<T>> {
    let [n, c, h, w] = input.dims4("batchnorm input")?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::Shape(format!("batchnorm affine shapes {:?}/{:?} do not match channel axis {c}", gamma.shape(), beta.shape())));
    }
    if eps <= 0.0 {
        return Err(Error::Config("batchnorm eps must be > 0".into()));
    }
    let plane = h * w;
    let count = n * plane;
    if count == 0 {
        return Err(Error::Shape("batchnorm needs at least one element per channel".into()));
    }
    let x = input.data();

    let (mean, var, batch_stats) = if mode.uses_batch_stats() {
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for ch in 0..c {
            let mut s = 0.0f64;
            for b in 0..n {
                let off = (b * c + ch) * plane;
                s += x[off..off + plane].iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let m = s / count as f64;
            let mut sq = 0.0f64;
            for b in 0..n {
                let off = (b * c + ch) * plane;
                sq += x[off..off + plane].iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>();
            }
            mean[ch] = m;
            var[ch] = sq / count as f64;
        }
        let stats = (mean.iter().map(|&v| T::of(v)).collect(), var.iter().map(|&v| T::of(v)).collect());
        (mean, var, Some(stats))
    } else {
        let (rm, rv) = running.ok_or_else(|| Error::Config("batchnorm in Running mode requires initialized running statistics".into()))?;
        if rm.len() != c || rv.len() != c {
            return Err(Error::Shape(format!("running statistics length does not match channels {c}")));
        }
        (rm.iter().map(|v| v.as_f64()).collect::<Vec<_>>(), rv.iter().map(|v| v.as_f64()).collect(), None)
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::of(1.0 / (v + eps).sqrt())).collect();
    let mean_t: Vec<T> = mean.iter().map(|&m| T::of(m)).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    let (g, bt) = (gamma.data(), beta.data());
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                let xh = (x[i] - mean_t[ch]) * inv_std[ch];
                xhat[i] = xh;
                out[i] = g[ch] * xh + bt[ch];
            }
        }
    }
    Ok(BnOutput {
        output: Tensor::new(input.shape().to_vec(), out)?,
        xhat: Tensor::new(input.shape().to_vec(), xhat)?,
        inv_std,
        batch_stats,
    })
}

/// Gradients of [`batch_norm`]: `(d_input, d_gamma, d_beta)`.
///
/// In batch-stat modes the input gradient includes the paths through the
/// batch mean and variance.
pub fn batch_norm_backward<T: Real>(
    grad_out: &Tensor<T>,
    xhat: &Tensor<T>,
    gamma: &Tensor<T>,
    inv_std: &[T],
    batch_stats: bool,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [n, c, h, w] = grad_out.dims4("batchnorm output gradient")?;
    if xhat.shape() != grad_out.shape() {
        return Err(Error::Shape("batchnorm gradient/activation shape mismatch".into()));
    }
    let plane = h * w;
    let m = T::of((n * plane) as f64);
    let (dy, xh, g) = (grad_out.data(), xhat.data(), gamma.data());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                dbeta[ch] += dy[i];
                dgamma[ch] += dy[i] * xh[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let scale = g[ch] * inv_std[ch];
            if batch_stats {
                for i in off..off + plane {
                    dx[i] = scale / m * (m * dy[i] - dbeta[ch] - xh[i] * dgamma[ch]);
                }
            } else {
                for i in off..off + plane {
                    dx[i] = scale * dy[i];
                }
            }
        }
    }
    Ok((Tensor::new(grad_out.shape().to_vec(), dx)?, Tensor::vector(dgamma), Tensor::vector(dbeta)))
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = input.data().iter().zip(grad_out.data()).map(|(&x, &g)| if x > T::zero() { g } else { T::zero() }).collect();
    Tensor { shape: input.shape().to_vec(), data }
}

/// Mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.dims4("global pool input")?;
    let plane = h * w;
    let denom = T::of(plane as f64);
    let data = input.data().chunks(plane).map(|p| p.iter().copied().sum::<T>() / denom).collect();
    Tensor::new(vec![n, c], data)
}

pub fn global_avg_pool_backward<T: Real>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let plane: usize = input_shape[2..].iter().product();
    let denom = T::of(plane as f64);
    let data = grad_out.data().iter().flat_map(|&g| std::iter::repeat_n(g / denom, plane)).collect();
    Tensor::new(input_shape.to_vec(), data)
}

/// Affine layer `y = x Wᵀ + b` with `x: [N, F]`, `W: [O, F]`, `b: [O]`.
pub fn linear<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, f] = input.dims2("linear input")?;
    let [o, fw] = weight.dims2("linear weight")?;
    if f != fw {
        return Err(Error::Shape(format!("linear input features (axis 1) = {f} but weight inner dim (axis 1) = {fw}")));
    }
    if bias.shape() != [o] {
        return Err(Error::Shape(format!("linear bias {:?} does not match outputs {o}", bias.shape())));
    }
    let (x, wd, bd) = (input.data(), weight.data(), bias.data());
    let mut out = Vec::with_capacity(n * o);
    for row in x.chunks(f) {
        for j in 0..o {
            let wrow = &wd[j * f..(j + 1) * f];
            out.push(bd[j] + row.iter().zip(wrow).map(|(&a, &b)| a * b).sum::<T>());
        }
    }
    Tensor::new(vec![n, o], out)
}

/// Gradients of [`linear`]: `(d_input, d_weight, d_bias)`.
pub fn linear_backward<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, grad_out: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [n, f] = input.dims2("linear input")?;
    let [o, _] = weight.dims2("linear weight")?;
    if grad_out.shape() != [n, o] {
        return Err(Error::Shape(format!("linear output gradient {:?} != [{n}, {o}]", grad_out.shape())));
    }
    let (x, wd, g) = (input.data(), weight.data(), grad_out.data());
    let mut dx = vec![T::zero(); n * f];
    let mut dw = vec![T::zero(); o * f];
    let mut db = vec![T::zero(); o];
    for i in 0..n {
        for j in 0..o {
            let gij = g[i * o + j];
            db[j] += gij;
            for k in 0..f {
                dx[i * f + k] += gij * wd[j * f + k];
                dw[j * f + k] += gij * x[i * f + k];
            }
        }
    }
    Ok((Tensor::new(vec![n, f], dx)?, Tensor::new(vec![o, f], dw)?, Tensor::vector(db)))
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, c] = logits.dims2("logits")?;
    let mut out = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
        out.extend(row.iter().map(|&z| z - max - lse));
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Softmax probabilities and per-row Shannon entropy (natural log).
///
/// Returns `(probs [N, C], log_probs [N, C], entropy [N])`.
pub fn softmax_entropy<T: Real>(logits: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [_, c] = logits.dims2("logits")?;
    if c < 2 {
        return Err(Error::Shape(format!("softmax entropy needs at least 2 classes, got {c}")));
    }
    let log_probs = log_softmax(logits)?;
    let probs = log_probs.map(|v| v.exp());
    let entropy = probs
        .data()
        .chunks(c)
        .zip(log_probs.data().chunks(c))
        .map(|(p, lp)| -p.iter().zip(lp).map(|(&p, &lp)| p * lp).sum::<T>())
        .collect();
    Ok((probs, log_probs, Tensor::vector(entropy)))
}

/// `∂(Σ_i g_i H_i)/∂z_ik = -g_i · p_ik (ln p_ik + H_i)`.
pub fn softmax_entropy_backward<T: Real>(
    probs: &Tensor<T>,
    log_probs: &Tensor<T>,
    entropy: &Tensor<T>,
    grad_entropy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [n, c] = probs.dims2("probs")?;
    if grad_entropy.numel() != n || entropy.numel() != n {
        return Err(Error::Shape("entropy gradient length does not match batch".into()));
    }
    let mut out = Vec::with_capacity(n * c);
    for i in 0..n {
        let (g, h) = (grad_entropy.data()[i], entropy.data()[i]);
        for k in 0..c {
            let p = probs.data()[i * c + k];
            out.push(-g * p * (log_probs.data()[i * c + k] + h));
        }
    }
    Tensor::new(vec![n, c], out)
}

/// Mean cross-entropy against label-smoothed targets.
///
/// Target distribution per row is `(1 - ε)·onehot + ε / C`. Returns
/// `(loss, probs)`.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, targets: &[usize], smoothing: f64) -> Result<(T, Tensor<T>)> {
    let [n, c] = logits.dims2("logits")?;
    if targets.len() != n {
        return Err(Error::Shape(format!("{} targets for batch of {n}", targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::Shape(format!("target {bad} out of range for {c} classes")));
    }
    let lp = log_softmax(logits)?;
    let off = T::of(smoothing / c as f64);
    let on = T::of(1.0 - smoothing) + off;
    let mut total = T::zero();
    for (i, &t) in targets.iter().enumerate() {
        let row = &lp.data()[i * c..(i + 1) * c];
        let mut li = T::zero();
        for (k, &v) in row.iter().enumerate() {
            li -= if k == t { on } else { off } * v;
        }
        total += li;
    }
    Ok((total / T::of(n as f64), lp.map(|v| v.exp())))
}

pub fn cross_entropy_backward<T: Real>(probs: &Tensor<T>, targets: &[usize], smoothing: f64, grad: T) -> Result<Tensor<T>> {
    let [n, c] = probs.dims2("probs")?;
    let off = T::of(smoothing / c as f64);
    let on = T::of(1.0 - smoothing) + off;
    let scale = grad / T::of(n as f64);
    let mut out = probs.data().to_vec();
    for (i, &t) in targets.iter().enumerate() {
        for k in 0..c {
            let q = if k == t { on } else { off };
            out[i * c + k] = (out[i * c + k] - q) * scale;
        }
    }
    Tensor::new(vec![n, c], out)
}

/// Index of the largest entry per row; ties resolve to the lowest index.
pub fn argmax_rows<T: Real>(t: &Tensor<T>) -> Result<Vec<usize>> {
    let [_, c] = t.dims2("argmax input")?;
    Ok(t.data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect())
}
