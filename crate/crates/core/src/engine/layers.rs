//! Forward and backward kernels for the individual layer types.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::BatchTensor;
use crate::arch::Padding;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Zero-pads along the length axis.
pub fn pad_length(x: &BatchTensor, left: usize, right: usize) -> BatchTensor {
    if left == 0 && right == 0 {
        return x.clone();
    }
    let c = x.channels;
    let len = x.length + left + right;
    let mut out = BatchTensor::zeros(x.batch, len, c);
    for n in 0..x.batch {
        let src = x.sample(n);
        let dst = &mut out.data[n * len * c..(n + 1) * len * c];
        dst[left * c..(left + x.length) * c].copy_from_slice(src);
    }
    out
}

/// Inverse of [`pad_length`] for gradients.
pub fn crop_length(x: &BatchTensor, left: usize, right: usize) -> BatchTensor {
    if left == 0 && right == 0 {
        return x.clone();
    }
    let c = x.channels;
    let len = x.length - left - right;
    let mut out = BatchTensor::zeros(x.batch, len, c);
    for n in 0..x.batch {
        let src = &x.sample(n)[left * c..(left + len) * c];
        out.data[n * len * c..(n + 1) * len * c].copy_from_slice(src);
    }
    out
}

/// Valid convolution over an already padded input. `w` is `[c_out][kernel][c_in]`.
pub fn conv_forward(xp: &BatchTensor, w: &[f64], b: &[f64], kernel: usize, stride: usize, c_out: usize) -> BatchTensor {
    let c_in = xp.channels;
    let out_len = (xp.length - kernel) / stride + 1;
    let window = kernel * c_in;
    let mut out = BatchTensor::zeros(xp.batch, out_len, c_out);
    out.data.par_chunks_mut(out_len * c_out).enumerate().for_each(|(n, y)| {
        let x = xp.sample(n);
        for t in 0..out_len {
            let win = &x[t * stride * c_in..t * stride * c_in + window];
            let row = &mut y[t * c_out..(t + 1) * c_out];
            for (o, yo) in row.iter_mut().enumerate() {
                *yo = b[o] + dot(&w[o * window..(o + 1) * window], win);
            }
        }
    });
    out
}

/// Returns (d input (padded), d weights, d bias).
pub fn conv_backward(
    xp: &BatchTensor,
    dy: &BatchTensor,
    w: &[f64],
    kernel: usize,
    stride: usize,
) -> (BatchTensor, Vec<f64>, Vec<f64>) {
    let c_in = xp.channels;
    let c_out = dy.channels;
    let out_len = dy.length;
    let window = kernel * c_in;

    let mut dxp = BatchTensor::zeros(xp.batch, xp.length, c_in);
    dxp.data
        .par_chunks_mut(xp.length * c_in)
        .enumerate()
        .for_each(|(n, dx)| {
            let g = dy.sample(n);
            for t in 0..out_len {
                let dwin = &mut dx[t * stride * c_in..t * stride * c_in + window];
                for o in 0..c_out {
                    let go = g[t * c_out + o];
                    if go != 0.0 {
                        axpy(dwin, go, &w[o * window..(o + 1) * window]);
                    }
                }
            }
        });

    let mut dw = vec![0.0; c_out * window];
    dw.par_chunks_mut(window).enumerate().for_each(|(o, dwo)| {
        for n in 0..xp.batch {
            let x = xp.sample(n);
            let g = dy.sample(n);
            for t in 0..out_len {
                let go = g[t * c_out + o];
                if go != 0.0 {
                    axpy(dwo, go, &x[t * stride * c_in..t * stride * c_in + window]);
                }
            }
        }
    });

    let mut db = vec![0.0; c_out];
    for n in 0..dy.batch {
        for row in dy.sample(n).chunks_exact(c_out) {
            for (d, g) in db.iter_mut().zip(row) {
                *d += g;
            }
        }
    }
    (dxp, dw, db)
}

/// Per-channel statistics of one training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    /// Biased variance.
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// Number of reduced positions (batch × length).
    pub count: usize,
}

pub fn bn_batch_stats(x: &BatchTensor, eps: f64) -> BnBatchStats {
    let c = x.channels;
    let count = x.batch * x.length;
    let mut mean = vec![0.0; c];
    for row in x.data.chunks_exact(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut var = vec![0.0; c];
    for row in x.data.chunks_exact(c) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= count as f64);
    let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    BnBatchStats {
        mean,
        var,
        inv_std,
        count,
    }
}

/// Normalizes with batch statistics.
pub fn bn_train_forward(x: &BatchTensor, gamma: &[f64], beta: &[f64], eps: f64) -> (BatchTensor, BnBatchStats) {
    let stats = bn_batch_stats(x, eps);
    let y = bn_apply(x, gamma, beta, &stats.mean, &stats.inv_std);
    (y, stats)
}

/// Normalizes with running statistics.
pub fn bn_eval_forward(
    x: &BatchTensor,
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> BatchTensor {
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    bn_apply(x, gamma, beta, mean, &inv)
}

fn bn_apply(x: &BatchTensor, gamma: &[f64], beta: &[f64], mean: &[f64], inv: &[f64]) -> BatchTensor {
    let c = x.channels;
    let mut y = x.clone();
    for row in y.data.chunks_exact_mut(c) {
        for i in 0..c {
            row[i] = gamma[i] * (row[i] - mean[i]) * inv[i] + beta[i];
        }
    }
    y
}

/// Returns (dx, dγ, dβ) through the batch-statistics normalization.
pub fn bn_backward(
    x: &BatchTensor,
    dy: &BatchTensor,
    gamma: &[f64],
    stats: &BnBatchStats,
) -> (BatchTensor, Vec<f64>, Vec<f64>) {
    let c = x.channels;
    let m = stats.count as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (xr, gr) in x.data.chunks_exact(c).zip(dy.data.chunks_exact(c)) {
        for i in 0..c {
            let xhat = (xr[i] - stats.mean[i]) * stats.inv_std[i];
            dgamma[i] += gr[i] * xhat;
            dbeta[i] += gr[i];
        }
    }
    let mut dx = BatchTensor::zeros(x.batch, x.length, c);
    for ((dr, xr), gr) in dx
        .data
        .chunks_exact_mut(c)
        .zip(x.data.chunks_exact(c))
        .zip(dy.data.chunks_exact(c))
    {
        for i in 0..c {
            let xhat = (xr[i] - stats.mean[i]) * stats.inv_std[i];
            dr[i] = gamma[i] * stats.inv_std[i] / m * (m * gr[i] - dbeta[i] - xhat * dgamma[i]);
        }
    }
    (dx, dgamma, dbeta)
}

pub fn relu_forward(x: &BatchTensor) -> BatchTensor {
    let mut y = x.clone();
    y.data.iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

/// Gradient through ReLU given its output.
pub fn relu_backward(y: &BatchTensor, dy: &BatchTensor) -> BatchTensor {
    let mut dx = dy.clone();
    for (d, &o) in dx.data.iter_mut().zip(&y.data) {
        if o <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

fn pool_geometry(in_len: usize, size: usize, stride: usize, padding: Padding) -> (usize, usize) {
    let out = padding
        .out_len(in_len, size, stride)
        .expect("pool shape checked by infer_shapes");
    (out, padding.pads(in_len, size, stride).0)
}

/// Window `[start, end)` of output position `t`, clipped to the unpadded input.
#[inline]
fn pool_window(t: usize, size: usize, stride: usize, pad_left: usize, in_len: usize) -> (usize, usize) {
    let start = (t * stride) as isize - pad_left as isize;
    let end = (start + size as isize).min(in_len as isize);
    (start.max(0) as usize, end.max(0) as usize)
}

/// Max pooling; padded positions never win. Ties go to the earliest index.
pub fn max_pool_forward(x: &BatchTensor, size: usize, stride: usize, padding: Padding) -> (BatchTensor, Vec<u32>) {
    let c = x.channels;
    let (out_len, pad_left) = pool_geometry(x.length, size, stride, padding);
    let mut y = BatchTensor::zeros(x.batch, out_len, c);
    let mut arg = vec![0u32; x.batch * out_len * c];
    for n in 0..x.batch {
        let xs = x.sample(n);
        for t in 0..out_len {
            let (s, e) = pool_window(t, size, stride, pad_left, x.length);
            for ch in 0..c {
                let mut best = s;
                let mut bv = xs[s * c + ch];
                for p in s + 1..e {
                    let v = xs[p * c + ch];
                    if v > bv {
                        bv = v;
                        best = p;
                    }
                }
                let o = (n * out_len + t) * c + ch;
                y.data[o] = bv;
                arg[o] = best as u32;
            }
        }
    }
    (y, arg)
}

pub fn max_pool_backward(dy: &BatchTensor, argmax: &[u32], in_len: usize) -> BatchTensor {
    let c = dy.channels;
    let mut dx = BatchTensor::zeros(dy.batch, in_len, c);
    for n in 0..dy.batch {
        for t in 0..dy.length {
            for ch in 0..c {
                let o = (n * dy.length + t) * c + ch;
                dx.data[(n * in_len + argmax[o] as usize) * c + ch] += dy.data[o];
            }
        }
    }
    dx
}

/// Average pooling over the unpadded elements of each window.
pub fn avg_pool_forward(x: &BatchTensor, size: usize, stride: usize, padding: Padding) -> BatchTensor {
    let c = x.channels;
    let (out_len, pad_left) = pool_geometry(x.length, size, stride, padding);
    let mut y = BatchTensor::zeros(x.batch, out_len, c);
    for n in 0..x.batch {
        let xs = x.sample(n);
        for t in 0..out_len {
            let (s, e) = pool_window(t, size, stride, pad_left, x.length);
            let inv = 1.0 / (e - s) as f64;
            let o = (n * out_len + t) * c;
            for p in s..e {
                for ch in 0..c {
                    y.data[o + ch] += xs[p * c + ch];
                }
            }
            y.data[o..o + c].iter_mut().for_each(|v| *v *= inv);
        }
    }
    y
}

pub fn avg_pool_backward(dy: &BatchTensor, in_len: usize, size: usize, stride: usize, padding: Padding) -> BatchTensor {
    let c = dy.channels;
    let (_, pad_left) = pool_geometry(in_len, size, stride, padding);
    let mut dx = BatchTensor::zeros(dy.batch, in_len, c);
    for n in 0..dy.batch {
        for t in 0..dy.length {
            let (s, e) = pool_window(t, size, stride, pad_left, in_len);
            let inv = 1.0 / (e - s) as f64;
            let o = (n * dy.length + t) * c;
            for p in s..e {
                for ch in 0..c {
                    dx.data[(n * in_len + p) * c + ch] += dy.data[o + ch] * inv;
                }
            }
        }
    }
    dx
}

/// Inverted-dropout multipliers: 0 with probability `rate`, else `1 / (1 - rate)`.
pub fn dropout_mask(len: usize, rate: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

pub fn apply_mask(x: &BatchTensor, mask: &[f64]) -> BatchTensor {
    let mut y = x.clone();
    y.data.iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
    y
}

/// Mean over the length axis → `[batch, 1, channels]`.
pub fn gap_forward(x: &BatchTensor) -> BatchTensor {
    let c = x.channels;
    let mut y = BatchTensor::zeros(x.batch, 1, c);
    let inv = 1.0 / x.length as f64;
    for n in 0..x.batch {
        let out = &mut y.data[n * c..(n + 1) * c];
        for row in x.sample(n).chunks_exact(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
    }
    y
}

pub fn gap_backward(dy: &BatchTensor, in_len: usize) -> BatchTensor {
    let c = dy.channels;
    let inv = 1.0 / in_len as f64;
    let mut dx = BatchTensor::zeros(dy.batch, in_len, c);
    for n in 0..dy.batch {
        let g = &dy.data[n * c..(n + 1) * c];
        for row in dx.data[n * in_len * c..(n + 1) * in_len * c].chunks_exact_mut(c) {
            for (d, v) in row.iter_mut().zip(g) {
                *d = v * inv;
            }
        }
    }
    dx
}

/// `w` is `[n_out][n_in]`; input is `[batch, 1, n_in]`.
pub fn dense_forward(x: &BatchTensor, w: &[f64], b: &[f64], n_out: usize) -> BatchTensor {
    let n_in = x.sample_len();
    let mut y = BatchTensor::zeros(x.batch, 1, n_out);
    for n in 0..x.batch {
        let xs = x.sample(n);
        for k in 0..n_out {
            y.data[n * n_out + k] = b[k] + dot(&w[k * n_in..(k + 1) * n_in], xs);
        }
    }
    y
}

pub fn dense_backward(x: &BatchTensor, dy: &BatchTensor, w: &[f64]) -> (BatchTensor, Vec<f64>, Vec<f64>) {
    let n_in = x.sample_len();
    let n_out = dy.channels;
    let mut dx = BatchTensor::zeros(x.batch, x.length, x.channels);
    let mut dw = vec![0.0; n_out * n_in];
    let mut db = vec![0.0; n_out];
    for n in 0..x.batch {
        let xs = x.sample(n);
        for k in 0..n_out {
            let g = dy.data[n * n_out + k];
            db[k] += g;
            axpy(&mut dw[k * n_in..(k + 1) * n_in], g, xs);
            axpy(&mut dx.data[n * n_in..(n + 1) * n_in], g, &w[k * n_in..(k + 1) * n_in]);
        }
    }
    (dx, dw, db)
}
