//! Reference implementations used as test oracles. Written from the layer
//! definitions with plain nested loops; nothing here calls into the engine.

#![allow(dead_code)]

use flownas_core::arch::{Architecture, BlockSpec, Padding, PoolKind};
use flownas_core::engine::{BatchTensor, ModelWeights};
use rand::Rng;

pub mod preproc;

pub const EPS: f64 = 1e-5;

/// Output length and left padding of a window op (Keras rules).
pub fn window(len: usize, k: usize, s: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Valid => {
            if len < k {
                None
            } else {
                Some(((len - k) / s + 1, 0))
            }
        }
        Padding::Same => {
            let out = len.div_ceil(s);
            let need = ((out - 1) * s + k).saturating_sub(len);
            Some((out, need / 2))
        }
    }
}

/// One sample as `[length][channels]`.
pub type Seq = Vec<Vec<f64>>;

fn conv(x: &Seq, w: &[f64], b: &[f64], k: usize, s: usize, padding: Padding, c_out: usize) -> Seq {
    let c_in = x[0].len();
    let (out, left) = window(x.len(), k, s, padding).expect("degenerate");
    let mut y = vec![vec![0.0; c_out]; out];
    for (t, row) in y.iter_mut().enumerate() {
        for (o, v) in row.iter_mut().enumerate() {
            let mut acc = b[o];
            for j in 0..k {
                let pos = (t * s + j) as isize - left as isize;
                if pos < 0 || pos as usize >= x.len() {
                    continue;
                }
                for c in 0..c_in {
                    acc += w[(o * k + j) * c_in + c] * x[pos as usize][c];
                }
            }
            *v = acc;
        }
    }
    y
}

fn pool(x: &Seq, kind: PoolKind, k: usize, s: usize, padding: Padding) -> Seq {
    let c = x[0].len();
    let (out, left) = window(x.len(), k, s, padding).expect("degenerate");
    (0..out)
        .map(|t| {
            (0..c)
                .map(|ch| {
                    let vals: Vec<f64> = (0..k)
                        .map(|j| (t * s + j) as isize - left as isize)
                        .filter(|&p| p >= 0 && (p as usize) < x.len())
                        .map(|p| x[p as usize][ch])
                        .collect();
                    match kind {
                        PoolKind::Max => vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                        PoolKind::Avg => vals.iter().sum::<f64>() / vals.len() as f64,
                    }
                })
                .collect()
        })
        .collect()
}

fn dense(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    b.iter()
        .enumerate()
        .map(|(o, bo)| bo + x.iter().enumerate().map(|(i, v)| w[o * x.len() + i] * v).sum::<f64>())
        .collect()
}

fn gap(x: &Seq) -> Vec<f64> {
    let c = x[0].len();
    (0..c)
        .map(|ch| x.iter().map(|r| r[ch]).sum::<f64>() / x.len() as f64)
        .collect()
}

pub fn to_seqs(batch: &BatchTensor) -> Vec<Seq> {
    (0..batch.batch)
        .map(|n| {
            (0..batch.length)
                .map(|t| {
                    let at = (n * batch.length + t) * batch.channels;
                    batch.data[at..at + batch.channels].to_vec()
                })
                .collect()
        })
        .collect()
}

/// Eval-mode logits with running statistics; dropout is the identity.
pub fn eval_logits(arch: &Architecture, w: &ModelWeights, batch: &BatchTensor) -> Vec<Vec<f64>> {
    to_seqs(batch)
        .into_iter()
        .map(|mut x| {
            for (blk, bw) in arch.blocks.iter().zip(&w.blocks) {
                x = conv(
                    &x,
                    &bw.conv_w,
                    &bw.conv_b,
                    bw.kernel,
                    blk.stride as usize,
                    blk.padding,
                    bw.out_channels,
                );
                for row in x.iter_mut() {
                    for (c, v) in row.iter_mut().enumerate() {
                        let n = (*v - bw.running_mean[c]) / (bw.running_var[c] + EPS).sqrt();
                        *v = (n * bw.gamma[c] + bw.beta[c]).max(0.0);
                    }
                }
                if let Some(p) = &blk.pool {
                    x = pool(&x, p.kind, p.size as usize, p.stride as usize, p.padding);
                }
            }
            dense(&gap(&x), &w.dense_w, &w.dense_b)
        })
        .collect()
}

/// Train-mode forward (batch statistics, no dropout) returning mean cross-entropy.
pub fn train_loss(arch: &Architecture, w: &ModelWeights, batch: &BatchTensor, labels: &[usize]) -> f64 {
    let mut xs = to_seqs(batch);
    for (blk, bw) in arch.blocks.iter().zip(&w.blocks) {
        assert_eq!(blk.dropout, 0.0, "oracle loss has no dropout");
        let mut ys: Vec<Seq> = xs
            .iter()
            .map(|x| {
                conv(
                    x,
                    &bw.conv_w,
                    &bw.conv_b,
                    bw.kernel,
                    blk.stride as usize,
                    blk.padding,
                    bw.out_channels,
                )
            })
            .collect();
        let c = bw.out_channels;
        let count = (ys.len() * ys[0].len()) as f64;
        for ch in 0..c {
            let mean = ys.iter().flatten().map(|r| r[ch]).sum::<f64>() / count;
            let var = ys.iter().flatten().map(|r| (r[ch] - mean).powi(2)).sum::<f64>() / count;
            let inv = 1.0 / (var + EPS).sqrt();
            for y in ys.iter_mut() {
                for r in y.iter_mut() {
                    r[ch] = ((r[ch] - mean) * inv * bw.gamma[ch] + bw.beta[ch]).max(0.0);
                }
            }
        }
        if let Some(p) = &blk.pool {
            ys = ys
                .iter()
                .map(|y| pool(y, p.kind, p.size as usize, p.stride as usize, p.padding))
                .collect();
        }
        xs = ys;
    }
    let mut total = 0.0;
    for (x, &label) in xs.iter().zip(labels) {
        let z = dense(&gap(x), &w.dense_w, &w.dense_b);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - z[label];
    }
    total / labels.len() as f64
}

/// Relative agreement with an absolute floor for values that are zero up to rounding.
pub fn close(a: f64, b: f64, rel: f64, abs_floor: f64) -> bool {
    let d = (a - b).abs();
    d <= abs_floor || d <= rel * a.abs().max(b.abs())
}

pub fn random_batch<R: Rng>(rng: &mut R, n: usize, len: usize) -> BatchTensor {
    BatchTensor {
        batch: n,
        length: len,
        channels: 1,
        data: (0..n * len).map(|_| rng.gen_range(0.0..1.0)).collect(),
    }
}

/// Random weights including non-trivial batch-norm parameters and running statistics.
pub fn random_weights<R: Rng>(arch: &Architecture, rng: &mut R) -> ModelWeights {
    let mut w = ModelWeights::init(arch, rng).unwrap();
    for b in &mut w.blocks {
        for v in b.conv_b.iter_mut() {
            *v = rng.gen_range(-0.2..0.2);
        }
        for c in 0..b.out_channels {
            b.gamma[c] = rng.gen_range(0.5..1.5);
            b.beta[c] = rng.gen_range(-0.3..0.3);
            b.running_mean[c] = rng.gen_range(-0.5..0.5);
            b.running_var[c] = rng.gen_range(0.2..2.0);
        }
    }
    for v in w.dense_b.iter_mut() {
        *v = rng.gen_range(-0.2..0.2);
    }
    w
}

/// Small random block (filters 2-8, any kernel/stride/padding/pool), no dropout.
pub fn small_block<R: Rng>(rng: &mut R) -> BlockSpec {
    let padding = if rng.gen_bool(0.5) {
        Padding::Same
    } else {
        Padding::Valid
    };
    let mut b = BlockSpec::conv(
        rng.gen_range(2..=8),
        rng.gen_range(2..=5),
        rng.gen_range(1..=3),
        padding,
    );
    if rng.gen_bool(0.6) {
        let kind = if rng.gen_bool(0.5) {
            PoolKind::Max
        } else {
            PoolKind::Avg
        };
        let size = rng.gen_range(2..=3);
        let pp = if rng.gen_bool(0.5) {
            Padding::Same
        } else {
            Padding::Valid
        };
        b = b.with_pool(kind, size, rng.gen_range(1..=size), pp);
    }
    b
}

/// Small random network (1-2 blocks, length 16-64) whose shapes are non-degenerate.
pub fn small_arch<R: Rng>(rng: &mut R, n_classes: usize) -> Architecture {
    loop {
        let depth = rng.gen_range(1..=2);
        let blocks = (0..depth).map(|_| small_block(rng)).collect();
        let arch = Architecture::new(rng.gen_range(16..=64), blocks, n_classes);
        if flownas_core::arch::infer_shapes(&arch).is_ok() {
            return arch;
        }
    }
}

pub struct GradCheck {
    pub checked: usize,
    pub passed: usize,
    pub worst: f64,
}

impl GradCheck {
    pub fn fraction(&self) -> f64 {
        self.passed as f64 / self.checked as f64
    }
}

/// Central differences of the oracle loss over every trainable coordinate.
pub fn grad_check(
    arch: &Architecture,
    w: &ModelWeights,
    analytic: &ModelWeights,
    batch: &BatchTensor,
    labels: &[usize],
    h: f64,
    rel: f64,
) -> GradCheck {
    let mut probe = w.clone();
    let grads: Vec<Vec<f64>> = analytic.trainable().iter().map(|s| s.to_vec()).collect();
    let mut out = GradCheck {
        checked: 0,
        passed: 0,
        worst: 0.0,
    };
    for (t, g) in grads.iter().enumerate() {
        for (i, &a) in g.iter().enumerate() {
            let orig = probe.trainable()[t][i];
            probe.trainable_mut()[t][i] = orig + h;
            let up = train_loss(arch, &probe, batch, labels);
            probe.trainable_mut()[t][i] = orig - h;
            let down = train_loss(arch, &probe, batch, labels);
            probe.trainable_mut()[t][i] = orig;
            let numeric = (up - down) / (2.0 * h);
            out.checked += 1;
            if close(a, numeric, rel, 1e-8) {
                out.passed += 1;
            } else {
                let r = (a - numeric).abs() / a.abs().max(numeric.abs());
                out.worst = out.worst.max(r);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleCost {
    pub params: u64,
    pub flops: u64,
    pub max_tensor: u64,
}

/// Closed-form cost: 2 ops per multiply-accumulate, BN 2 ops and ReLU 1 op per
/// element, pool `size` ops per output, GAP one add per input, softmax 5 per class.
pub fn oracle_cost(arch: &Architecture, bn_per_channel: u64) -> Option<OracleCost> {
    let (mut len, mut ch) = (arch.input_len, arch.input_channels);
    let mut c = OracleCost {
        params: 0,
        flops: 0,
        max_tensor: (len * ch) as u64,
    };
    for b in &arch.blocks {
        let (k, f) = (b.kernel as usize, b.filters as usize);
        let (out, _) = window(len, k, b.stride as usize, b.padding)?;
        if out == 0 {
            return None;
        }
        c.params += (k * ch * f + f) as u64 + bn_per_channel * f as u64;
        c.flops += (2 * out * f * k * ch + 2 * out * f + out * f) as u64;
        c.max_tensor = c.max_tensor.max((out * f) as u64);
        len = out;
        ch = f;
        if let Some(p) = &b.pool {
            let (o, _) = window(len, p.size as usize, p.stride as usize, p.padding)?;
            if o == 0 {
                return None;
            }
            c.flops += (p.size as usize * o * ch) as u64;
            c.max_tensor = c.max_tensor.max((o * ch) as u64);
            len = o;
        }
    }
    let n = arch.n_classes;
    c.flops += (len * ch + 2 * ch * n + 5 * n) as u64;
    c.params += (ch * n + n) as u64;
    c.max_tensor = c.max_tensor.max(ch.max(n) as u64);
    Some(c)
}
