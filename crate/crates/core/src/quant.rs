//! Simulated post-training quantization: BN folding, min/max calibration and
//! fake-quant inference in `f64`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::Architecture;
use crate::engine::layers;
use crate::engine::{to_batch, BatchTensor, EngineError, Metrics, ModelWeights, Network, Op, BN_EPSILON};
use crate::session::Dataset;

pub const SCALE_FLOOR: f64 = 1e-8;
const BATCH: usize = 256;

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("calibration needs at least one non-empty batch")]
    EmptyCalibration,
    #[error("model has not been calibrated")]
    NotCalibrated,
    #[error("unsupported bit width {0} (expected 2..=16)")]
    InvalidBits(u8),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Affine map between reals and signed `bits`-wide integer codes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i32,
    pub bits: u8,
}

impl QuantParams {
    pub fn qmin(bits: u8) -> i32 {
        -(1i32 << (bits - 1))
    }

    pub fn qmax(bits: u8) -> i32 {
        (1i32 << (bits - 1)) - 1
    }

    /// Zero point 0, scale `max_abs / qmax`.
    pub fn symmetric(max_abs: f64, bits: u8) -> Self {
        Self {
            scale: (max_abs / Self::qmax(bits) as f64).max(SCALE_FLOOR),
            zero_point: 0,
            bits,
        }
    }

    /// Asymmetric affine map over `[min, max]` widened to contain 0.
    pub fn asymmetric(min: f64, max: f64, bits: u8) -> Self {
        let (lo, hi) = (min.min(0.0), max.max(0.0));
        let (qmin, qmax) = (Self::qmin(bits), Self::qmax(bits));
        let scale = ((hi - lo) / (qmax - qmin) as f64).max(SCALE_FLOOR);
        let zero_point = (qmin as f64 - lo / scale).round().clamp(qmin as f64, qmax as f64) as i32;
        Self {
            scale,
            zero_point,
            bits,
        }
    }

    pub fn quantize(&self, x: f64) -> i32 {
        let q = (x / self.scale).round() + self.zero_point as f64;
        q.clamp(Self::qmin(self.bits) as f64, Self::qmax(self.bits) as f64) as i32
    }

    pub fn dequantize(&self, q: i32) -> f64 {
        (q - self.zero_point) as f64 * self.scale
    }

    pub fn fake(&self, x: f64) -> f64 {
        self.dequantize(self.quantize(x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantConfig {
    pub bits: u8,
    pub per_channel: bool,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            bits: 8,
            per_channel: false,
        }
    }
}

/// Conv and dense weights with batch norm folded into each conv.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldedModel {
    /// Per block `(weights [out][k][in], bias)`.
    pub convs: Vec<(Vec<f64>, Vec<f64>)>,
    pub dense_w: Vec<f64>,
    pub dense_b: Vec<f64>,
}

pub fn fold_batch_norm(weights: &ModelWeights) -> FoldedModel {
    let convs = weights
        .blocks
        .iter()
        .map(|b| {
            let per_out = b.kernel * b.in_channels;
            let mut w = b.conv_w.clone();
            let mut bias = vec![0.0; b.out_channels];
            for o in 0..b.out_channels {
                let s = b.gamma[o] / (b.running_var[o] + BN_EPSILON).sqrt();
                w[o * per_out..(o + 1) * per_out].iter_mut().for_each(|v| *v *= s);
                bias[o] = (b.conv_b[o] - b.running_mean[o]) * s + b.beta[o];
            }
            (w, bias)
        })
        .collect();
    FoldedModel {
        convs,
        dense_w: weights.dense_w.clone(),
        dense_b: weights.dense_b.clone(),
    }
}

/// Runs the folded graph; `hook(i, x)` sees (and may rewrite) the input of the
/// i-th conv/dense layer, with the dense layer last.
fn run_folded(
    net: &Network,
    model: &FoldedModel,
    batch: &BatchTensor,
    hook: &mut dyn FnMut(usize, &mut BatchTensor),
) -> Result<BatchTensor, EngineError> {
    if batch.length != net.input_len || batch.channels != 1 {
        return Err(EngineError::ShapeMismatch(format!(
            "batch is [{}, {}, {}], network expects length {} with 1 channel",
            batch.batch, batch.length, batch.channels, net.input_len
        )));
    }
    let mut x = batch.clone();
    for op in &net.ops {
        x = match *op {
            Op::Conv {
                block,
                kernel,
                stride,
                pads,
                out_channels,
            } => {
                hook(block, &mut x);
                let xp = layers::pad_length(&x, pads.0, pads.1);
                let (w, b) = &model.convs[block];
                layers::conv_forward(&xp, w, b, kernel, stride, out_channels)
            }
            Op::BatchNorm { .. } | Op::Dropout { .. } => x,
            Op::Relu => layers::relu_forward(&x),
            Op::Pool {
                kind,
                size,
                stride,
                padding,
            } => match kind {
                crate::arch::PoolKind::Max => layers::max_pool_forward(&x, size, stride, padding).0,
                crate::arch::PoolKind::Avg => layers::avg_pool_forward(&x, size, stride, padding),
            },
            Op::Gap => layers::gap_forward(&x),
            Op::Dense => {
                hook(model.convs.len(), &mut x);
                layers::dense_forward(&x, &model.dense_w, &model.dense_b, net.n_classes)
            }
        };
    }
    Ok(x)
}

/// Real-valued forward through the folded model.
pub fn folded_forward(
    arch: &Architecture,
    model: &FoldedModel,
    batch: &BatchTensor,
) -> Result<BatchTensor, EngineError> {
    run_folded(&Network::compile(arch)?, model, batch, &mut |_, _| {})
}

fn quantize_tensor(w: &[f64], groups: usize, bits: u8) -> (Vec<f64>, Vec<QuantParams>) {
    let per = w.len() / groups;
    let mut out = Vec::with_capacity(w.len());
    let mut params = Vec::with_capacity(groups);
    for chunk in w.chunks(per.max(1)) {
        let p = QuantParams::symmetric(chunk.iter().fold(0.0f64, |m, v| m.max(v.abs())), bits);
        out.extend(chunk.iter().map(|&v| p.fake(v)));
        params.push(p);
    }
    (out, params)
}

/// A folded model with fake-quantized weights and, once calibrated, activation ranges.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    pub config: QuantConfig,
    net: Network,
    folded: FoldedModel,
    quantized: FoldedModel,
    /// One entry per conv/dense layer: one params value, or one per output channel.
    pub weight_params: Vec<Vec<QuantParams>>,
    ranges: Option<Vec<(f64, f64)>>,
}

impl QuantizedModel {
    pub fn new(arch: &Architecture, weights: &ModelWeights, config: QuantConfig) -> Result<Self, QuantError> {
        if !(2..=16).contains(&config.bits) {
            return Err(QuantError::InvalidBits(config.bits));
        }
        weights.check_matches(arch)?;
        let net = Network::compile(arch)?;
        let folded = fold_batch_norm(weights);
        let mut weight_params = Vec::new();
        let mut convs = Vec::new();
        for (w, b) in &folded.convs {
            let groups = if config.per_channel { b.len() } else { 1 };
            let (qw, p) = quantize_tensor(w, groups, config.bits);
            convs.push((qw, b.clone()));
            weight_params.push(p);
        }
        let groups = if config.per_channel { weights.n_classes } else { 1 };
        let (dense_w, p) = quantize_tensor(&folded.dense_w, groups, config.bits);
        weight_params.push(p);
        let quantized = FoldedModel {
            convs,
            dense_w,
            dense_b: folded.dense_b.clone(),
        };
        Ok(Self {
            config,
            net,
            folded,
            quantized,
            weight_params,
            ranges: None,
        })
    }

    /// Accumulates running min/max of every conv/dense input over `batches`.
    pub fn calibrate(&mut self, batches: &[BatchTensor]) -> Result<(), QuantError> {
        if batches.iter().all(|b| b.batch == 0) {
            return Err(QuantError::EmptyCalibration);
        }
        let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); self.weight_params.len()];
        for b in batches.iter().filter(|b| b.batch > 0) {
            run_folded(&self.net, &self.folded, b, &mut |i, x| {
                let r = &mut ranges[i];
                for &v in &x.data {
                    r.0 = r.0.min(v);
                    r.1 = r.1.max(v);
                }
            })?;
        }
        self.ranges = Some(ranges);
        Ok(())
    }

    pub fn activation_ranges(&self) -> Option<&[(f64, f64)]> {
        self.ranges.as_deref()
    }

    pub fn activation_params(&self) -> Option<Vec<QuantParams>> {
        self.ranges.as_ref().map(|r| {
            r.iter()
                .map(|&(lo, hi)| QuantParams::asymmetric(lo, hi, self.config.bits))
                .collect()
        })
    }

    pub fn folded(&self) -> &FoldedModel {
        &self.folded
    }

    /// Fake-quant logits: activations entering each conv/dense are rounded to the
    /// calibrated grid, weights to their symmetric grid; biases stay real.
    pub fn forward(&self, batch: &BatchTensor) -> Result<BatchTensor, QuantError> {
        let params = self.activation_params().ok_or(QuantError::NotCalibrated)?;
        Ok(run_folded(&self.net, &self.quantized, batch, &mut |i, x| {
            let p = params[i];
            x.data.iter_mut().for_each(|v| *v = p.fake(*v));
        })?)
    }

    pub fn predict(&self, data: &Dataset) -> Result<Vec<usize>, QuantError> {
        let idx: Vec<usize> = (0..data.len()).collect();
        let parts: Vec<Result<Vec<usize>, QuantError>> = idx
            .par_chunks(BATCH)
            .map(|chunk| {
                let (x, _) = to_batch(data, chunk);
                let logits = self.forward(&x)?;
                Ok(logits.data.chunks_exact(logits.channels).map(argmax).collect())
            })
            .collect();
        let mut preds = Vec::with_capacity(data.len());
        for p in parts {
            preds.extend(p?);
        }
        Ok(preds)
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Calibrates on `calib` split into batches and returns the ready model.
pub fn calibrate(
    arch: &Architecture,
    weights: &ModelWeights,
    calib: &Dataset,
    config: QuantConfig,
) -> Result<QuantizedModel, QuantError> {
    let mut q = QuantizedModel::new(arch, weights, config)?;
    let idx: Vec<usize> = (0..calib.len()).collect();
    let batches: Vec<BatchTensor> = idx.chunks(BATCH).map(|c| to_batch(calib, c).0).collect();
    q.calibrate(&batches)?;
    Ok(q)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    /// `None` for the overall row.
    pub class: Option<usize>,
    pub support: usize,
    pub acc_real: f64,
    pub acc_quant: f64,
    pub delta: f64,
}

/// Real versus quantized accuracy, overall and per class (per-class accuracy is recall).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantReport {
    pub bits: u8,
    pub rows: Vec<ReportRow>,
}

impl QuantReport {
    pub fn overall(&self) -> &ReportRow {
        &self.rows[0]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,support,acc_real,acc_quant,delta\n");
        for r in &self.rows {
            let class = r.class.map_or("all".to_string(), |c| c.to_string());
            s.push_str(&format!(
                "{class},{},{:.6},{:.6},{:.6}\n",
                r.support, r.acc_real, r.acc_quant, r.delta
            ));
        }
        s
    }
}

pub fn compare_predictions(
    labels: &[usize],
    real: &[usize],
    quant: &[usize],
    n_classes: usize,
    bits: u8,
) -> QuantReport {
    let a = Metrics::from_predictions(labels, real, n_classes);
    let b = Metrics::from_predictions(labels, quant, n_classes);
    let mut rows = vec![ReportRow {
        class: None,
        support: labels.len(),
        acc_real: a.accuracy,
        acc_quant: b.accuracy,
        delta: a.accuracy - b.accuracy,
    }];
    for c in 0..n_classes {
        rows.push(ReportRow {
            class: Some(c),
            support: a.confusion[c].iter().sum(),
            acc_real: a.recall[c],
            acc_quant: b.recall[c],
            delta: a.recall[c] - b.recall[c],
        });
    }
    QuantReport { bits, rows }
}

/// Evaluates the real model and `quant` on the same data.
pub fn compare(
    arch: &Architecture,
    weights: &ModelWeights,
    quant: &QuantizedModel,
    data: &Dataset,
) -> Result<QuantReport, QuantError> {
    let (real, _) = crate::engine::predict(arch, weights, data)?;
    let q = quant.predict(data)?;
    let labels: Vec<usize> = data.samples.iter().map(|s| s.label as usize).collect();
    Ok(compare_predictions(
        &labels,
        &real,
        &q,
        arch.n_classes,
        quant.config.bits,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_zero_range() {
        let p = QuantParams::asymmetric(0.0, 0.0, 8);
        assert_eq!(p.scale, SCALE_FLOOR);
        assert_eq!(p.fake(0.0), 0.0);
        let s = QuantParams::symmetric(0.0, 8);
        assert_eq!(s.scale, SCALE_FLOOR);
        assert_eq!(s.quantize(0.0), 0);
    }

    #[test]
    fn unit_range_grid() {
        let p = QuantParams::asymmetric(-1.0, 1.0, 8);
        assert!((-128..=127).contains(&p.zero_point));
        let lo = p.dequantize(-128);
        let hi = p.dequantize(127);
        assert!(lo <= -1.0 + p.scale / 2.0 && hi >= 1.0 - p.scale / 2.0);
        for i in 0..=2000 {
            let x = -1.0 + i as f64 / 1000.0;
            assert!((p.fake(x) - x).abs() <= p.scale / 2.0 + 1e-12);
        }
    }

    #[test]
    fn code_roundtrip() {
        for bits in [4u8, 8, 16] {
            let p = QuantParams::asymmetric(-0.3, 2.7, bits);
            for q in QuantParams::qmin(bits)..=QuantParams::qmax(bits) {
                assert_eq!(p.quantize(p.dequantize(q)), q);
            }
        }
    }

    #[test]
    fn label_flips_give_delta() {
        let labels: Vec<usize> = (0..100).map(|i| i % 2).collect();
        let mut quant = labels.clone();
        for q in quant.iter_mut().take(10) {
            *q = 1 - *q;
        }
        let r = compare_predictions(&labels, &labels, &quant, 2, 8);
        assert!((r.overall().delta - 0.10).abs() < 1e-12);
        assert_eq!(r.rows.len(), 3);
        assert_eq!(r.to_csv().lines().count(), 4);
    }
}
