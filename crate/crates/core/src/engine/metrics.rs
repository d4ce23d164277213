use serde::{Deserialize, Serialize};

use super::model::{forward_net, Network};
use super::train::to_batch;
use super::{EngineError, Mode, ModelWeights};
use crate::arch::Architecture;
use crate::session::Dataset;

const EVAL_BATCH: usize = 256;

/// Classification quality over one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    /// `confusion[truth][predicted]`
    pub confusion: Vec<Vec<usize>>,
    /// Classes with no ground-truth samples; their F1 counts as 0 in the macro mean.
    pub absent_classes: Vec<usize>,
}

impl Metrics {
    pub fn from_predictions(labels: &[usize], predictions: &[usize], n_classes: usize) -> Self {
        let mut confusion = vec![vec![0usize; n_classes]; n_classes];
        let mut correct = 0usize;
        for (&y, &p) in labels.iter().zip(predictions) {
            confusion[y][p] += 1;
            if y == p {
                correct += 1;
            }
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let mut precision = Vec::with_capacity(n_classes);
        let mut recall = Vec::with_capacity(n_classes);
        let mut f1 = Vec::with_capacity(n_classes);
        let mut absent_classes = Vec::new();
        for c in 0..n_classes {
            let tp = confusion[c][c];
            let actual: usize = confusion[c].iter().sum();
            let predicted: usize = confusion.iter().map(|row| row[c]).sum();
            if actual == 0 {
                absent_classes.push(c);
            }
            let p = ratio(tp, predicted);
            let r = ratio(tp, actual);
            precision.push(p);
            recall.push(r);
            f1.push(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) });
        }
        let macro_f1 = if n_classes == 0 {
            0.0
        } else {
            f1.iter().sum::<f64>() / n_classes as f64
        };
        Self {
            accuracy: ratio(correct, labels.len()),
            macro_f1,
            precision,
            recall,
            f1,
            confusion,
            absent_classes,
        }
    }
}

/// Eval-mode argmax predictions, plus the mean cross-entropy over the dataset.
pub fn predict(arch: &Architecture, weights: &ModelWeights, data: &Dataset) -> Result<(Vec<usize>, f64), EngineError> {
    let net = Network::compile(arch)?;
    predict_net(&net, weights, data)
}

pub(crate) fn predict_net(
    net: &Network,
    weights: &ModelWeights,
    data: &Dataset,
) -> Result<(Vec<usize>, f64), EngineError> {
    if data.input_len != net.input_len {
        return Err(EngineError::ShapeMismatch(format!(
            "dataset input length {} differs from architecture input length {}",
            data.input_len, net.input_len
        )));
    }
    let mut preds = Vec::with_capacity(data.len());
    let mut loss_sum = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, labels) = to_batch(data, chunk);
        let out = forward_net(net, weights, &x, Mode::Eval)?;
        let (loss, _) = super::softmax_cross_entropy(&out.logits, &labels)?;
        loss_sum += loss * chunk.len() as f64;
        for row in out.logits.data.chunks_exact(out.logits.channels) {
            preds.push(argmax(row));
        }
    }
    let loss = if data.is_empty() {
        0.0
    } else {
        loss_sum / data.len() as f64
    };
    Ok((preds, loss))
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate(arch: &Architecture, weights: &ModelWeights, data: &Dataset) -> Result<Metrics, EngineError> {
    let (preds, _) = predict(arch, weights, data)?;
    let labels: Vec<usize> = data.samples.iter().map(|s| s.label as usize).collect();
    Ok(Metrics::from_predictions(&labels, &preds, arch.n_classes))
}
